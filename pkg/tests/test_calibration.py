import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consolidate.calibration import (CalibrationSet, adamerging_gradient, adamerging_optimize,
                                     capture_activations, cat_merge, cat_projections, entropy,
                                     project_out, regmean_merge)
from consolidate.checkpoint import Checkpoint
from consolidate.errors import InvalidDistributionError, RankError, RecipeError
from consolidate.merge.dispatch import make_groups
from consolidate.taskvec import compute_task_vector, dense_weights
from consolidate.testbed import mlp

from conftest import random_checkpoint
from test_merge import small_world


def head_only(in_dim, out_dim):
    return mlp.build_manifest(input_dim=in_dim, hidden=0, n_classes=out_dim)


def cal(x, tag="c"):
    return CalibrationSet(np.asarray(x, dtype=np.float64), source_tag=tag)


class TestEntropy:
    def test_uniform(self):
        assert entropy([0.25] * 4) == pytest.approx(math.log(4))
        assert entropy([0.25] * 4) == pytest.approx(1.3863, abs=1e-4)

    def test_one_hot(self):
        assert entropy([0, 1, 0]) == 0

    def test_half(self):
        assert entropy([0.5, 0.5, 0, 0]) == pytest.approx(0.6931, abs=1e-4)

    def test_invalid(self):
        for bad in ([0.5, 0.6], [-0.1, 1.1], [[0.5, 0.5]]):
            with pytest.raises(InvalidDistributionError):
                entropy(bad)


class TestCapture:
    def test_identity_model(self):
        m = head_only(4, 4)
        model = Checkpoint(m, {"head.weight": np.eye(4), "head.bias": np.zeros(4)})
        stats = capture_activations(model, cal(np.vstack([np.eye(4)] * 2)))
        np.testing.assert_array_equal(stats.grams[1], 2 * np.eye(4))

    def test_doubling_rows(self):
        model = random_checkpoint(mlp.build_manifest(5, 6, 2, 3), 1)
        x = np.random.default_rng(0).standard_normal((10, 5))
        one = capture_activations(model, cal(x))
        two = capture_activations(model, cal(np.vstack([x, x])))
        for d in one.grams:
            np.testing.assert_allclose(two.grams[d], 2 * one.grams[d], rtol=1e-12)

    def test_gram_psd_and_brute_force(self):
        model = random_checkpoint(mlp.build_manifest(5, 6, 2, 3), 3)
        x = np.random.default_rng(3).standard_normal((12, 5))
        stats = capture_activations(model, cal(x), r=2)
        cache = mlp.forward(mlp.params_of(model), model.manifest, x)
        for d, g in stats.grams.items():
            np.testing.assert_allclose(g, g.T, atol=1e-12)
            assert np.linalg.eigvalsh(g).min() >= -1e-8
            brute = sum(np.outer(row, row) for row in cache.inputs[d - 1])
            np.testing.assert_allclose(g, brute, atol=1e-5)
            b = stats.bases[d]
            np.testing.assert_allclose(b.T @ b, np.eye(b.shape[1]), atol=1e-6)

    def test_too_small(self):
        with pytest.raises(RecipeError):
            cal(np.zeros((7, 3)))


class TestRegMean:
    def _layer(self, seed, n=2, rows=8, in_dim=3, out_dim=2):
        g = np.random.default_rng(seed)
        m = head_only(in_dim, out_dim)
        base = random_checkpoint(m, seed)
        experts = [random_checkpoint(m, seed + 1 + i, kind="expert") for i in range(n)]
        xs = [g.standard_normal((rows, in_dim)) * g.uniform(0.5, 2, in_dim) for _ in range(n)]
        return base, experts, xs

    def test_single_expert(self):
        base, experts, xs = self._layer(0, n=1)
        out = regmean_merge(base, experts, [cal(xs[0])], rho=0.9).checkpoint
        np.testing.assert_allclose(out.tensors["head.weight"], experts[0].tensors["head.weight"], atol=1e-5)

    def test_identical_grams(self):
        base, experts, xs = self._layer(1, n=3)
        out = regmean_merge(base, experts, [cal(xs[0])] * 3, rho=0.5).checkpoint
        mean = np.mean([e.tensors["head.weight"].astype(np.float64) for e in experts], axis=0)
        np.testing.assert_allclose(out.tensors["head.weight"], mean, atol=1e-5)

    def test_normal_equations_oracle(self):
        base, experts, xs = self._layer(2)
        out = regmean_merge(base, experts, [cal(x) for x in xs], rho=1.0).checkpoint
        ws = [e.tensors["head.weight"].astype(np.float64) for e in experts]
        # least squares on the stacked system [X1; X2] W^T = [X1 W1^T; X2 W2^T]
        a = np.vstack(xs)
        b = np.vstack([x @ w.T for x, w in zip(xs, ws)])
        want = np.linalg.lstsq(a, b, rcond=None)[0].T
        np.testing.assert_allclose(out.tensors["head.weight"], want, atol=1e-4)

    @settings(max_examples=20)
    @given(st.integers(0, 2**16))
    def test_diagonal_gram_is_energy_weighted(self, seed):
        base, experts, xs = self._layer(seed, n=3)
        out = regmean_merge(base, experts, [cal(x) for x in xs], rho=0.0).checkpoint
        ws = [e.tensors["head.weight"].astype(np.float64) for e in experts]
        energy = [np.sum(x * x, axis=0) for x in xs]
        want = sum(w * e for w, e in zip(ws, energy)) / sum(energy)
        np.testing.assert_allclose(out.tensors["head.weight"], want, atol=1e-5)

    def test_biases_averaged(self):
        base, experts, xs = self._layer(3)
        out = regmean_merge(base, experts, [cal(x) for x in xs], rho=0.9, alpha=[0.25, 0.75]).checkpoint
        want = 0.25 * experts[0].tensors["head.bias"].astype(np.float64) \
            + 0.75 * experts[1].tensors["head.bias"].astype(np.float64)
        np.testing.assert_allclose(out.tensors["head.bias"], want, atol=1e-6)

    def test_singular_falls_back(self, caplog):
        base, experts, _ = self._layer(4)
        zero = cal(np.zeros((8, 3)))
        out = regmean_merge(base, experts, [zero, zero], rho=1.0).checkpoint
        mean = np.mean([e.tensors["head.weight"].astype(np.float64) for e in experts], axis=0)
        np.testing.assert_allclose(out.tensors["head.weight"], mean, atol=1e-6)
        assert "falling back" in caplog.text


class TestAdaMerging:
    def test_backprop_matches_finite_differences(self):
        base, experts, cals = small_world(7, scale=0.5)
        tvs = [compute_task_vector(base, e) for e in experts]
        m = base.manifest.dense()
        groups = make_groups(m, "layer")
        lam = np.random.default_rng(0).uniform(0.1, 0.9, (3, len(groups)))
        x = cals[0].inputs
        v1, g1 = adamerging_gradient(dense_weights(base), m, tvs, groups, lam, x, "backprop")
        v2, g2 = adamerging_gradient(dense_weights(base), m, tvs, groups, lam, x, "fd")
        assert v1 == pytest.approx(v2, rel=1e-12)
        assert np.max(np.abs(g1 - g2)) <= 1e-3 * np.max(np.abs(g1))

    def test_monotone_and_clamped(self):
        base, experts, cals = small_world(8, scale=0.5)
        res = adamerging_optimize(base, experts, cals[0], iters=50, step=0.5)
        assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
        assert np.all((res.coefficients >= 0) & (res.coefficients <= 1))

    def test_stationary_when_outputs_are_uniform(self):
        base, experts, cals = small_world(9)
        zero_head = {"head.weight": np.zeros((3, 8)), "head.bias": np.zeros(3)}
        base = base.with_tensors({**base.tensors, **zero_head})
        experts = [e.with_tensors({**e.tensors, **zero_head}) for e in experts]
        res = adamerging_optimize(base, experts, cals[0], iters=20, init=0.3)
        np.testing.assert_array_equal(res.coefficients, 0.3)
        assert res.trace == [pytest.approx(math.log(3))]

    def test_unit_coefficients_reproduce_expert(self):
        base, experts, cals = small_world(10)
        res = adamerging_optimize(base, experts[:1], cals[0], iters=0, init=1.0)
        x = cals[0].inputs
        merged = res.merged.checkpoint
        np.testing.assert_array_equal(mlp.logits(mlp.params_of(merged), merged.manifest, x),
                                      mlp.logits(mlp.params_of(experts[0]), experts[0].manifest, x))


class TestCat:
    def test_two_by_two(self):
        t = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [0.0]])
        np.testing.assert_array_equal(t @ b @ b.T, [[1, 0], [3, 0]])
        np.testing.assert_array_equal(project_out(t, b), [[0, 2], [0, 4]])

    def test_projection_identity(self):
        base, experts, cals = small_world(11, scale=0.5)
        stats = [capture_activations(e, c, 2) for e, c in zip(experts, cals)]
        tvs = [compute_task_vector(base, e) for e in experts]
        for projected, bases in cat_projections(base.manifest, tvs, stats, 2):
            for layer in mlp.layers(base.manifest):
                b = bases[layer.depth]
                assert b.shape[1] == 2
                assert np.max(np.abs(projected[layer.weight] @ b)) <= 1e-8

    def test_single_expert_unprojected(self):
        base, experts, cals = small_world(12)
        stats = [capture_activations(experts[0], cals[0])]
        out = cat_merge(base, experts[:1], stats, 2).checkpoint
        for name, t in experts[0].tensors.items():
            np.testing.assert_allclose(out.tensors[name], t, atol=1e-6)

    def test_rank_too_large(self):
        base, experts, cals = small_world(13)
        stats = [capture_activations(e, c) for e, c in zip(experts, cals)]
        with pytest.raises(RankError):
            cat_merge(base, experts, stats, r=6)
