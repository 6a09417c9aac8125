import itertools

import numpy as np
import pytest

from consolidate.checkpoint import Checkpoint, checkpoint_bytes
from consolidate.errors import TrainingError, ValidationError
from consolidate.merge import MergeRecipe, apply_recipe
from consolidate.taskvec import compute_task_vector, subspace_angles
from consolidate.testbed import mlp
from consolidate.testbed.evaluate import accuracy, evaluate
from consolidate.testbed.suite import run_suite
from consolidate.testbed.tasks import (Dataset, TaskBundle, dataset_bytes, gen_tasks, read_dataset,
                                       rotation_angles, union, write_dataset)
from consolidate.testbed.train import init_base, train, train_joint

from conftest import random_checkpoint


def finite_difference_check(params, manifest, x, y, mode, h=1e-4):
    _, grads = mlp.cross_entropy(params, manifest, x, y, mode)
    worst = 0.0
    for name, g in grads.items():
        fd = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            orig = params[name][idx]
            params[name][idx] = orig + h
            up, _ = mlp.cross_entropy(params, manifest, x, y, mode)
            params[name][idx] = orig - h
            down, _ = mlp.cross_entropy(params, manifest, x, y, mode)
            params[name][idx] = orig
            fd[idx] = (up - down) / (2 * h)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-7)
        worst = max(worst, float(rel.max()))
    return grads, worst


class TestGradients:
    def _toy(self, seed, lowrank=False):
        m = mlp.build_manifest(input_dim=4, width=5, hidden=1, n_classes=3)
        if lowrank:
            m = mlp.with_lowrank(m, 2, 2.0)
        params = {k: v.astype(np.float64) for k, v in random_checkpoint(m, seed).tensors.items()}
        g = np.random.default_rng(seed + 100)
        return m, params, g.standard_normal((6, 4)), g.integers(0, 3, 6)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full(self, seed):
        m, params, x, y = self._toy(seed)
        grads, worst = finite_difference_check(params, m, x, y, "full")
        assert set(grads) == set(m.names)
        assert worst <= 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_lowrank(self, seed):
        m, params, x, y = self._toy(seed, lowrank=True)
        grads, worst = finite_difference_check(params, m, x, y, "lowrank")
        assert {n for n in grads if "lowrank" in n} == {e.name for e in m.entries if "lowrank" in e.role}
        assert not any(e.name in grads for e in m.entries if e.role in ("weight", "head_weight"))
        assert worst <= 1e-4

    def test_mean_entropy_gradient(self):
        m, params, x, _ = self._toy(4)
        _, grads = mlp.mean_entropy(params, m, x)
        h = 1e-5
        for name in ("fc1.weight", "head.bias"):
            idx = (0,) * params[name].ndim
            orig = params[name][idx]
            params[name][idx] = orig + h
            up, _ = mlp.mean_entropy(params, m, x)
            params[name][idx] = orig - h
            down, _ = mlp.mean_entropy(params, m, x)
            params[name][idx] = orig
            assert grads[name][idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)


class TestTasks:
    def test_deterministic(self):
        a, b = gen_tasks(5, 0.4), gen_tasks(5, 0.4)
        for sa, sb in zip(a.tasks, b.tasks):
            for split in ("train", "cal", "eval"):
                assert dataset_bytes(getattr(sa, split)) == dataset_bytes(getattr(sb, split))

    def test_default_sizes_and_unlabeled_calibration(self):
        b = gen_tasks(0)
        t = b.tasks[0]
        assert (len(t.train), len(t.cal), len(t.eval)) == (512, 64, 256)
        assert t.cal.labels is None
        assert t.train.inputs.shape == (512, 16)

    def test_similarity_one_shares_everything(self):
        b = gen_tasks(3, 1.0)
        r = b.taskset.rotations
        assert all(np.array_equal(r[0], ri) for ri in r)

    def test_invariants(self):
        for sim in (0.0, 0.5, 1.0):
            b = gen_tasks(7, sim)
            for r in b.taskset.rotations:
                np.testing.assert_allclose(r.T @ r, np.eye(16), atol=1e-6)
            mu = b.taskset.class_means
            gaps = [np.linalg.norm(mu[i] - mu[j]) for i, j in itertools.combinations(range(4), 2)]
            assert min(gaps) >= 2 * b.taskset.noise

    def test_balanced_splits(self):
        b = gen_tasks(1)
        for ds in b.split("eval") + b.split("train"):
            assert np.all(np.bincount(ds.labels, minlength=4) == len(ds) // 4)

    def test_independent_rotations_are_far_apart(self):
        # regression: mean over 20 seeds of the mean pairwise rotation angle at similarity 0
        vals = []
        for s in range(20):
            r = gen_tasks(s, 0.0).taskset.rotations
            vals.append(np.mean([rotation_angles(r[i], r[j]).mean() for i, j in itertools.combinations(range(3), 2)]))
        assert np.mean(vals) >= 1.0
        assert np.mean(vals) == pytest.approx(1.5837538037555334, abs=1e-9)

    def test_similarity_orders_distance(self):
        b_lo, b_hi = gen_tasks(2, 0.2), gen_tasks(2, 0.8)
        lo = rotation_angles(b_lo.taskset.rotations[0], b_lo.taskset.rotations[1]).mean()
        hi = rotation_angles(b_hi.taskset.rotations[0], b_hi.taskset.rotations[1]).mean()
        assert hi < lo

    def test_invalid_similarity(self):
        with pytest.raises(ValidationError):
            gen_tasks(0, 1.5)

    def test_dataset_file_roundtrip(self, tmp_path):
        b = gen_tasks(0)
        for ds in (b.tasks[1].train, b.tasks[1].cal):
            write_dataset(ds, tmp_path / "d.mrgf")
            assert read_dataset(tmp_path / "d.mrgf") == ds

    def test_union(self):
        b = gen_tasks(0)
        d = b.tasks[0].train
        u = union([d, d], seed=1)
        assert len(u) == 2 * len(d)
        both = np.vstack([d.inputs, d.inputs])
        assert sorted(map(tuple, u.inputs)) == sorted(map(tuple, both))


class TestTraining:
    def test_base(self, testbed):
        base = testbed["base"]
        again = init_base(42, testbed["bundle"].split("train"))
        assert checkpoint_bytes(base) == checkpoint_bytes(again)
        assert base.kind == "base"
        m = base.manifest
        assert [e.shape for e in m.entries] == [(32, 16), (32,), (32, 32), (32,), (32, 32), (32,), (32, 32), (32,),
                                                (4, 32), (4,)]
        mean = evaluate(base, testbed["bundle"].split("eval")).mean_accuracy
        assert mean > 0.25 - 0.05
        assert mean == pytest.approx(0.81640625)

    def test_zero_steps_unchanged(self, testbed):
        base = testbed["base"]
        out = train(base, testbed["bundle"].tasks[0].train, steps=0, seed=1)
        for k, t in base.tensors.items():
            assert out.tensors[k].tobytes() == t.tobytes()

    def test_expert_task0(self, testbed):
        base, expert = testbed["base"], testbed["experts"][0]
        d = testbed["bundle"].tasks[0]
        before, _ = mlp.cross_entropy(mlp.params_of(base), base.manifest, d.train.inputs, d.train.labels)
        after, _ = mlp.cross_entropy(mlp.params_of(expert), expert.manifest, d.train.inputs, d.train.labels)
        acc = accuracy(expert, d.eval)
        assert after < before
        assert acc >= 0.9
        assert (before, after, acc) == pytest.approx((0.5126616149653614, 0.00909487286665776, 0.98046875))
        assert expert.kind == "expert" and expert.source_tag == "task0"

    def test_lowrank_starts_at_base(self, testbed):
        base = testbed["base"]
        out = train(base, testbed["bundle"].tasks[0].train, steps=0, mode="lowrank", seed=1)
        tv = compute_task_vector(base, out)
        assert all(not np.any(d) for d in tv.deltas.values())
        assert out.manifest.has_lowrank

    def test_lowrank_freezes_dense(self, testbed):
        base = testbed["base"]
        out = train(base, testbed["bundle"].tasks[0].train, steps=20, mode="lowrank", seed=1)
        for e in base.manifest.entries:
            if e.role in ("weight", "head_weight"):
                assert out.tensors[e.name].tobytes() == base.tensors[e.name].tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, testbed):
        with pytest.raises(TrainingError, match="step"):
            train(testbed["base"], testbed["bundle"].tasks[0].train, steps=50, lr=1e6, seed=0)

    def test_joint(self, testbed):
        again = train_joint(testbed["base"], testbed["bundle"].split("train"), seed=42)
        assert again == testbed["joint"]
        assert again.kind == "joint"

    def test_joint_similarity_zero(self):
        b = gen_tasks(42, 0.0)
        base = init_base(42, b.split("train"))
        joint = train_joint(base, b.split("train"), seed=42)
        mean = evaluate(joint, b.split("eval")).mean_accuracy
        assert mean >= 0.7
        assert mean == pytest.approx(0.8958333333333334)

    def test_joint_ordered_ablation(self, testbed):
        out = train_joint(testbed["base"], testbed["bundle"].split("train"), steps=30, seed=1, ordered=True)
        assert out.kind == "joint" and out != testbed["joint"]


class TestEvaluate:
    def test_constant_model(self):
        m = mlp.build_manifest()
        zero = Checkpoint(m, {e.name: np.zeros(e.shape) for e in m.entries})
        for ds in gen_tasks(0).split("eval"):
            assert accuracy(zero, ds) == 0.25

    def test_expert_report_matches_training_record(self, testbed):
        rep = evaluate(testbed["experts"][0], testbed["bundle"].split("eval"))
        assert rep.accuracy["task0"] >= 0.98046875 - 0.02

    def test_merged_equal_to_expert(self, testbed):
        e = testbed["experts"][1]
        merged = apply_recipe(MergeRecipe("average", seed=0), testbed["base"], [e, e, e]).checkpoint
        evs = testbed["bundle"].split("eval")
        assert evaluate(merged, evs, tag="x").to_csv() == evaluate(e, evs, tag="x").to_csv()

    def test_retention(self, testbed):
        evs = testbed["bundle"].split("eval")
        rep = evaluate(testbed["joint"], evs, {"task0": 0.5, "task1": 0.0})
        assert rep.retention["task0"] == pytest.approx(rep.accuracy["task0"] / 0.5)
        assert "task1" not in rep.retention and "task2" not in rep.retention

    def test_pure(self, testbed):
        evs = testbed["bundle"].split("eval")
        assert evaluate(testbed["joint"], evs).to_csv() == evaluate(testbed["joint"], evs).to_csv()


def test_lowrank_experts_are_less_aligned_than_full():
    b = gen_tasks(42, 0.0)
    base = init_base(42, b.split("train"))

    def mean_angle(mode):
        e1, e2 = (train(base, d, seed=42, mode=mode) for d in b.split("train")[:2])
        t1, t2 = compute_task_vector(base, e1), compute_task_vector(base, e2)
        return float(np.mean([subspace_angles(t1.deltas[n], t2.deltas[n], 2).mean()
                              for n in t1.deltas if t1.deltas[n].ndim == 2]))

    full, low = mean_angle("full"), mean_angle("lowrank")
    assert low > full
    assert (full, low) == pytest.approx((1.1498320043871884, 1.3724022667530646))


class TestSuite:
    def test_no_recipes(self, testbed):
        res = run_suite(42, 0.3, [], bundle=testbed["bundle"])
        assert [r.model_tag for r in res.reports] == ["expert_task0", "expert_task1", "expert_task2", "joint"]
        assert len(res.csv().splitlines()) == 5

    def test_failing_row_identified(self, testbed):
        with pytest.raises(Exception, match="suite row 'cabs'"):
            run_suite(42, 0.3, [MergeRecipe("average", seed=0), MergeRecipe("cabs", params={"n": 2}, seed=0)],
                      bundle=testbed["bundle"], steps=5)

    def test_outputs(self, tmp_path, testbed):
        res = run_suite(42, 0.3, [MergeRecipe("ties", seed=42)], bundle=testbed["bundle"], out_dir=tmp_path,
                        steps=20)
        assert (tmp_path / "suite.csv").read_text() == res.csv()
        assert (tmp_path / "suite.md").read_text().startswith("| model |")
        names = sorted(p.name for p in (tmp_path / "models").iterdir())
        assert names == ["00_ties.mrgf", "base.mrgf", "expert_task0.mrgf", "expert_task1.mrgf",
                         "expert_task2.mrgf", "joint.mrgf"]
