"""Data-dependent merges: AdaMerging, RegMean++ and CAT Merging.

All three read unlabeled calibration inputs and run them through the
testbed MLP's forward semantics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import InvalidDistributionError, RankError, RecipeError, SingularMatrixError, ValidationError
from .merge.dispatch import Group, assemble, make_groups, recipe_tag, task_vectors
from .merge.recipe import MergedModel, MergeRecipe
from .taskvec import TaskVector, dense_weights
from .tensor import numerical_rank, solve_spd, svd
from .testbed import mlp
from .testbed.tasks import Dataset, read_dataset

log = logging.getLogger(__name__)

MIN_CALIBRATION = 8


@dataclass(eq=False)
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    source_tag: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValidationError("calibration inputs must be a matrix")
        if len(self.inputs) < MIN_CALIBRATION:
            raise RecipeError(f"calibration set {self.source_tag!r} has {len(self.inputs)} rows, "
                              f"need at least {MIN_CALIBRATION}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValidationError("calibration inputs contain non-finite values")

    @classmethod
    def from_dataset(cls, ds: Dataset, seed: int | None = None) -> "CalibrationSet":
        return cls(ds.inputs, ds.labels, f"{ds.task_id}/{ds.split}", seed)

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        return cls.from_dataset(read_dataset(path))


@dataclass
class ActivationStats:
    """Per-depth Gram matrices and principal input directions of one model."""

    grams: dict[int, np.ndarray] = field(default_factory=dict)
    bases: dict[int, np.ndarray] = field(default_factory=dict)
    count: int = 0


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidDistributionError(f"not a probability vector: {p}")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _check_dims(model: Checkpoint, cal: CalibrationSet) -> None:
    want = model.manifest.weight_at(1).shape[1]
    if cal.inputs.shape[1] != want:
        raise ValidationError(f"calibration inputs have {cal.inputs.shape[1]} columns, model expects {want}")


def capture_activations(model: Checkpoint, cal: CalibrationSet, r: int = 2) -> ActivationStats:
    _check_dims(model, cal)
    cache = mlp.forward(mlp.params_of(model), model.manifest, cal.inputs)
    stats = ActivationStats(count=len(cal.inputs))
    for depth, x in enumerate(cache.inputs, start=1):
        stats.grams[depth] = x.T @ x
        dec = svd(x)
        keep = min(r, numerical_rank(dec.s))
        stats.bases[depth] = dec.v[:, :keep]
    return stats


# -- RegMean++ -------------------------------------------------------------


def regmean_merge(base: Checkpoint, experts: Sequence[Checkpoint], cals: Sequence[CalibrationSet],
                  rho: float = 0.9, alpha: Sequence[float] | None = None,
                  recipe: MergeRecipe | None = None) -> MergedModel:
    """Closed-form activation-matching merge, layer by layer.

    Each expert's calibration inputs are pushed through the layers merged so
    far before its Gram matrix for the next layer is formed.
    """
    n = len(experts)
    if len(cals) == 1 and n > 1:
        cals = list(cals) * n
    if len(cals) != n:
        raise RecipeError(f"{len(cals)} calibration sets for {n} experts")
    alpha = np.full(n, 1.0 / n) if alpha is None else np.asarray(alpha, dtype=np.float64)
    manifest = base.manifest.dense()
    base_p = dense_weights(base)
    tvs = [_dense_delta(base_p, e) for e in experts]
    for c in cals:
        _check_dims(base, c)
    xs = [c.inputs for c in cals]
    delta: dict[str, np.ndarray] = {}
    merged = dict(base_p)
    ls = mlp.layers(manifest)
    for idx, layer in enumerate(ls):
        total_g = np.zeros((xs[0].shape[1],) * 2)
        rhs = np.zeros((xs[0].shape[1], base_p[layer.weight].shape[0]))
        for x, tv in zip(xs, tvs):
            g = x.T @ x
            d = np.diag(np.diag(g))
            g_hat = d + rho * (g - d)
            total_g += g_hat
            rhs += g_hat @ tv[layer.weight].T
        try:
            dw = solve_spd(total_g, rhs, name=layer.weight).T
        except SingularMatrixError as exc:
            log.warning("regmean: %s; falling back to weighted averaging for %s", exc, layer.weight)
            dw = sum(a * tv[layer.weight] for a, tv in zip(alpha, tvs))
        delta[layer.weight] = dw
        delta[layer.bias] = sum(a * tv[layer.bias] for a, tv in zip(alpha, tvs))
        merged[layer.weight] = base_p[layer.weight] + dw
        merged[layer.bias] = base_p[layer.bias] + delta[layer.bias]
        if idx < len(ls) - 1:
            w, b = merged[layer.weight], merged[layer.bias]
            xs = [np.maximum(x @ w.T + b, 0.0) for x in xs]
    recipe = recipe or MergeRecipe("regmean", "matrix", list(alpha), 1.0, {"rho": rho})
    return MergedModel(assemble(base, delta, recipe.lam, recipe_tag(recipe)), recipe)


def _dense_delta(base_p: dict, expert: Checkpoint) -> dict[str, np.ndarray]:
    ep = dense_weights(expert)
    return {k: ep[k] - base_p[k] for k in base_p}


# -- AdaMerging ------------------------------------------------------------


@dataclass
class AdaMergingResult:
    coefficients: np.ndarray  # (n_experts, n_groups)
    groups: list[Group]
    trace: list[float]
    merged: MergedModel


def _merged_params(base_p, tvs: Sequence[TaskVector], groups: Sequence[Group], lam: np.ndarray):
    params = {k: v.copy() for k, v in base_p.items()}
    for g_idx, group in enumerate(groups):
        for name in group.names:
            for i, tv in enumerate(tvs):
                params[name] = params[name] + lam[i, g_idx] * tv.deltas[name]
    return params


def adamerging_gradient(base_p, manifest, tvs, groups, lam, x, method: str = "backprop"):
    """Mean prediction entropy and its gradient w.r.t. the coefficient table."""
    if method == "backprop":
        value, grads = mlp.mean_entropy(_merged_params(base_p, tvs, groups, lam), manifest, x)
        out = np.zeros_like(lam)
        for g_idx, group in enumerate(groups):
            for i, tv in enumerate(tvs):
                out[i, g_idx] = sum(float(np.vdot(grads[name], tv.deltas[name])) for name in group.names)
        return value, out
    if method == "fd":
        h = 1e-4
        value = _entropy_at(base_p, manifest, tvs, groups, lam, x)
        out = np.zeros_like(lam)
        for idx in np.ndindex(lam.shape):
            up, down = lam.copy(), lam.copy()
            up[idx] += h
            down[idx] -= h
            out[idx] = (_entropy_at(base_p, manifest, tvs, groups, up, x)
                        - _entropy_at(base_p, manifest, tvs, groups, down, x)) / (2 * h)
        return value, out
    raise ValueError(f"unknown gradient method {method!r}")


def _entropy_at(base_p, manifest, tvs, groups, lam, x) -> float:
    p = mlp.softmax(mlp.logits(_merged_params(base_p, tvs, groups, lam), manifest, x))
    return float(np.mean(mlp.entropy_rows(p)))


def adamerging_optimize(base: Checkpoint, experts: Sequence[Checkpoint], cal: CalibrationSet,
                        iters: int = 200, step: float = 0.05, init: float = 0.3,
                        granularity: str = "layer", recipe: MergeRecipe | None = None,
                        gradient: str = "backprop", max_halvings: int = 10) -> AdaMergingResult:
    """Learn per-(expert, group) coefficients by minimizing mean output entropy.

    Projected gradient descent on [0, 1]; a step that would raise the
    objective is halved until it does not, so the trace is non-increasing.
    """
    _check_dims(base, cal)
    normalize = recipe.normalize if recipe else False
    tvs = task_vectors(base, experts, normalize)
    manifest = base.manifest.dense()
    groups = make_groups(manifest, granularity)
    base_p = dense_weights(base)
    x = cal.inputs
    lam = np.full((len(experts), len(groups)), float(init))
    value, grad = adamerging_gradient(base_p, manifest, tvs, groups, lam, x, gradient)
    trace = [value]
    lr = step
    for _ in range(iters):
        if not np.any(grad):
            break
        for _halving in range(max_halvings + 1):
            cand = np.clip(lam - lr * grad, 0.0, 1.0)
            cand_value = _entropy_at(base_p, manifest, tvs, groups, cand, x)
            if cand_value <= value:
                break
            lr *= 0.5
        else:
            break
        if np.array_equal(cand, lam):
            break
        lam = cand
        value, grad = adamerging_gradient(base_p, manifest, tvs, groups, lam, x, gradient)
        trace.append(value)
    recipe = recipe or MergeRecipe("adamerging", granularity, None, 1.0,
                                   {"iters": iters, "step": step, "init": init})
    delta = {}
    for g_idx, group in enumerate(groups):
        for name in group.names:
            delta[name] = sum(lam[i, g_idx] * tv.deltas[name] for i, tv in enumerate(tvs))
    coefficients = {group.key: [float(c) for c in lam[:, g]] for g, group in enumerate(groups)}
    merged = MergedModel(assemble(base, delta, recipe.lam, recipe_tag(recipe)), recipe, coefficients)
    return AdaMergingResult(lam, groups, trace, merged)


# -- CAT Merging -----------------------------------------------------------


def removal_basis(grams: Sequence[np.ndarray], r: int) -> np.ndarray:
    """Top-r principal directions of the pooled activations behind ``grams``."""
    if not grams:
        return np.zeros((0, 0))
    pooled = np.sum(grams, axis=0)
    dec = svd(pooled)
    keep = min(r, numerical_rank(dec.s))
    return dec.v[:, :keep]


def cat_projections(manifest, tvs: Sequence[TaskVector], stats: Sequence[ActivationStats],
                    r: int = 2) -> list[tuple[dict[str, np.ndarray], dict[int, np.ndarray]]]:
    """Per expert: weight deltas with the other experts' top-r input directions
    projected out, and the removal basis used at every depth."""
    n = len(tvs)
    if len(stats) != n:
        raise RecipeError(f"{len(stats)} activation summaries for {n} experts")
    out = []
    for k, tv in enumerate(tvs):
        projected, bases = {}, {}
        for layer in mlp.layers(manifest):
            in_dim = manifest.entry(layer.weight).shape[1]
            if r >= in_dim:
                raise RankError(f"cat rank {r} must be below input dimension {in_dim} of {layer.weight}")
            basis = removal_basis([stats[j].grams[layer.depth] for j in range(n) if j != k], r)
            t = tv.deltas[layer.weight]
            projected[layer.weight] = project_out(t, basis) if basis.size else t
            bases[layer.depth] = basis
        out.append((projected, bases))
    return out


def cat_merge(base: Checkpoint, experts: Sequence[Checkpoint], stats: Sequence[ActivationStats],
              r: int = 2, alpha: Sequence[float] | None = None,
              recipe: MergeRecipe | None = None) -> MergedModel:
    """Project each task matrix off the principal input directions of the other experts."""
    n = len(experts)
    alpha = np.full(n, 1.0 / n) if alpha is None else np.asarray(alpha, dtype=np.float64)
    normalize = recipe.normalize if recipe else False
    tvs = task_vectors(base, experts, normalize)
    manifest = base.manifest.dense()
    delta = {k: np.zeros(v.shape) for k, v in tvs[0].deltas.items()}
    for a, tv, (projected, _) in zip(alpha, tvs, cat_projections(manifest, tvs, stats, r)):
        for layer in mlp.layers(manifest):
            delta[layer.weight] += a * projected[layer.weight]
            delta[layer.bias] += a * tv.deltas[layer.bias]
    recipe = recipe or MergeRecipe("cat", "matrix", list(alpha), 1.0, {"r": r})
    return MergedModel(assemble(base, delta, recipe.lam, recipe_tag(recipe)), recipe)


def project_out(t: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return t - (t @ basis) @ basis.T


# -- recipe entry point ----------------------------------------------------


def apply_calibration_recipe(recipe: MergeRecipe, base: Checkpoint, experts: Sequence[Checkpoint],
                             calibration) -> MergedModel:
    if not calibration:
        raise RecipeError(f"{recipe.method} needs calibration data")
    cals = [c if isinstance(c, CalibrationSet) else CalibrationSet.load(c) for c in calibration]
    p = recipe.params
    if recipe.method == "regmean":
        if recipe.normalize:
            raise RecipeError("regmean does not support task-vector normalization")
        return regmean_merge(base, experts, cals, p["rho"], recipe.weights, recipe)
    if recipe.method == "adamerging":
        pooled = cals[0] if len(cals) == 1 else CalibrationSet(
            np.concatenate([c.inputs for c in cals]), None, "+".join(c.source_tag for c in cals))
        return adamerging_optimize(base, experts, pooled, p["iters"], p["step"], p["init"],
                                   recipe.granularity, recipe).merged
    if recipe.method == "cat":
        if len(cals) == 1 and len(experts) > 1:
            cals = cals * len(experts)
        if len(cals) != len(experts):
            raise RecipeError(f"{len(cals)} calibration sets for {len(experts)} experts")
        stats = [capture_activations(e, c, p["r"]) for e, c in zip(experts, cals)]
        return cat_merge(base, experts, stats, p["r"], recipe.weights, recipe)
    raise RecipeError(f"{recipe.method} is not a calibration method")
