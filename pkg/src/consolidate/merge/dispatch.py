"""Granularity dispatch: split tensors into groups, run a kernel per group,
reassemble, and add the merged delta back onto the base."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..checkpoint import Checkpoint, Manifest, validate_compatible
from ..errors import RecipeError, ValidationError
from ..taskvec import TaskVector, compute_task_vector, dense_weights, normalize_task_vectors
from ..tensor import rng
from . import operators as ops
from .recipe import MergedModel, MergeRecipe


def thread_count() -> int:
    raw = os.environ.get("CONSOLIDATE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"CONSOLIDATE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"CONSOLIDATE_THREADS must be a positive integer, got {raw!r}")
    return n


@dataclass(frozen=True)
class Group:
    key: str
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    depths: tuple[int, ...]

    @property
    def is_single(self) -> bool:
        return len(self.names) == 1

    def pack(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        if self.is_single:
            return np.asarray(arrays[self.names[0]], dtype=np.float64)
        return np.concatenate([np.asarray(arrays[n], dtype=np.float64).ravel() for n in self.names])

    def unpack(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        if self.is_single:
            return {self.names[0]: vec.reshape(self.shapes[0])}
        out, pos = {}, 0
        for name, shape in zip(self.names, self.shapes):
            size = int(np.prod(shape))
            out[name] = vec[pos:pos + size].reshape(shape)
            pos += size
        return out

    def depth_map(self) -> np.ndarray:
        """Per-element depth of the packed vector."""
        if self.is_single:
            return np.full(self.shapes[0], self.depths[0])
        return np.concatenate([np.full(int(np.prod(s)), d) for s, d in zip(self.shapes, self.depths)])


def make_groups(manifest: Manifest, granularity: str) -> list[Group]:
    entries = [e for e in manifest.entries if e.role not in ("lowrank_a", "lowrank_b")]

    def group(key, es):
        return Group(key, tuple(e.name for e in es), tuple(e.shape for e in es), tuple(e.depth for e in es))

    if granularity == "model":
        return [group("model", entries)]
    if granularity == "layer":
        depths = sorted({e.depth for e in entries})
        return [group(f"layer{d}", [e for e in entries if e.depth == d]) for d in depths]
    if granularity == "matrix":
        return [group(e.name, [e]) for e in entries]
    raise RecipeError(f"unknown granularity {granularity!r}")


@dataclass
class GroupContext:
    recipe: MergeRecipe
    group: Group
    alpha: np.ndarray
    model_norms: list[float]
    layer_count: int

    @property
    def params(self) -> dict:
        return self.recipe.params

    def rng(self, expert: int) -> np.random.Generator:
        return rng(self.recipe.seed, self.recipe.method, expert, self.group.key)


def _matrix_or_average(fn: Callable):
    # SVD-based kernels are matrix-only; vectors fall back to weighted averaging
    def run(ts, ctx):
        if ts[0].ndim != 2:
            return ops.weighted_sum(ts, ctx.alpha)
        return fn(ts, ctx)
    return run


def _lines(ts, ctx):
    gammas = ops.lines_gammas(ctx.layer_count, ctx.params["alpha0"], ctx.params["beta0"])
    return ops.weighted_sum(ts, ctx.alpha) * gammas[ctx.group.depth_map() - 1]


def _metagpt(ts, ctx):
    coef = ops.metagpt_coefficients(ts)
    return ops.weighted_sum(ts, coef), coef


def _sce(ts, ctx):
    return ops.sce_merge(ts, ctx.params["p"])


def _cabs(ts, ctx):
    norms = ctx.model_norms
    priority = sorted(range(len(ts)), key=lambda i: (-norms[i], i))
    return ops.cabs_merge(ts, priority, ctx.params["n"], ctx.params["m"])


DELTA_KERNELS: dict[str, Callable] = {
    "metagpt": _metagpt,
    "lines": _lines,
    "dare": lambda ts, ctx: ops.weighted_sum(
        [ops.dare_sparsify(t, ctx.params["p"], ctx.rng(i)) for i, t in enumerate(ts)], ctx.alpha),
    "breadcrumbs": lambda ts, ctx: ops.weighted_sum(
        [ops.breadcrumbs_mask(t, ctx.params["beta"], ctx.params["gamma"]) for t in ts], ctx.alpha),
    "ties": lambda ts, ctx: ops.ties_merge(ts, ctx.params["k"]),
    "consensus_ta": lambda ts, ctx: ops.consensus_ta(
        ts, ctx.alpha, ctx.params["lambda_mask"], ctx.params["min_support"]),
    "tsv": _matrix_or_average(lambda ts, ctx: ops.tsv_merge(ts, ctx.params["rank"])),
    "iso_cts": _matrix_or_average(lambda ts, ctx: ops.iso_cts_merge(ts, ctx.params["rank"])),
    "impart": _matrix_or_average(lambda ts, ctx: ops.impart_merge(ts, ctx.alpha, ctx.params["tau"])),
    "tadrop": lambda ts, ctx: ops.weighted_sum([ops.tadrop_sparsify(t, ctx.params["rho"]) for t in ts], ctx.alpha),
    "cabs": _cabs,
    "pcb": lambda ts, ctx: ops.pcb_merge(ts, ctx.params["r"]),
    "della": lambda ts, ctx: ops.della_merge(
        ts, ctx.params["p_min"], ctx.params["p_max"], [ctx.rng(i) for i in range(len(ts))]),
    "sce": _sce,
    "wudi": _matrix_or_average(lambda ts, ctx: ops.wudi_merge(ts, ctx.params["iters"], ctx.params["step"])[0]),
}


def _pmap(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def task_vectors(base: Checkpoint, experts: Sequence[Checkpoint], normalize) -> list[TaskVector]:
    tvs = [compute_task_vector(base, e) for e in experts]
    if normalize:
        tvs = normalize_task_vectors(tvs, normalize)
    return tvs


def assemble(base: Checkpoint, delta: dict[str, np.ndarray], lam: float, tag: str) -> Checkpoint:
    manifest = base.manifest.dense()
    tensors = {}
    for e in manifest.entries:
        d = delta[e.name]
        tensors[e.name] = (base.tensors[e.name].astype(np.float64) + lam * d).astype(np.float32)
    merged = Checkpoint(manifest, tensors, "merged", tag)
    merged.validate()
    return merged


def recipe_tag(recipe: MergeRecipe) -> str:
    return f"{recipe.method}@{recipe.granularity}"


def apply_recipe(recipe: MergeRecipe, base: Checkpoint, experts: Sequence[Checkpoint],
                 calibration=None, threads: int | None = None) -> MergedModel:
    """Merge ``experts`` into ``base`` as described by ``recipe``.

    ``calibration`` is a list of calibration sets (one per expert, or a single
    shared one) and is required by the data-dependent methods.
    """
    recipe = recipe.resolved(len(experts))
    validate_compatible(base, experts)
    threads = thread_count() if threads is None else threads
    info = recipe.info
    if info.kind == "calibration":
        from .. import calibration as calib
        return calib.apply_calibration_recipe(recipe, base, experts, calibration)

    manifest = base.manifest.dense()
    groups = make_groups(manifest, recipe.granularity)
    alpha = np.asarray(recipe.weights)
    tvs = task_vectors(base, experts, recipe.normalize)
    coefficients: dict[str, list[float]] = {}

    if info.kind == "param":
        base_params = dense_weights(base)
        if recipe.normalize:
            thetas = [{k: base_params[k] + tv.deltas[k] for k in tv.deltas} for tv in tvs]
        else:
            thetas = [dense_weights(e) for e in experts]

        def run(group: Group) -> dict[str, np.ndarray]:
            packed = [group.pack(th) for th in thetas]
            if recipe.method == "average":
                merged = ops.linear_average(packed, alpha)
            else:
                merged = ops.slerp_many(packed, recipe.params["t"])
            return group.unpack(merged)

        tensors = {}
        for part in _pmap(run, groups, threads):
            tensors.update(part)
        ckpt = Checkpoint(manifest, {k: v.astype(np.float32) for k, v in tensors.items()},
                          "merged", recipe_tag(recipe))
        ckpt.validate()
        return MergedModel(ckpt, recipe)

    kernel = DELTA_KERNELS[recipe.method]
    norms = [tv.model_norm() for tv in tvs]

    def run(group: Group):
        ctx = GroupContext(recipe, group, alpha, norms, manifest.layer_count)
        out = kernel([group.pack(tv.deltas) for tv in tvs], ctx)
        coef = None
        if isinstance(out, tuple):
            out, coef = out
        return group.unpack(np.asarray(out, dtype=np.float64)), coef

    delta = {}
    for group, (part, coef) in zip(groups, _pmap(run, groups, threads)):
        delta.update(part)
        if coef is not None:
            coefficients[group.key] = [float(c) for c in coef]
    ckpt = assemble(base, delta, recipe.lam, recipe_tag(recipe))
    return MergedModel(ckpt, recipe, coefficients or None)
