"""Task vectors (expert minus base) and their diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, Manifest, atomic_write_bytes, validate_compatible
from .errors import RankError, ShapeError
from .tensor import frobenius_norm, numerical_rank, svd


@dataclass(eq=False)
class TaskVector:
    """Per-tensor float64 deltas over a dense manifest."""

    manifest: Manifest
    deltas: dict[str, np.ndarray]
    expert_tag: str = ""

    def model_norm(self) -> float:
        return float(np.sqrt(sum(frobenius_norm(d) ** 2 for d in self.deltas.values())))

    def scaled(self, factor: float) -> "TaskVector":
        return TaskVector(
            self.manifest,
            {k: v * factor for k, v in self.deltas.items()},
            self.expert_tag,
        )


def dense_weights(c: Checkpoint) -> dict[str, np.ndarray]:
    """Float64 dense parameters with any low-rank adapters folded in."""
    m = c.manifest
    out = {}
    for e in m.entries:
        if e.role in ("lowrank_a", "lowrank_b"):
            continue
        out[e.name] = c.tensors[e.name].astype(np.float64)
    if m.has_lowrank:
        for d in range(1, m.layer_count + 1):
            pair = m.lowrank_at(d)
            if pair is None:
                continue
            a, b = (c.tensors[p.name].astype(np.float64) for p in pair)
            scale = m.lowrank_alpha / a.shape[0]
            w = m.weight_at(d).name
            out[w] = out[w] + scale * (b @ a)
    return out


def _sub(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # float32 operands subtract exactly in float64
    return x.astype(np.float64) - y.astype(np.float64)


def compute_task_vector(base: Checkpoint, expert: Checkpoint) -> TaskVector:
    validate_compatible(base, [expert])
    manifest = base.manifest.dense()
    deltas = {}
    if expert.manifest.has_lowrank:
        m = expert.manifest
        for e in manifest.entries:
            deltas[e.name] = _sub(expert.tensors[e.name], base.tensors[e.name])
        for d in range(1, m.layer_count + 1):
            pair = m.lowrank_at(d)
            if pair is None:
                continue
            a, b = (expert.tensors[p.name].astype(np.float64) for p in pair)
            w = m.weight_at(d).name
            deltas[w] = deltas[w] + m.lowrank_alpha / a.shape[0] * (b @ a)
    else:
        for e in manifest.entries:
            deltas[e.name] = _sub(expert.tensors[e.name], base.tensors[e.name])
    return TaskVector(manifest, deltas, expert.source_tag)


def apply_task_vector(base: Checkpoint, tv: TaskVector, kind: str = "expert") -> Checkpoint:
    tensors = {
        e.name: (base.tensors[e.name].astype(np.float64) + tv.deltas[e.name]).astype(np.float32)
        for e in tv.manifest.entries
    }
    return Checkpoint(tv.manifest, tensors, kind, tv.expert_tag)


def _norms(tvs: Sequence[TaskVector], level: str) -> list[dict[str | None, float]]:
    if level == "model":
        return [{None: tv.model_norm()} for tv in tvs]
    if level == "matrix":
        return [{k: frobenius_norm(v) for k, v in tv.deltas.items()} for tv in tvs]
    raise ValueError(f"unknown normalization level {level!r}")


def normalize_task_vectors(tvs: Sequence[TaskVector], level: str = "model") -> list[TaskVector]:
    """Rescale each task vector to the median norm of the group.

    At ``level="model"`` one norm per task vector is used; at ``"matrix"``
    every tensor is normalized against the same tensor of the other experts.
    Zero norms take part in the median but are never rescaled.
    """
    norms = _norms(tvs, level)
    out = []
    for i, tv in enumerate(tvs):
        deltas = {}
        for name, d in tv.deltas.items():
            key = None if level == "model" else name
            target = float(np.median([n[key] for n in norms]))
            own = norms[i][key]
            if own == 0.0:
                deltas[name] = d.copy()
            else:
                deltas[name] = d * (target / own)
        out.append(TaskVector(tv.manifest, deltas, tv.expert_tag))
    return out


def layer_norm_profile(tvs: Sequence[TaskVector]) -> list[tuple[str, int, float]]:
    """Per (expert, depth) Frobenius norm of every delta at that depth."""
    rows = []
    for tv in tvs:
        by_depth: dict[int, float] = {}
        for e in tv.manifest.entries:
            by_depth[e.depth] = by_depth.get(e.depth, 0.0) + frobenius_norm(tv.deltas[e.name]) ** 2
        rows.extend((tv.expert_tag, d, float(np.sqrt(s))) for d, s in by_depth.items())
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def profile_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["expert", "depth", "norm"])
    for tag, depth, norm in rows:
        w.writerow([tag, depth, f"{norm:.6g}"])
    return buf.getvalue()


def write_profile(rows, path) -> None:
    atomic_write_bytes(path, profile_csv(rows).encode("utf-8"))


def subspace_angles(t1, t2, k: int) -> np.ndarray:
    """Principal angles (radians, ascending) between the top-k row spaces."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    if t1.ndim != 2 or t2.ndim != 2:
        raise ShapeError("subspace_angles needs matrices")
    if t1.shape[1] != t2.shape[1]:
        raise ShapeError(f"row spaces live in different dimensions ({t1.shape[1]} vs {t2.shape[1]})")
    r1, r2 = svd(t1), svd(t2)
    if k < 1 or k > numerical_rank(r1.s) or k > numerical_rank(r2.s):
        raise RankError(f"k={k} exceeds numerical rank ({numerical_rank(r1.s)}, {numerical_rank(r2.s)})")
    cos = svd(r1.v[:, :k].T @ r2.v[:, :k]).s
    return np.sort(np.arccos(np.clip(cos, 0.0, 1.0)))
