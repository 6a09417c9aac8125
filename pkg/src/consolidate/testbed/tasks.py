"""Synthetic rotated-Gaussian classification tasks.

Every task shares one set of class means; task ``t`` observes them through
its own rotation ``R_t``. The similarity knob interpolates each rotation
between a shared reference (similarity 1) and an independent random
rotation (similarity 0) along the geodesic in SO(d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from ..checkpoint import atomic_write_bytes, decode, encode
from ..errors import ValidationError
from ..tensor import rng


@dataclass
class SyntheticTaskSet:
    rotations: list[np.ndarray]
    class_means: np.ndarray
    noise: float
    similarity: float
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.rotations)

    @property
    def input_dim(self) -> int:
        return self.class_means.shape[1]

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None
    task_id: str
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ValidationError(f"{self.task_id}: {self.labels.shape[0]} labels for {self.inputs.shape[0]} rows")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.task_id == other.task_id and self.split == other.split
                and self.inputs.tobytes() == other.inputs.tobytes() and same_labels)


@dataclass
class TaskSplits:
    train: Dataset
    cal: Dataset
    eval: Dataset


@dataclass
class TaskBundle:
    taskset: SyntheticTaskSet
    tasks: list[TaskSplits] = field(default_factory=list)

    def split(self, name: str) -> list[Dataset]:
        return [getattr(t, name) for t in self.tasks]


def random_rotation(g: np.random.Generator, d: int) -> np.ndarray:
    """Haar-distributed rotation with determinant +1."""
    q, r = np.linalg.qr(g.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def geodesic(r0: np.ndarray, r1: np.ndarray, frac: float) -> np.ndarray:
    """Point ``frac`` of the way from r0 to r1 along the SO(d) geodesic."""
    if frac == 0.0:
        return r0.copy()
    log = scipy.linalg.logm(r0.T @ r1)
    log = np.real(log)
    log = 0.5 * (log - log.T)
    out = r0 @ scipy.linalg.expm(frac * log)
    # re-orthonormalize away expm roundoff
    u, _, vt = np.linalg.svd(out)
    return u @ vt


def rotation_angles(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Rotation angles in [0, pi] of the relative rotation r1^T r2."""
    eig = np.linalg.eigvals(r1.T @ r2)
    return np.sort(np.abs(np.angle(eig)))


def _balanced_labels(g: np.random.Generator, n: int, k: int) -> np.ndarray:
    if n % k:
        raise ValidationError(f"split size {n} is not a multiple of {k} classes")
    return g.permutation(np.repeat(np.arange(k), n // k))


def gen_tasks(
    seed: int,
    similarity: float = 0.0,
    n_tasks: int = 3,
    input_dim: int = 16,
    n_classes: int = 4,
    noise: float = 0.35,
    n_train: int = 512,
    n_cal: int = 64,
    n_eval: int = 256,
    mean_scale: float = 0.4,
) -> TaskBundle:
    if not 0.0 <= similarity <= 1.0:
        raise ValidationError(f"similarity must lie in [0, 1], got {similarity}")
    g = rng(seed, "class-means")
    for _ in range(1000):
        means = mean_scale * g.standard_normal((n_classes, input_dim))
        gaps = [np.linalg.norm(means[a] - means[b]) for a in range(n_classes) for b in range(a)]
        if min(gaps, default=np.inf) >= 2 * noise:
            break
    else:
        raise ValidationError("could not place class means 2*noise apart")
    reference = random_rotation(rng(seed, "rotation", "reference"), input_dim)
    rotations = []
    for t in range(n_tasks):
        own = random_rotation(rng(seed, "rotation", t), input_dim)
        rotations.append(reference.copy() if similarity == 1.0 else geodesic(reference, own, 1.0 - similarity))
    taskset = SyntheticTaskSet(rotations, means, noise, similarity, seed)
    bundle = TaskBundle(taskset)
    for t, rot in enumerate(rotations):
        splits = {}
        for split, n in (("train", n_train), ("cal", n_cal), ("eval", n_eval)):
            gs = rng(seed, "samples", t, split)
            labels = _balanced_labels(gs, n, n_classes)
            x = means[labels] + noise * gs.standard_normal((n, input_dim))
            x = x @ rot.T
            splits[split] = Dataset(x, labels if split != "cal" else None, f"task{t}", split)
        bundle.tasks.append(TaskSplits(**splits))
    return bundle


def union(datasets: list[Dataset], seed: int, ordered: bool = False) -> Dataset:
    """Concatenate labelled datasets; shuffled with a seeded permutation unless ``ordered``."""
    x = np.concatenate([d.inputs for d in datasets])
    y = np.concatenate([d.labels for d in datasets])
    if not ordered:
        perm = rng(seed, "union").permutation(len(y))
        x, y = x[perm], y[perm]
    return Dataset(x, y, "+".join(d.task_id for d in datasets), "train")


# -- file format -----------------------------------------------------------


def dataset_bytes(ds: Dataset) -> bytes:
    entries = [{"name": "inputs", "shape": list(ds.inputs.shape), "role": "inputs"}]
    arrays = [("inputs", ds.inputs)]
    if ds.labels is not None:
        entries.append({"name": "labels", "shape": [len(ds.labels)], "role": "labels"})
        arrays.append(("labels", ds.labels.astype(np.float32)))
    header = {"manifest": {"entries": entries}, "kind": "dataset", "source_tag": f"{ds.task_id}/{ds.split}"}
    return encode(header, arrays)


def write_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_bytes(ds))


def _dataset_shapes(header: dict) -> dict:
    if header.get("kind") != "dataset":
        raise ValidationError(f"not a dataset file (kind={header.get('kind')!r})")
    try:
        entries = header["manifest"]["entries"]
        shapes = {e["name"]: tuple(int(d) for d in e["shape"]) for e in entries}
        roles = {e["name"]: e["role"] for e in entries}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed dataset manifest: {exc}") from None
    if roles.get("inputs") != "inputs" or set(roles.values()) - {"inputs", "labels"}:
        raise ValidationError("dataset manifest needs an inputs entry and only inputs/labels roles")
    return shapes


def read_dataset(path) -> Dataset:
    header, tensors = decode(Path(path).read_bytes(), _dataset_shapes)
    task_id, _, split = str(header.get("source_tag", "")).partition("/")
    labels = tensors.get("labels")
    return Dataset(tensors["inputs"], None if labels is None else labels.astype(np.int64), task_id, split or "train")
