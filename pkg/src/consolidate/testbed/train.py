"""Base initialization, expert fine-tuning and joint (data-mixing) training."""

from __future__ import annotations

import numpy as np

from ..checkpoint import Checkpoint, Manifest
from ..errors import TrainingError, ValidationError
from ..tensor import gaussian, rng
from . import mlp
from .tasks import Dataset, union

BATCH = 32


def _batches(n: int, steps: int, g: np.random.Generator):
    # epoch-wise shuffles, continued across epochs
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(order) < BATCH:
            order = np.concatenate([order, g.permutation(n)])
        yield order[:BATCH]
        order = order[BATCH:]


def sgd(params, manifest: Manifest, data: Dataset, steps: int, lr: float, mode: str, g) -> list[float]:
    if data.labels is None:
        raise ValidationError(f"{data.task_id}: training needs labels")
    trainable = [k for k in params if _trainable(manifest, k, mode)]
    losses = []
    for step, idx in enumerate(_batches(len(data), steps, g)):
        loss, grads = mlp.cross_entropy(params, manifest, data.inputs[idx], data.labels[idx], mode)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}")
        for k in trainable:
            params[k] -= lr * grads[k]
        losses.append(loss)
    return losses


def _trainable(manifest: Manifest, name: str, mode: str) -> bool:
    role = manifest.entry(name).role
    if mode == "full":
        return role not in ("lowrank_a", "lowrank_b")
    return role not in ("weight", "head_weight")


def init_base(seed: int, datasets: list[Dataset], manifest: Manifest | None = None,
              steps: int = 100, lr: float = 0.05) -> Checkpoint:
    """Scaled-Gaussian init followed by a short pre-training on the task mixture."""
    if manifest is None:
        d = datasets[0].inputs.shape[1]
        k = int(max(ds.labels.max() for ds in datasets)) + 1
        manifest = mlp.build_manifest(input_dim=d, n_classes=k)
    params = {}
    for e in manifest.entries:
        if e.role in ("weight", "head_weight"):
            params[e.name] = gaussian(seed, e.shape, "init", e.name).astype(np.float64) * np.sqrt(2.0 / e.shape[1])
        else:
            params[e.name] = np.zeros(e.shape)
    if steps:
        mixture = union(datasets, seed)
        sgd(params, manifest, mixture, steps, lr, "full", rng(seed, "pretrain"))
    return Checkpoint(manifest, params, "base", "base")


def train(model: Checkpoint, dataset: Dataset, steps: int = 500, lr: float = 0.05, mode: str = "full",
          seed: int = 0, rank: int = 2, lora_alpha: float = 2.0, kind: str = "expert",
          tag: str | None = None) -> Checkpoint:
    """Mini-batch SGD on softmax cross-entropy.

    ``mode="lowrank"`` freezes dense weights and trains a zero-initialized
    (b, a) factor pair per weight, so training starts exactly at ``model``.
    """
    if mode not in ("full", "lowrank"):
        raise ValidationError(f"unknown training mode {mode!r}")
    manifest = model.manifest
    params = mlp.params_of(model)
    if mode == "lowrank" and not manifest.has_lowrank:
        manifest = mlp.with_lowrank(manifest, rank, lora_alpha)
        for e in manifest.entries:
            if e.role == "lowrank_a":
                a = gaussian(seed, e.shape, "lowrank", dataset.task_id, e.name).astype(np.float64)
                params[e.name] = a / np.sqrt(e.shape[1])
            elif e.role == "lowrank_b":
                params[e.name] = np.zeros(e.shape)
    if dataset.inputs.shape[1] != manifest.weight_at(1).shape[1]:
        raise ValidationError(f"dataset dim {dataset.inputs.shape[1]} != model input {manifest.weight_at(1).shape[1]}")
    sgd(params, manifest, dataset, steps, lr, mode, rng(seed, "train", dataset.task_id, mode))
    return Checkpoint(manifest, params, kind, dataset.task_id if tag is None else tag)


def train_joint(base: Checkpoint, datasets: list[Dataset], steps: int = 500, lr: float = 0.05,
                seed: int = 0, ordered: bool = False) -> Checkpoint:
    """Train on the union of all task datasets (the data-mixing baseline).

    ``ordered=True`` skips the shuffle and walks the tasks in sequence.
    """
    manifest = base.manifest
    params = mlp.params_of(base)
    if ordered:
        for idx, ds in enumerate(datasets):
            share = steps // len(datasets) + (1 if idx < steps % len(datasets) else 0)
            sgd(params, manifest, ds, share, lr, "full", rng(seed, "joint", idx))
    else:
        sgd(params, manifest, union(datasets, seed), steps, lr, "full", rng(seed, "joint"))
    return Checkpoint(manifest, params, "joint", "joint")
