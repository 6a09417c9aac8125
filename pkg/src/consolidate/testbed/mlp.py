"""The testbed MLP: manifest-driven forward and backward passes.

Layer ``l`` computes ``h = x @ W_l.T + b_l`` with ``W_l`` of shape
(out, in); hidden layers apply ReLU and the last (head) layer emits logits.
Low-rank layers use ``W_l + alpha / r * B_l @ A_l``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..checkpoint import Checkpoint, Entry, Manifest


@dataclass(frozen=True)
class Layer:
    depth: int
    weight: str
    bias: str
    lowrank: tuple[str, str] | None  # (a, b) names


def build_manifest(input_dim: int = 16, width: int = 32, hidden: int = 4, n_classes: int = 4) -> Manifest:
    entries = []
    fan_in = input_dim
    for d in range(1, hidden + 1):
        entries.append(Entry(f"fc{d}.weight", (width, fan_in), "weight", d))
        entries.append(Entry(f"fc{d}.bias", (width,), "bias", d))
        fan_in = width
    entries.append(Entry("head.weight", (n_classes, fan_in), "head_weight", hidden + 1))
    entries.append(Entry("head.bias", (n_classes,), "head_bias", hidden + 1))
    return Manifest(hidden + 1, tuple(entries))


def with_lowrank(manifest: Manifest, rank: int, alpha: float) -> Manifest:
    entries = list(manifest.entries)
    for d in range(1, manifest.layer_count + 1):
        w = manifest.weight_at(d)
        prefix = w.name.rsplit(".", 1)[0]
        entries.append(Entry(f"{prefix}.lowrank_a", (rank, w.shape[1]), "lowrank_a", d))
        entries.append(Entry(f"{prefix}.lowrank_b", (w.shape[0], rank), "lowrank_b", d))
    return Manifest(manifest.layer_count, tuple(entries), float(alpha))


def layers(manifest: Manifest) -> list[Layer]:
    out = []
    for d in range(1, manifest.layer_count + 1):
        pair = manifest.lowrank_at(d)
        out.append(Layer(d, manifest.weight_at(d).name, manifest.bias_at(d).name,
                         (pair[0].name, pair[1].name) if pair else None))
    return out


def params_of(c: Checkpoint) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in c.tensors.items()}


def effective_weight(params, manifest: Manifest, layer: Layer) -> np.ndarray:
    w = params[layer.weight]
    if layer.lowrank is None:
        return w
    a, b = params[layer.lowrank[0]], params[layer.lowrank[1]]
    return w + manifest.lowrank_alpha / a.shape[0] * (b @ a)


@dataclass
class Cache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations
    weights: list[np.ndarray]  # effective weights
    logits: np.ndarray


def forward(params, manifest: Manifest, x: np.ndarray) -> Cache:
    h = np.asarray(x, dtype=np.float64)
    ls = layers(manifest)
    inputs, pre, weights = [], [], []
    for i, layer in enumerate(ls):
        w = effective_weight(params, manifest, layer)
        inputs.append(h)
        weights.append(w)
        z = h @ w.T + params[layer.bias]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(ls) - 1 else z
    return Cache(inputs, pre, weights, h)


def logits(params, manifest: Manifest, x: np.ndarray) -> np.ndarray:
    return forward(params, manifest, x).logits


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def backward(params, manifest: Manifest, cache: Cache, dlogits: np.ndarray,
             mode: str = "full") -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. the logits.

    ``mode="full"`` differentiates dense weights and biases; ``"lowrank"``
    differentiates biases and the factor pairs; ``"effective"`` returns the
    gradient w.r.t. each layer's effective weight under the dense name.
    """
    ls = layers(manifest)
    grads = {}
    delta = dlogits
    for i in range(len(ls) - 1, -1, -1):
        layer = ls[i]
        gw = delta.T @ cache.inputs[i]
        grads[layer.bias] = delta.sum(axis=0)
        if mode == "lowrank" and layer.lowrank is not None:
            a_name, b_name = layer.lowrank
            a, b = params[a_name], params[b_name]
            scale = manifest.lowrank_alpha / a.shape[0]
            grads[b_name] = scale * gw @ a.T
            grads[a_name] = scale * b.T @ gw
        else:
            grads[layer.weight] = gw
        if i > 0:
            delta = (delta @ cache.weights[i]) * (cache.pre[i - 1] > 0)
    return grads


def cross_entropy(params, manifest: Manifest, x, y, mode: str = "full"):
    """Mean softmax cross-entropy and its gradients."""
    cache = forward(params, manifest, x)
    p = softmax(cache.logits)
    n = len(y)
    loss = -float(np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, backward(params, manifest, cache, d / n, mode)


def entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)


def mean_entropy(params, manifest: Manifest, x, mode: str = "effective"):
    """Mean prediction entropy over rows of ``x`` and its gradients."""
    cache = forward(params, manifest, x)
    p = softmax(cache.logits)
    h = entropy_rows(p)
    logp = np.log(np.maximum(p, 1e-300))
    d = -p * (logp + h[:, None]) / len(x)
    return float(np.mean(h)), backward(params, manifest, cache, d, mode)


def predict(params, manifest: Manifest, x) -> np.ndarray:
    return np.argmax(logits(params, manifest, x), axis=1)
