"""Data-free merge kernels.

Each kernel works on one granularity group: a list with one float64 array per
expert (all the same shape) plus method settings, and returns the merged
array. Delta kernels receive task vectors and return a merged delta; the
dispatcher adds it back onto the base. ``linear_average`` and ``slerp``
receive raw parameters.

Ranking conventions shared by every magnitude/score selection: ties break by
ascending flat index, and fractions of ``n`` elements are converted to counts
with ``ceil(frac * n)`` (at least one element).
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from ..errors import DegenerateGeometryError, InfeasibleMaskError, RankError, RecipeError
from ..tensor import numerical_rank, svd

log = logging.getLogger(__name__)

Arrays = Sequence[np.ndarray]


# -- selection helpers -----------------------------------------------------


def keep_count(frac: float, n: int) -> int:
    return max(1, min(n, math.ceil(frac * n - 1e-9)))


def descending_order(score: np.ndarray) -> np.ndarray:
    """Flat indices by descending score, ties by ascending index."""
    return np.argsort(-score.ravel(), kind="stable")


def ascending_rank(score: np.ndarray) -> np.ndarray:
    """1-based ascending rank of every element, ties by ascending index."""
    flat = score.ravel()
    rank = np.empty(flat.size, dtype=np.int64)
    rank[np.argsort(flat, kind="stable")] = np.arange(1, flat.size + 1)
    return rank.reshape(score.shape)


def topk_mask(score: np.ndarray, count: int) -> np.ndarray:
    mask = np.zeros(score.size, dtype=bool)
    mask[descending_order(score)[:count]] = True
    return mask.reshape(score.shape)


def _prefix_count(cum: np.ndarray, frac: float) -> int:
    """Shortest prefix whose cumulative mass reaches ``frac`` of the total."""
    target = cum[-1] if frac >= 1.0 else frac * cum[-1] * (1 - 1e-12)
    return int(np.searchsorted(cum, target, side="left")) + 1


def _softmax(x: np.ndarray) -> np.ndarray:
    flat = x.ravel()
    e = np.exp(flat - flat.max())
    return (e / e.sum()).reshape(x.shape)


def weighted_sum(ts: Arrays, alpha: Sequence[float]) -> np.ndarray:
    out = np.zeros_like(ts[0], dtype=np.float64)
    for a, t in zip(alpha, ts):
        out += a * t
    return out


# -- model-level interpolation --------------------------------------------


def linear_average(thetas: Arrays, alpha: Sequence[float]) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(alpha) != len(thetas):
        raise RecipeError(f"{len(alpha)} weights for {len(thetas)} experts")
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-6:
        raise RecipeError(f"average weights must be non-negative and sum to 1, got {alpha.tolist()}")
    return weighted_sum(thetas, alpha)


def slerp(theta1: np.ndarray, theta2: np.ndarray, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise RecipeError(f"slerp t must lie in [0, 1], got {t}")
    n1 = float(np.linalg.norm(theta1))
    n2 = float(np.linalg.norm(theta2))
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateGeometryError("slerp is undefined for a zero-norm parameter group")
    cos = float(np.clip(np.vdot(theta1, theta2) / (n1 * n2), -1.0, 1.0))
    omega = math.acos(cos)
    if omega < 1e-6:
        return (1.0 - t) * theta1 + t * theta2
    so = math.sin(omega)
    return math.sin((1.0 - t) * omega) / so * theta1 + math.sin(t * omega) / so * theta2


def slerp_many(thetas: Arrays, t: float) -> np.ndarray:
    """Left fold: slerp(slerp(a, b, t), c, t) ..."""
    out = thetas[0]
    for nxt in thetas[1:]:
        out = slerp(out, nxt, t)
    return np.array(out, dtype=np.float64)


# -- coefficient methods ---------------------------------------------------


def metagpt_coefficients(ts: Arrays) -> np.ndarray:
    sq = np.array([float(np.sum(np.square(t))) for t in ts])
    total = sq.sum()
    if total == 0.0:
        log.warning("metagpt: all task vectors are zero, using uniform coefficients")
        return np.full(len(ts), 1.0 / len(ts))
    return sq / total


def lines_gammas(layer_count: int, alpha0: float = 0.5, beta0: float = 0.5) -> np.ndarray:
    """Depth scaling factors for depths 1..L."""
    if layer_count == 1:
        return np.array([alpha0 + beta0])
    depth = np.arange(layer_count)
    return alpha0 + beta0 * depth / (layer_count - 1)


# -- sparsification --------------------------------------------------------


def dare_sparsify(t: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise RecipeError(f"dare drop rate must lie in [0, 1), got {p}")
    keep = rng.random(t.shape) < (1.0 - p)
    return np.where(keep, t / (1.0 - p), 0.0)


def breadcrumbs_mask(t: np.ndarray, beta: float = 0.85, gamma: float = 0.99) -> np.ndarray:
    """Keep entries whose ascending magnitude percentile lies in (beta, gamma]."""
    if not 0.0 <= beta < gamma <= 1.0:
        raise RecipeError(f"breadcrumbs needs 0 <= beta < gamma <= 1, got {beta}, {gamma}")
    n = t.size
    rank = ascending_rank(np.abs(t))
    lo = math.floor(beta * n + 1e-9)
    hi = math.floor(gamma * n + 1e-9)
    return np.where((rank > lo) & (rank <= hi), t, 0.0)


def trim_topk(t: np.ndarray, k: float) -> np.ndarray:
    return np.where(topk_mask(np.abs(t), keep_count(k, t.size)), t, 0.0)


def elect_sign(ts: Arrays) -> np.ndarray:
    """Unweighted majority vote: sign(sum_i sign(t_i)), with sign(0) = 0."""
    return np.sign(np.sum([np.sign(t) for t in ts], axis=0))


def disjoint_mean(ts: Arrays, sign: np.ndarray) -> np.ndarray:
    stack = np.stack(ts)
    agree = (np.sign(stack) == sign) & (sign != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, stack, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_merge(ts: Arrays, k: float = 0.2) -> np.ndarray:
    if not 0.0 < k <= 1.0:
        raise RecipeError(f"ties keep fraction must lie in (0, 1], got {k}")
    trimmed = [trim_topk(t, k) for t in ts]
    return disjoint_mean(trimmed, elect_sign(trimmed))


def consensus_ta(ts: Arrays, alpha: Sequence[float], lambda_mask: float = 0.4,
                 min_support: int = 2) -> np.ndarray:
    if lambda_mask <= 0:
        raise RecipeError(f"consensus lambda must be positive, got {lambda_mask}")
    if not 1 <= min_support <= len(ts):
        raise RecipeError(f"min_support {min_support} outside 1..{len(ts)}")
    total = np.sum(ts, axis=0)
    support = np.zeros(ts[0].shape, dtype=np.int64)
    for t in ts:
        support += np.abs(t) >= lambda_mask * np.abs(total - t)
    return np.where(support >= min_support, weighted_sum(ts, alpha), 0.0)


def tadrop_sparsify(t: np.ndarray, rho: float = 0.9) -> np.ndarray:
    """Keep the fewest largest entries holding rho of the squared mass, norm preserved."""
    if not 0.0 < rho <= 1.0:
        raise RecipeError(f"tadrop mass must lie in (0, 1], got {rho}")
    sq = np.square(t).ravel()
    order = descending_order(sq)
    cum = np.cumsum(sq[order])
    total = cum[-1]
    if total == 0.0:
        return np.zeros_like(t)
    count = min(_prefix_count(cum, rho), t.size)
    mask = np.zeros(t.size, dtype=bool)
    mask[order[:count]] = True
    scale = math.sqrt(total / cum[count - 1])
    return np.where(mask.reshape(t.shape), t * scale, 0.0)


def cabs_masks(ts: Arrays, priority: Sequence[int], n: int = 1, m: int = 4) -> list[np.ndarray]:
    """Keep-masks of conflict-aware n:m sparsification.

    Experts claim entries in ``priority`` order; inside every block of ``m``
    consecutive flat entries each expert keeps its ``n`` largest entries not
    yet claimed by an earlier expert. A short final block is allowed.
    """
    if not 1 <= n <= m:
        raise RecipeError(f"cabs needs 1 <= n <= m, got {n}:{m}")
    if n * len(ts) > m:
        raise InfeasibleMaskError(f"{len(ts)} experts x {n} kept entries exceed block size {m}")
    size = ts[0].size
    blocks = -(-size // m)
    claimed = np.zeros(blocks * m, dtype=bool)
    claimed[size:] = True
    masks: list[np.ndarray] = [np.zeros(ts[0].shape, dtype=bool)] * len(ts)
    for i in priority:
        flat = np.zeros(blocks * m)
        flat[:size] = np.abs(ts[i]).ravel()
        mag = np.where(claimed, -np.inf, flat).reshape(blocks, m)
        pick = np.argsort(-mag, axis=1, kind="stable")[:, :n]
        sel = np.repeat(np.arange(blocks), n) * m + pick.ravel()
        sel = sel[~claimed[sel]]
        claimed[sel] = True
        mask = np.zeros(blocks * m, dtype=bool)
        mask[sel] = True
        masks[i] = mask[:size].reshape(ts[0].shape)
    return masks


def cabs_merge(ts: Arrays, priority: Sequence[int], n: int = 1, m: int = 4) -> np.ndarray:
    """Sum of the disjoint CABS selections, each rescaled to its expert's norm."""
    out = np.zeros_like(ts[0])
    for t, mask in zip(ts, cabs_masks(ts, priority, n, m)):
        kept = np.where(mask, t, 0.0)
        norm_kept = np.linalg.norm(kept)
        if norm_kept > 0:
            out += kept * (np.linalg.norm(t) / norm_kept)
    return out


def pcb_scores(ts: Arrays) -> list[np.ndarray]:
    n = len(ts)
    normed = []
    for t in ts:
        peak = np.max(np.abs(t))
        normed.append(t / peak if peak > 0 else np.zeros_like(t))
    scores = []
    for i, ti in enumerate(normed):
        intra = _softmax(n * ti * ti)
        inter = sum(_softmax(ti * tj) for tj in normed)
        scores.append(intra * inter)
    return scores


def pcb_merge(ts: Arrays, r: float = 0.2) -> np.ndarray:
    if not 0.0 < r <= 1.0:
        raise RecipeError(f"pcb keep ratio must lie in (0, 1], got {r}")
    scores = pcb_scores(ts)
    num = np.zeros_like(ts[0])
    den = np.zeros_like(ts[0])
    count = keep_count(r, ts[0].size)
    for t, s in zip(ts, scores):
        w = np.where(topk_mask(s, count), s, 0.0)
        num += w * t
        den += w
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def della_keep_probs(t: np.ndarray, p_min: float, p_max: float) -> np.ndarray:
    n = t.size
    rank = ascending_rank(np.abs(t)) - 1
    if n == 1:
        return np.full(t.shape, p_max, dtype=np.float64)
    return p_min + (p_max - p_min) * rank / (n - 1)


def della_sparsify(t: np.ndarray, p_min: float, p_max: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 < p_min <= p_max <= 1.0:
        raise RecipeError(f"della needs 0 < p_min <= p_max <= 1, got {p_min}, {p_max}")
    p = della_keep_probs(t, p_min, p_max)
    keep = rng.random(t.shape) < p
    return np.where(keep, t / p, 0.0)


def della_merge(ts: Arrays, p_min: float, p_max: float, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    kept = [della_sparsify(t, p_min, p_max, g) for t, g in zip(ts, rngs)]
    return disjoint_mean(kept, elect_sign(kept))


def sce_merge(ts: Arrays, p: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Select by cross-expert variance, weight by selected energy, erase sign conflicts.

    Returns the merged delta and the normalized expert coefficients.
    """
    if not 0.0 < p <= 1.0:
        raise RecipeError(f"sce select fraction must lie in (0, 1], got {p}")
    stack = np.stack(ts)
    mask = topk_mask(np.var(stack, axis=0), keep_count(p, ts[0].size))
    sel = np.where(mask, stack, 0.0)
    energy = np.sum(np.square(sel).reshape(len(ts), -1), axis=1)
    coef = energy / energy.sum() if energy.sum() > 0 else np.full(len(ts), 1.0 / len(ts))
    sign = np.sign(sel.sum(axis=0))
    alive = (np.sign(sel) == sign) & (sign != 0)
    c = coef.reshape((-1,) + (1,) * (stack.ndim - 1))
    num = np.where(alive, c * sel, 0.0).sum(axis=0)
    den = np.where(alive, c, 0.0).sum(axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0), coef


# -- subspace methods ------------------------------------------------------


def _polar(x: np.ndarray) -> np.ndarray:
    r = svd(x)
    return r.u @ r.v.T


def tsv_merge(ts: Arrays, k: int | None = None) -> np.ndarray:
    """Rank-k truncations re-expressed in a jointly orthogonalized basis."""
    rows, cols = ts[0].shape
    if k is None:
        k = max(1, min(rows, cols) // len(ts))
    if not 1 <= k <= min(rows, cols):
        raise RankError(f"tsv rank {k} outside 1..{min(rows, cols)}")
    if not any(np.any(t) for t in ts):
        return np.zeros((rows, cols))
    us, ss, vs = [], [], []
    for t in ts:
        r = svd(t)
        s = r.s[:k].copy()
        s[s <= 1e-10 * r.s[0]] = 0.0
        us.append(r.u[:, :k])
        ss.append(s)
        vs.append(r.v[:, :k])
    s_cat = np.concatenate(ss)
    root = np.sqrt(s_cat)
    u_perp = _polar(np.hstack(us) * root)
    v_perp = _polar(np.hstack(vs) * root)
    return (u_perp * s_cat) @ v_perp.T


def iso_cts_merge(ts: Arrays, k: int | None = None) -> np.ndarray:
    """Flatten the top-k spectrum of the summed task matrix to its mean."""
    total = np.sum(ts, axis=0)
    r = svd(total)
    rank = numerical_rank(r.s)
    if rank == 0:
        return np.zeros_like(total)
    k = rank if k is None else min(k, rank)
    if k < 1:
        raise RankError(f"iso_cts rank must be positive, got {k}")
    level = float(np.mean(r.s[:k]))
    return level * (r.u[:, :k] @ r.v[:, :k].T)


def impart_truncate(t: np.ndarray, tau: float = 0.9) -> np.ndarray:
    """Keep the shortest singular prefix holding tau of the spectral energy."""
    if not 0.0 < tau <= 1.0:
        raise RecipeError(f"impart energy must lie in (0, 1], got {tau}")
    r = svd(t)
    cum = np.cumsum(r.s ** 2)
    if cum[-1] == 0.0:
        return np.zeros_like(t)
    count = min(_prefix_count(cum, tau), r.s.size)
    return (r.u[:, :count] * r.s[:count]) @ r.v[:, :count].T


def impart_merge(ts: Arrays, alpha: Sequence[float], tau: float = 0.9) -> np.ndarray:
    return weighted_sum([impart_truncate(t, tau) for t in ts], alpha)


def wudi_merge(ts: Arrays, iters: int = 300, step: float = 1e-2) -> tuple[np.ndarray, list[float]]:
    """Gradient descent on the row-space interference objective.

    J(M) = sum_i |(M - T_i) P_i|^2 / |T_i|^2 with P_i the projector onto the
    row space of T_i. ``step`` is relative: the applied rate is
    ``step * n / sum_i |T_i|^-2``. The step halves (up to five times per
    iteration) whenever J would increase, so the returned trace never rises.
    """
    live = [t for t in ts if np.any(t)]
    merged = np.sum(ts, axis=0)
    if not live:
        return merged, [0.0]
    projs, weights = [], []
    for t in live:
        r = svd(t)
        rank = numerical_rank(r.s)
        v = r.v[:, :rank]
        projs.append(v @ v.T)
        weights.append(1.0 / float(np.sum(t * t)))

    def objective(x):
        return sum(w * float(np.sum(np.square((x - t) @ p))) for t, p, w in zip(live, projs, weights))

    def gradient(x):
        return sum(2.0 * w * ((x - t) @ p) for t, p, w in zip(live, projs, weights))

    lr = step * len(live) / sum(weights)
    value = objective(merged)
    trace = [value]
    for _ in range(iters):
        grad = gradient(merged)
        for _halving in range(6):
            cand = merged - lr * grad
            cand_value = objective(cand)
            if cand_value <= value:
                break
            lr *= 0.5
        else:
            break
        merged, value = cand, cand_value
        trace.append(value)
    if trace[-1] > trace[0]:
        raise AssertionError("wudi objective increased")
    return merged, trace
