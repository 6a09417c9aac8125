"""Dense tensor helpers and the numerical kernels shared by every merge.

Tensors are plain ``numpy.ndarray`` objects stored as C-contiguous float32;
reductions and decompositions run in float64.

The Jacobi sweep kernel comes from the compiled ``_jacobi`` extension when it
is importable and from ``_jacobi_py`` otherwise. Set
``CONSOLIDATE_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import hashlib
import os
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .errors import DataError, ShapeError, SingularMatrixError

from . import _jacobi_py

if os.environ.get("CONSOLIDATE_PURE_PYTHON") == "1":
    _kernel = _jacobi_py
else:
    try:
        from . import _jacobi as _kernel
    except ImportError:  # extension not built
        _kernel = _jacobi_py

BACKEND = "cython" if _kernel is not _jacobi_py else "python"

ROTATION_TOL = 1e-12
MAX_SWEEPS = 60
# singular values below RANK_RTOL * s[0] count as zero for rank decisions
RANK_RTOL = 1e-10

STORAGE_DTYPE = np.float32


class SvdResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Copy ``x`` into float32 storage, rejecting non-finite values."""
    t = np.ascontiguousarray(x, dtype=STORAGE_DTYPE)
    if t.ndim not in (1, 2):
        raise ShapeError(f"{name}: only rank-1 and rank-2 tensors are supported, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise DataError(f"{name}: non-finite values")
    return t


def _complete_basis(u: np.ndarray, known: np.ndarray) -> None:
    # fill columns of u where known is False with an orthonormal completion,
    # greedily taking the coordinate axis with the largest residual
    m = u.shape[0]
    basis = u[:, known]
    for j in np.flatnonzero(~known):
        resid = np.eye(m)
        for _ in range(2):
            resid -= basis @ (basis.T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        e = resid[:, int(np.argmax(norms))]
        e = e / np.linalg.norm(e)
        u[:, j] = e
        basis = np.column_stack([basis, e])


def svd(a, kernel=None) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``u`` (m x k), ``s`` (k,), ``v`` (n x k) with ``k = min(m, n)`` and
    ``a = u @ diag(s) @ v.T``. Singular values are sorted descending; equal
    values keep their column order. Output is a deterministic function of the
    input bytes for a given kernel.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"svd expects a non-empty matrix, got shape {a.shape}")
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise DataError("svd input contains non-finite values")
    kernel = kernel or _kernel

    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    w = np.ascontiguousarray(a.T)
    v = np.eye(n)
    kernel.rotate(w, v, ROTATION_TOL, MAX_SWEEPS)

    s = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[order]
    v = v[order]
    # columns this small relative to s[0] have squared norms near underflow
    live = s > (s[0] * 1e-140 if s[0] > 0 else 0.0)
    s = np.where(live, s, 0.0)
    u = np.zeros((m, n))
    u[:, live] = (w[live] / s[live, None]).T
    if not live.all():
        _complete_basis(u, live)
    vt = v.T.copy()
    if transposed:
        return SvdResult(vt, s, u)
    return SvdResult(u, s, vt)


def numerical_rank(s: np.ndarray) -> int:
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > RANK_RTOL * s[0]))


def solve_spd(a, b, name: str = "system", max_retries: int = 3) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive (semi)definite ``a``.

    Cholesky first; on failure the diagonal is jittered by
    ``1e-8 * trace(a) / n`` and escalated 100x per retry.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name}: solve_spd needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"{name}: leading dimensions differ ({a.shape[0]} vs {b.shape[0]})")
    scale = max(np.max(np.abs(a)), 1e-300)
    if np.max(np.abs(a - a.T)) > 1e-6 * scale:
        raise DataError(f"{name}: matrix is not symmetric")
    n = a.shape[0]
    base_jitter = 1e-8 * max(np.trace(a), 0.0) / n
    bnorm = np.linalg.norm(b)
    for attempt in range(max_retries + 1):
        jitter = 0.0 if attempt == 0 else base_jitter * 100.0 ** (attempt - 1)
        if attempt > 0 and jitter == 0.0:
            break
        aj = a + jitter * np.eye(n) if jitter else a
        try:
            factor = scipy.linalg.cho_factor(aj, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        x = scipy.linalg.cho_solve(factor, b, check_finite=False)
        if not np.all(np.isfinite(x)):
            continue
        if bnorm == 0.0 or np.linalg.norm(aj @ x - b) <= 1e-5 * bnorm:
            return x
    raise SingularMatrixError(f"{name}: factorization failed after {max_retries} jitter retries")


def frobenius_norm(t) -> float:
    t = np.asarray(t)
    return float(np.sqrt(np.sum(np.square(t, dtype=np.float64))))


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng(seed: int, *keys) -> np.random.Generator:
    """Deterministic generator for ``seed`` and an optional key path.

    Backed by numpy's PCG64 bit generator seeded through ``SeedSequence``;
    string keys are hashed with BLAKE2b so streams are stable across runs and
    platforms. Distinct keys give independent streams.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def gaussian(seed: int, shape: Sequence[int] | int, *keys) -> np.ndarray:
    """Standard-normal float32 tensor drawn from ``rng(seed, *keys)``."""
    return rng(seed, *keys).standard_normal(shape).astype(STORAGE_DTYPE)
