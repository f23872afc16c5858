"""Low-rank adapters that absorb quantization error.

The adapter pair ``(B, A)`` is initialised from the truncated SVD of the
quantization residual ``W - Q_hat`` and later refined by block-wise training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LoraPair:
    a: np.ndarray  # (rank, in)
    b: np.ndarray  # (out, rank)

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise T.ShapeError(f"LoRA factors disagree: A {self.a.shape}, B {self.b.shape}")
        if self.rank > min(self.a.shape[1], self.b.shape[0]):
            raise ValueError(f"rank {self.rank} exceeds min(in, out) for "
                             f"A {self.a.shape}, B {self.b.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> np.ndarray:
        return self.b @ self.a


def effective_weight(q_hat, a, b):
    """``Q_hat + B @ A`` for numpy arrays or tensors."""
    qs, as_, bs = np.shape(_raw(q_hat)), np.shape(_raw(a)), np.shape(_raw(b))
    if len(as_) != 2 or len(bs) != 2 or bs[1] != as_[0] or (bs[0], as_[1]) != tuple(qs):
        raise T.ShapeError(f"effective_weight: Q {qs}, B {bs}, A {as_} do not compose")
    if isinstance(q_hat, Tensor) or isinstance(a, Tensor) or isinstance(b, Tensor):
        return T.add(T.as_tensor(q_hat), T.matmul(T.as_tensor(b), T.as_tensor(a)))
    return np.asarray(q_hat) + np.asarray(b) @ np.asarray(a)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def jacobi_svd(m: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Column pairs are visited in round-robin order so every step rotates
    disjoint pairs at once. Stops when every pair is orthogonal to relative
    tolerance ``tol``. Returns ``(U, S, Vt)`` with ``S`` descending.
    """
    a = np.array(m, dtype=np.float64)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    n = a.shape[1]
    u = a.copy()
    v = np.eye(n)
    slots = list(range(n)) + ([-1] if n % 2 else [])
    half = len(slots) // 2
    for _ in range(max_sweeps):
        rotated = False
        for _ in range(len(slots) - 1):
            pairs = [(slots[i], slots[-1 - i]) for i in range(half)]
            pairs = [(min(p), max(p)) for p in pairs if -1 not in p]
            slots = [slots[0], slots[-1]] + slots[1:-1]
            if not pairs:
                continue
            p = np.array([x for x, _ in pairs])
            q = np.array([y for _, y in pairs])
            up, uq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q, alpha, beta, gamma = p[active], q[active], alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (u, v):
                mp, mq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = c * mp - s * mq
                mat[:, q] = s * mp + c * mq
        if not rotated:
            break
    sv = np.linalg.norm(u, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    u = u[:, order]
    v = v[:, order]
    nz = sv > 0
    u[:, nz] /= sv[nz]
    u[:, ~nz] = 0.0
    if transposed:
        return v, sv, u.T
    return u, sv, v.T


def init_lora_from_residual(w: np.ndarray, q_hat: np.ndarray, rank: int) -> LoraPair:
    """Best rank-``rank`` factorisation of ``w - q_hat``, split as
    ``B = U sqrt(S)``, ``A = sqrt(S) V^T``."""
    w = np.asarray(w)
    out_dim, in_dim = w.shape
    if not 0 < rank <= min(out_dim, in_dim):
        raise ValueError(f"rank {rank} must be in [1, {min(out_dim, in_dim)}] for shape {w.shape}")
    u, s, vt = jacobi_svd(w.astype(np.float64) - np.asarray(q_hat, dtype=np.float64))
    root = np.sqrt(s[:rank])
    b = u[:, :rank] * root
    a = root[:, None] * vt[:rank]
    dtype = np.result_type(w.dtype, np.float32)
    return LoraPair(a.astype(dtype), b.astype(dtype))
