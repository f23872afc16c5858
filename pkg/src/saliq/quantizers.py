"""Weight quantizers: group-wise RTN, learnable clipping, dual binarization,
and mixture-of-scaling-experts for 1-bit weights.

Groups are contiguous runs along the input dimension of a row-major
``(out, in)`` matrix, so a ``(out, in)`` weight with group size ``g`` is viewed
as ``(out * in // g, g)``. A group size of ``None`` means one group for the
whole matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, round_half_away

EPS = 1e-8
GATE_INIT = 4.0
KINDS = ("rtn", "learnable_clip", "dual_binary", "mos")
ALLOWED_BITS = (1, 2, 3, 4, 8)


@dataclass
class QuantSpec:
    bits: int
    group_size: int | None = None
    kind: str = "rtn"
    scale: np.ndarray | None = None
    zero: np.ndarray | None = None
    gamma_lo: np.ndarray | None = None
    gamma_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.kind == "dual_binary" and self.bits != 2:
            raise ValueError("dual_binary quantization is 2-bit by construction")
        if self.kind == "mos" and self.bits != 1:
            raise ValueError("mos quantization is 1-bit by construction")
        if self.group_size is not None and self.group_size <= 0:
            raise ValueError(f"group_size must be positive, got {self.group_size}")

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1


def group_view(w: np.ndarray, group_size: int | None) -> np.ndarray:
    """View ``w`` as ``(n_groups, group_len)``."""
    if group_size is None:
        return w.reshape(1, -1)
    if w.shape[-1] % group_size:
        raise ValueError(f"group size {group_size} does not divide input dim {w.shape[-1]}")
    return w.reshape(-1, group_size)


def compute_scale(w_group: np.ndarray, bits: int) -> np.ndarray:
    """Per-group ``(max - min) / (2^N - 1)``; constant groups get ``EPS``.

    ``w_group`` is 1-D (one group) or 2-D with one group per row.
    """
    w = np.atleast_2d(w_group)
    s = (w.max(axis=1) - w.min(axis=1)) / (2 ** bits - 1)
    # constant groups, and ranges so small the step underflows, use EPS
    s = np.where(s > 0, s, EPS)
    return s if np.ndim(w_group) > 1 else s[0]


def compute_zero_point(w_min, s):
    return -round_half_away(np.asarray(w_min) / s)


def rtn_params(w: np.ndarray, bits: int, group_size: int | None = None) -> QuantSpec:
    g = group_view(np.asarray(w), group_size)
    s = compute_scale(g, bits)
    z = compute_zero_point(g.min(axis=1), s)
    return QuantSpec(bits, group_size, "rtn", scale=s, zero=z)


def quantize_rtn(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Integer codes ``clamp(round(w / s) + z, 0, 2^N - 1)`` with the shape of ``w``."""
    g = group_view(np.asarray(w), spec.group_size)
    s = np.asarray(spec.scale).reshape(-1, 1)
    z = np.asarray(spec.zero).reshape(-1, 1)
    codes = np.clip(round_half_away(g / s) + z, 0, spec.qmax)
    return codes.astype(np.int64).reshape(np.shape(w))


def dequantize(codes: np.ndarray, spec: QuantSpec) -> np.ndarray:
    g = group_view(np.asarray(codes, dtype=np.float64), spec.group_size)
    s = np.asarray(spec.scale, dtype=np.float64).reshape(-1, 1)
    z = np.asarray(spec.zero, dtype=np.float64).reshape(-1, 1)
    return ((g - z) * s).reshape(np.shape(codes))


def rtn(w: np.ndarray, bits: int, group_size: int | None = None) -> tuple[np.ndarray, QuantSpec]:
    """Round-to-nearest quantize ``w``; returns ``(w_hat, spec)``."""
    spec = rtn_params(w, bits, group_size)
    w_hat = dequantize(quantize_rtn(w, spec), spec)
    return w_hat.astype(np.result_type(w, np.float32)), spec


def quantize_symmetric(w: np.ndarray, bits: int) -> np.ndarray:
    """Signed symmetric RTN over the whole array, returned dequantized."""
    amax = np.abs(w).max()
    qpos = 2 ** (bits - 1) - 1
    if amax == 0 or qpos == 0:
        return np.zeros_like(w)
    s = amax / qpos
    return np.clip(round_half_away(w / s), -qpos - 1, qpos) * s


# -- learnable clipping ----------------------------------------------------

def init_gates(w: np.ndarray, group_size: int | None, value: float = GATE_INIT):
    n = group_view(np.asarray(w), group_size).shape[0]
    return np.full((n, 1), value, dtype=np.asarray(w).dtype), np.full((n, 1), value, dtype=np.asarray(w).dtype)


def clip_range(w: np.ndarray, gamma_lo, gamma_hi, group_size: int | None):
    """Effective per-group ``(lo, hi)`` after logistic gating, as arrays."""
    g = group_view(np.asarray(w), group_size)
    lo = g.min(axis=1, keepdims=True) * T._sigmoid(np.asarray(gamma_lo, dtype=np.float64))
    hi = g.max(axis=1, keepdims=True) * T._sigmoid(np.asarray(gamma_hi, dtype=np.float64))
    return lo, hi


def degenerate_groups(w: np.ndarray, gamma_lo, gamma_hi, group_size: int | None) -> int:
    """Number of groups whose gated range collapsed to ``hi <= lo``."""
    lo, hi = clip_range(w, gamma_lo, gamma_hi, group_size)
    return int(np.sum(hi <= lo))


def fake_quant_learnable(w, gamma_lo: Tensor, gamma_hi: Tensor, bits: int,
                         group_size: int | None = None) -> Tensor:
    """Differentiable quantize-dequantize with gated clipping range.

    ``lo = min(w) * sigmoid(gamma_lo)`` and ``hi = max(w) * sigmoid(gamma_hi)``
    per group. Scale and zero point follow from ``(lo, hi)``; rounding uses
    the straight-through estimator so gradients reach both gates through the
    scale and zero point. Collapsed ranges fall back to ``EPS`` scale.
    """
    w = T.as_tensor(w)
    shape = w.shape
    wd = group_view(w.data, group_size)
    wg = T.reshape(w, wd.shape)
    qmax = 2 ** bits - 1
    lo = T.mul(wd.min(axis=1, keepdims=True), T.sigmoid(gamma_lo))
    hi = T.mul(wd.max(axis=1, keepdims=True), T.sigmoid(gamma_hi))
    s = T.clamp((hi - lo) / float(qmax), lo=EPS)
    z = -T.ste_round(lo / s)
    wc = T.clamp(wg, lo, hi)
    codes = T.clamp(T.ste_round(wc / s) + z, 0.0, float(qmax))
    return T.reshape((codes - z) * s, shape)


def freeze_learnable(w: np.ndarray, gamma_lo, gamma_hi, bits: int,
                     group_size: int | None = None) -> tuple[np.ndarray, QuantSpec]:
    """Integer codes and group table equivalent to :func:`fake_quant_learnable`."""
    lo, hi = clip_range(w, gamma_lo, gamma_hi, group_size)
    qmax = 2 ** bits - 1
    s = np.maximum((hi - lo) / qmax, EPS)
    z = -round_half_away(lo / s)
    g = group_view(np.asarray(w, dtype=np.float64), group_size)
    codes = np.clip(round_half_away(np.clip(g, lo, hi) / s) + z, 0, qmax)
    spec = QuantSpec(bits, group_size, "learnable_clip", scale=s.ravel(), zero=z.ravel(),
                     gamma_lo=np.asarray(gamma_lo).ravel(), gamma_hi=np.asarray(gamma_hi).ravel())
    return codes.astype(np.int64).reshape(np.shape(w)), spec


# -- dual binarization -----------------------------------------------------

DUAL_BINARY_MAX_ITERS = 25


@dataclass
class DualBinary:
    b1: np.ndarray
    b2: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    w_hat: np.ndarray
    group_size: int | None = None
    iterations: list[int] = field(default_factory=list)


def _sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, -1.0)


def _assign(w: np.ndarray, a1: float, a2: float) -> tuple[np.ndarray, np.ndarray]:
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
    levels = signs @ np.array([a1, a2])
    k = np.argmin(np.abs(w[:, None] - levels[None, :]), axis=1)
    return signs[k, 0], signs[k, 1]


def solve_alphas(w: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> tuple[float, float]:
    """Least-squares ``(a1, a2)`` minimising ``||w - a1 b1 - a2 b2||^2``."""
    basis = np.stack([b1, b2], axis=1)
    sol, *_ = np.linalg.lstsq(basis, w, rcond=None)
    return float(sol[0]), float(sol[1])


def _alternate(w, b1, b2, max_iters):
    a1, a2 = solve_alphas(w, b1, b2)
    it = 0
    for it in range(1, max_iters + 1):
        nb1, nb2 = _assign(w, a1, a2)
        if np.array_equal(nb1, b1) and np.array_equal(nb2, b2):
            break
        b1, b2 = nb1, nb2
        a1, a2 = solve_alphas(w, b1, b2)
    err = float(np.sum((w - a1 * b1 - a2 * b2) ** 2))
    return err, b1, b2, a1, a2, it


def _split_start(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign patterns of the globally optimal fit.

    With ``a1 >= a2 >= 0`` the four levels are split at ``-a1, 0, a1``, so the
    optimum has ``b1 = sign(w)`` and ``b2 = b1`` exactly on the weights whose
    magnitude exceeds a threshold. Fitting is then two-cluster least squares
    on ``|w|`` over a sorted split, which a prefix-sum scan solves exactly.
    """
    b1 = _sign(w)
    u = np.abs(w)
    order = np.argsort(-u, kind="stable")
    su = u[order]
    n = su.size
    c1 = np.concatenate([[0.0], np.cumsum(su)])
    c2 = np.concatenate([[0.0], np.cumsum(su * su)])
    k = np.arange(n + 1)  # number of weights on the outer level
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = np.where(k > 0, c2[k] - c1[k] ** 2 / k, 0.0)
        inner = np.where(k < n, (c2[n] - c2[k]) - (c1[n] - c1[k]) ** 2 / (n - k), 0.0)
    best = int(np.argmin(outer + inner))
    on_outer = np.zeros(n, dtype=bool)
    on_outer[order[:best]] = True
    return b1, np.where(on_outer, b1, -b1)


def dual_binarize_group(w: np.ndarray, max_iters: int = DUAL_BINARY_MAX_ITERS):
    """Fit ``w ~ a1 b1 + a2 b2`` with ``b in {-1, +1}`` by alternating least
    squares; returns ``(b1, b2, a1, a2, iterations)``.

    Alternation alone stalls in local minima, so it starts from the exact
    split of :func:`_split_start` and can only improve on it.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    _, b1, b2, a1, a2, it = _alternate(w, *_split_start(w), max_iters)
    # canonical form: a1 >= |a2| >= 0
    if a1 < 0:
        a1, b1 = -a1, -b1
    if a2 < 0:
        a2, b2 = -a2, -b2
    if a2 > a1:
        a1, a2, b1, b2 = a2, a1, b2, b1
    return b1, b2, a1, a2, it


def dual_binarize(w: np.ndarray, group_size: int | None = None,
                  max_iters: int = DUAL_BINARY_MAX_ITERS) -> DualBinary:
    w = np.asarray(w)
    groups = group_view(w.astype(np.float64), group_size)
    n = groups.shape[0]
    b1 = np.empty_like(groups)
    b2 = np.empty_like(groups)
    a1 = np.empty(n)
    a2 = np.empty(n)
    iters = []
    for i, row in enumerate(groups):
        b1[i], b2[i], a1[i], a2[i], it = dual_binarize_group(row, max_iters)
        iters.append(it)
    w_hat = (a1[:, None] * b1 + a2[:, None] * b2).reshape(w.shape)
    return DualBinary(b1.reshape(w.shape).astype(np.int8), b2.reshape(w.shape).astype(np.int8),
                      a1, a2, w_hat, group_size, iters)


def dual_binary_weight(b1: np.ndarray, b2: np.ndarray, alpha1: Tensor, alpha2: Tensor,
                       group_size: int | None) -> Tensor:
    """Differentiable ``a1 b1 + a2 b2`` with per-group ``(n_groups, 1)`` alphas."""
    shape = b1.shape
    g1 = group_view(b1.astype(alpha1.dtype), group_size)
    g2 = group_view(b2.astype(alpha1.dtype), group_size)
    return T.reshape(T.mul(g1, alpha1) + T.mul(g2, alpha2), shape)


# -- mixture of scaling experts ---------------------------------------------

def mos_mixture(token_hidden: Tensor, router: Tensor) -> Tensor:
    """Router weights over experts, ``softmax(x @ router)``, shape ``(..., K)``."""
    return T.softmax(T.matmul(token_hidden, router))


def mos_scale(token_hidden: Tensor, experts: Tensor, router: Tensor) -> Tensor:
    """Token-conditioned scaling: convex combination of ``experts`` (K, d_out)."""
    if experts.ndim != 2 or router.shape[-1] != experts.shape[0]:
        raise T.ShapeError(f"mos_scale: router {router.shape} vs experts {experts.shape}")
    return T.matmul(mos_mixture(token_hidden, router), experts)


def mos_linear(x: Tensor, sign_w: np.ndarray, experts: Tensor, router: Tensor) -> Tensor:
    """1-bit linear layer: ``(x @ sign(W)^T) * scale(x)``."""
    binary = Tensor(np.asarray(sign_w, dtype=x.dtype).T)
    return T.mul(T.matmul(x, binary), mos_scale(x, experts, router))


def init_mos(w: np.ndarray, n_experts: int, rng: np.random.Generator, jitter: float = 0.01):
    """Sign matrix, experts seeded from per-row mean magnitude, zero router."""
    w = np.asarray(w)
    base = np.abs(w).mean(axis=1)
    experts = base[None, :] * (1.0 + jitter * rng.standard_normal((n_experts, w.shape[0])))
    router = np.zeros((w.shape[1], n_experts))
    return _sign(w).astype(np.int8), experts.astype(w.dtype), router.astype(w.dtype)
