"""Quantized linear layers: the trainable calibration unit and its frozen
inference form.

A :class:`QuantizedLinear` keeps the original weight frozen and owns the
trainable quantizer state plus a LoRA pair. :meth:`QuantizedLinear.export`
turns it into container records; :class:`FrozenLinear` rebuilds an inference
layer from those records, so an in-memory model and a reloaded checkpoint
compute the same thing.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .lora import init_lora_from_residual
from .packing import PackedWeights, pack, unpack
from .quantizers import (GATE_INIT, QuantSpec, dequantize, degenerate_groups, dual_binarize,
                         dual_binary_weight, fake_quant_learnable, freeze_learnable, init_gates,
                         init_mos, mos_linear, quantize_rtn, rtn, rtn_params)
from .tensor import Tensor


class QuantizedLinear:
    """``kind=None`` disables quantization (the layer keeps ``W`` exactly)."""

    def __init__(self, weight: np.ndarray, bits: int = 2, group_size: int | None = None,
                 kind: str | None = "learnable_clip", lora_rank: int = 0, n_experts: int = 4,
                 rng: np.random.Generator | None = None, gate_init: float = GATE_INIT):
        self.weight = np.array(weight)
        self.bits, self.group_size, self.kind = bits, group_size, kind
        if kind is not None:
            QuantSpec(bits, group_size, kind)  # validates the combination
        dtype = self.weight.dtype
        self._quant: list[Tensor] = []
        if kind is None:
            q_init = self.weight
        elif kind == "rtn":
            q_init = rtn(self.weight, bits, group_size)[0].astype(dtype)
            self._q_fixed = q_init
        elif kind == "learnable_clip":
            lo, hi = init_gates(self.weight, group_size, gate_init)
            self.gamma_lo = Tensor(lo, requires_grad=True)
            self.gamma_hi = Tensor(hi, requires_grad=True)
            self._quant = [self.gamma_lo, self.gamma_hi]
            q_init = self.dequant_weight().data
        elif kind == "dual_binary":
            db = dual_binarize(self.weight, group_size)
            self.b1, self.b2 = db.b1, db.b2
            self.alpha1 = Tensor(db.alpha1.reshape(-1, 1).astype(dtype), requires_grad=True)
            self.alpha2 = Tensor(db.alpha2.reshape(-1, 1).astype(dtype), requires_grad=True)
            self._quant = [self.alpha1, self.alpha2]
            q_init = self.dequant_weight().data
        elif kind == "mos":
            rng = rng if rng is not None else np.random.default_rng(0)
            self.sign, experts, router = init_mos(self.weight, n_experts, rng)
            self.experts = Tensor(experts, requires_grad=True)
            self.router = Tensor(router, requires_grad=True)
            self._quant = [self.experts, self.router]
            q_init = self.dequant_weight().data
        else:
            raise ValueError(f"unknown quantizer kind {kind!r}")
        self.lora_a = self.lora_b = None
        self._forward = None
        if lora_rank:
            pair = init_lora_from_residual(self.weight, q_init, lora_rank)
            self.lora_a = Tensor(pair.a.astype(dtype), requires_grad=True)
            self.lora_b = Tensor(pair.b.astype(dtype), requires_grad=True)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def quant_params(self) -> list[Tensor]:
        return list(self._quant)

    def lora_params(self) -> list[Tensor]:
        return [] if self.lora_a is None else [self.lora_a, self.lora_b]

    def dequant_weight(self) -> Tensor:
        """Quantized weight ``Q_hat``; for MoS the token-independent mean-expert scaling."""
        if self.kind is None:
            return Tensor(self.weight)
        if self.kind == "rtn":
            return Tensor(self._q_fixed)
        if self.kind == "learnable_clip":
            return fake_quant_learnable(self.weight, self.gamma_lo, self.gamma_hi, self.bits, self.group_size)
        if self.kind == "dual_binary":
            return dual_binary_weight(self.b1, self.b2, self.alpha1, self.alpha2, self.group_size)
        k = self.experts.shape[0]
        mean_scale = T.transpose(T.tsum(self.experts, axis=0, keepdims=True)) * (1.0 / k)
        return T.mul(self.sign.astype(self.weight.dtype), mean_scale)

    def lora_delta(self) -> Tensor | None:
        return None if self.lora_a is None else T.matmul(self.lora_b, self.lora_a)

    def effective_weight(self, q: Tensor | None = None) -> Tensor:
        q = self.dequant_weight() if q is None else q
        delta = self.lora_delta()
        return q if delta is None else T.add(q, delta)

    def reg_target(self, position: str, reuse_forward: bool = False) -> Tensor:
        """Weight compared against ``W`` by the preservation penalty.

        With ``reuse_forward`` the graph nodes built by the latest forward
        pass are shared instead of recomputed; parameters must not have
        changed in between.
        """
        cached = self._forward if reuse_forward else None
        if position == "before":
            return cached[0] if cached else self.dequant_weight()
        if position == "after":
            return cached[1] if cached else self.effective_weight()
        raise ValueError(f"lora position must be 'before' or 'after', got {position!r}")

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "mos":
            self._forward = None
            y = mos_linear(x, self.sign, self.experts, self.router)
            delta = self.lora_delta()
            return y if delta is None else T.add(y, T.matmul(x, T.transpose(delta)))
        q = self.dequant_weight()
        w = self.effective_weight(q)
        self._forward = (q, w)
        return T.matmul(x, T.transpose(w))

    # -- rollback support --------------------------------------------------
    def trainable(self) -> list[Tensor]:
        return self.quant_params() + self.lora_params()

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.trainable()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, arr in zip(self.trainable(), snap):
            p.data = arr.copy()
            p.grad = None

    def degenerate_groups(self) -> int:
        if self.kind != "learnable_clip":
            return 0
        return degenerate_groups(self.weight, self.gamma_lo.data, self.gamma_hi.data, self.group_size)

    # -- export ------------------------------------------------------------
    def info(self) -> dict:
        return {"kind": self.kind, "bits": self.bits, "group_size": self.group_size,
                "lora_rank": 0 if self.lora_a is None else self.lora_a.shape[0]}

    def export(self, name: str) -> dict:
        """Container records. Integer codes use one byte per code here;
        :func:`repack` tightens them to the layer's bit width."""
        rec: dict = {}
        if self.kind is None:
            rec[f"{name}.weight"] = self.weight.astype(np.float32)
        elif self.kind in ("rtn", "learnable_clip"):
            if self.kind == "rtn":
                spec = rtn_params(self.weight, self.bits, self.group_size)
                codes = quantize_rtn(self.weight, spec)
            else:
                codes, spec = freeze_learnable(self.weight, self.gamma_lo.data, self.gamma_hi.data,
                                               self.bits, self.group_size)
            rec[f"{name}.weight"] = pack(codes, QuantSpec(8, self.group_size, scale=spec.scale, zero=spec.zero))
        elif self.kind == "dual_binary":
            for tag, b, alpha in (("b1", self.b1, self.alpha1), ("b2", self.b2, self.alpha2)):
                codes = (b.astype(np.int64) + 1) // 2
                spec = QuantSpec(1, self.group_size, scale=2.0 * alpha.data.ravel(),
                                 zero=np.full(alpha.size, 0.5))
                rec[f"{name}.weight.{tag}"] = pack(codes, spec)
        else:
            codes = (self.sign.astype(np.int64) + 1) // 2
            rec[f"{name}.weight.sign"] = pack(codes, QuantSpec(1, None, scale=[2.0], zero=[0.5]))
            rec[f"{name}.mos_experts"] = self.experts.data.astype(np.float32)
            rec[f"{name}.mos_router"] = self.router.data.astype(np.float32)
        if self.lora_a is not None:
            rec[f"{name}.lora_a"] = self.lora_a.data.astype(np.float32)
            rec[f"{name}.lora_b"] = self.lora_b.data.astype(np.float32)
        return rec


def _decode(record) -> np.ndarray:
    if isinstance(record, PackedWeights):
        codes, spec = unpack(record)
        return dequantize(codes, spec)
    return np.asarray(record, dtype=np.float64)


class FrozenLinear:
    """Inference-only layer rebuilt from container records."""

    def __init__(self, weight: np.ndarray, mos: tuple | None = None, lora_delta: np.ndarray | None = None,
                 dtype=np.float32):
        self.mos = None
        if mos is not None:
            sign, experts, router = mos
            self.mos = (sign, Tensor(experts.astype(dtype)), Tensor(router.astype(dtype)))
        self.lora_delta = None if lora_delta is None else Tensor(lora_delta.astype(dtype))
        self.weight = Tensor(np.asarray(weight, dtype=dtype))

    @classmethod
    def from_records(cls, name: str, records: dict, dtype=np.float32) -> "FrozenLinear":
        delta = None
        if f"{name}.lora_a" in records:
            delta = records[f"{name}.lora_b"].astype(np.float64) @ records[f"{name}.lora_a"].astype(np.float64)
        if f"{name}.weight.sign" in records:
            sign = np.where(_decode(records[f"{name}.weight.sign"]) > 0, 1, -1).astype(np.int8)
            experts = records[f"{name}.mos_experts"]
            router = records[f"{name}.mos_router"]
            q = sign * experts.astype(np.float64).mean(axis=0)[:, None]
            return cls(q, mos=(sign, experts, router), lora_delta=delta, dtype=dtype)
        if f"{name}.weight.b1" in records:
            q = _decode(records[f"{name}.weight.b1"]) + _decode(records[f"{name}.weight.b2"])
        else:
            q = _decode(records[f"{name}.weight"])
        if delta is not None:
            q = q + delta
        return cls(q, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mos is not None:
            sign, experts, router = self.mos
            y = mos_linear(x, sign, experts, router)
            return y if self.lora_delta is None else T.add(y, T.matmul(x, T.transpose(self.lora_delta)))
        return T.matmul(x, T.transpose(self.weight))


def repack(records: dict, layer_info: dict) -> dict:
    """Re-encode every integer-coded weight at its layer's true bit width."""
    out = {}
    for key, value in records.items():
        if isinstance(value, PackedWeights) and key.endswith(".weight"):
            layer = key[: -len(".weight")]
            bits = layer_info.get(layer, {}).get("bits", value.bits)
            if value.bits != bits:
                codes, spec = unpack(value)
                value = pack(codes, QuantSpec(bits, spec.group_size, scale=spec.scale, zero=spec.zero))
        out[key] = value
    return out
