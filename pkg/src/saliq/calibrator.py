"""Block-wise calibration of quantized linear layers.

Each transformer block is trained in turn to reproduce its full-precision
output. The quantized path is fed by blocks that were already calibrated and
frozen, so errors from lower blocks are visible to the block being trained.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .optim import AdamW
from .qlinear import FrozenLinear, QuantizedLinear
from .quantizers import QuantSpec
from .rng import substream
from .saliency import SaliencyMap, saliency_regularizer
from .tensor import Tensor

VARIANTS = ("none", "naive", "saliency")
POSITIONS = ("before", "after")
DIVERGENCE_LIMIT = 1e6


@dataclass
class QuantConfig:
    bits: int = 2
    group_size: int | None = None
    quantizer: str | None = "learnable_clip"  # None leaves weights unquantized
    lora_rank: int = 4
    n_experts: int = 4

    def __post_init__(self):
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.quantizer is not None:
            QuantSpec(self.bits, self.group_size, self.quantizer)


@dataclass
class CalibrationConfig:
    variant: str = "none"
    lora_position: str = "before"
    coef: float = 1e-2
    coef_mult: float = 1.0
    epochs: int = 20
    batch_size: int = 1
    lr_quant: float = 0.005
    lr_lora: float = 0.0005
    wd_quant: float = 0.1
    wd_lora: float = 0.1
    n_samples: int = 128
    seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lora_position not in POSITIONS:
            raise ValueError(f"lora_position must be one of {POSITIONS}, got {self.lora_position!r}")
        if self.coef < 0:
            raise ValueError("coef must be >= 0")
        if self.coef_mult <= 0:
            raise ValueError("coef_mult must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def coefficient_schedule(coef: float, mult: float, k: int) -> float:
    """Regularizer weight for block ``k`` (0-based)."""
    if k < 0:
        raise ValueError("block index must be >= 0")
    return coef * mult ** k


@dataclass
class BlockLoss:
    total: Tensor
    output: float
    reg: float


def block_loss(block, x_q: Tensor, y_target: np.ndarray, lam: float, variant: str,
               alphas: dict[str, np.ndarray] | None = None, position: str = "before") -> BlockLoss:
    """Output MSE of the quantized block against the full-precision target,
    plus ``lam`` times the summed preservation penalty of its layers.

    ``variant="none"`` builds no penalty term at all.
    """
    out = block(x_q)
    diff = T.sub(out, y_target)
    mse = T.mean(T.square(diff))
    if variant == "none":
        return BlockLoss(mse, float(mse.data), 0.0)
    reg = None
    for name, layer in block.linears().items():
        if not isinstance(layer, QuantizedLinear):
            continue
        alpha = np.ones(layer.shape) if variant == "naive" else alphas[name]
        term = saliency_regularizer(layer.weight, layer.reg_target(position, reuse_forward=True), alpha.astype(layer.weight.dtype))
        reg = term if reg is None else T.add(reg, term)
    if reg is None:
        return BlockLoss(mse, float(mse.data), 0.0)
    total = T.add(mse, T.mul(reg, float(lam)))
    return BlockLoss(total, float(mse.data), float(reg.data))


@dataclass
class BlockReport:
    index: int
    lam: float
    epoch_output: list[float] = field(default_factory=list)
    epoch_reg: list[float] = field(default_factory=list)
    step_losses: list[list[float]] = field(default_factory=list)
    rolled_back: bool = False
    divergence: str = ""
    skipped_steps: int = 0
    degenerate_groups: int = 0
    init_output_loss: float = float("nan")
    final_output_loss: float = float("nan")


@dataclass
class CalibrationReport:
    config: dict
    quant: dict
    blocks: list[BlockReport] = field(default_factory=list)
    wall_time: float = 0.0

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "epoch", "output_loss", "reg_loss", "lambda"])
        for b in self.blocks:
            for e, (o, r) in enumerate(zip(b.epoch_output, b.epoch_reg)):
                w.writerow([b.index, e, repr(o), repr(r), repr(b.lam)])
        return buf.getvalue()

    def summary(self) -> dict:
        """Content-stable summary; wall time is kept out on purpose."""
        return {
            "config": self.config,
            "quant": self.quant,
            "blocks": [{"block": b.index, "lambda": b.lam, "rolled_back": b.rolled_back,
                        "divergence": b.divergence, "skipped_steps": b.skipped_steps,
                        "degenerate_groups": b.degenerate_groups,
                        "init_output_loss": _finite_or_none(b.init_output_loss),
                        "final_output_loss": _finite_or_none(b.final_output_loss)} for b in self.blocks],
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def _forward_batched(block, x: np.ndarray, batch: int = 16) -> np.ndarray:
    return np.concatenate([block(Tensor(x[i:i + batch])).data for i in range(0, len(x), batch)])


def _output_mse(block, x: np.ndarray, y: np.ndarray) -> float:
    out = _forward_batched(block, x)
    return float(np.mean((out.astype(np.float64) - y) ** 2))


def quantize_block(block, prefix: str, qcfg: QuantConfig, lora: bool, seed: int,
                   kind: str | None = None) -> dict[str, QuantizedLinear]:
    kind = qcfg.quantizer if kind is None else kind
    layers = {}
    for name, lin in block.linears().items():
        full = f"{prefix}.{name}"
        layers[name] = QuantizedLinear(lin.weight.data, qcfg.bits, qcfg.group_size, kind,
                                       lora_rank=qcfg.lora_rank if lora else 0, n_experts=qcfg.n_experts,
                                       rng=substream(seed, f"init.{full}"))
    return layers


def freeze_layers(block, prefix: str, layers: dict[str, QuantizedLinear], dtype) -> dict:
    """Replace trained layers by their exported inference form; return the records."""
    records = {}
    for name, layer in layers.items():
        full = f"{prefix}.{name}"
        rec = layer.export(full)
        records.update(rec)
        setattr(block, name, FrozenLinear.from_records(full, rec, dtype=dtype))
    return records


def layer_info(layers: dict[str, QuantizedLinear], prefix: str) -> dict:
    return {f"{prefix}.{n}": l.info() for n, l in layers.items()}


def quantize_model(model, qcfg: QuantConfig, seed: int = 0) -> tuple[dict, dict]:
    """Quantize every block linear in place without training or LoRA.

    Untrained learnable clipping is plain round-to-nearest, so that kind is
    quantized with RTN here.
    """
    kind = "rtn" if qcfg.quantizer == "learnable_clip" else qcfg.quantizer
    records, info = {}, {}
    for i, blk in enumerate(model.blocks):
        prefix = f"blocks.{i}"
        layers = quantize_block(blk, prefix, qcfg, lora=False, seed=seed, kind=kind)
        info.update(layer_info(layers, prefix))
        records.update(freeze_layers(blk, prefix, layers, model.dtype))
    return records, info


def calibrate_model(model, calib_tokens: np.ndarray, cfg: CalibrationConfig, qcfg: QuantConfig,
                    saliency: SaliencyMap | None = None) -> tuple[dict, dict, CalibrationReport]:
    """Quantize and calibrate ``model`` in place, block by block.

    ``calib_tokens`` is an ``(n, seq_len)`` array of input ids. Returns the
    container records of the quantized layers, per-layer info and the report.
    """
    if cfg.variant == "saliency" and saliency is None:
        raise ValueError("variant 'saliency' needs a saliency map")
    started = time.perf_counter()
    report = CalibrationReport(config=asdict(cfg), quant=asdict(qcfg))
    tokens = np.asarray(calib_tokens)
    x_fp = model.embed(tokens).data
    x_q = x_fp.copy()
    records, info = {}, {}
    for k, blk in enumerate(model.blocks):
        prefix = f"blocks.{k}"
        y_fp = _forward_batched(blk, x_fp).astype(np.float64)
        lam = coefficient_schedule(cfg.coef, cfg.coef_mult, k)
        layers = quantize_block(blk, prefix, qcfg, lora=True, seed=cfg.seed)
        for name, layer in layers.items():
            setattr(blk, name, layer)
        alphas = None
        if cfg.variant == "saliency":
            alphas = {name: np.asarray(saliency[f"{prefix}.{name}"]) for name in layers}
        br = BlockReport(k, lam)
        br.init_output_loss = _output_mse(blk, x_q, y_fp)
        _train_block(blk, layers, x_q, y_fp.astype(x_q.dtype), lam, alphas, cfg, br)
        br.degenerate_groups = sum(l.degenerate_groups() for l in layers.values())
        info.update(layer_info(layers, prefix))
        records.update(freeze_layers(blk, prefix, layers, model.dtype))
        br.final_output_loss = _output_mse(blk, x_q, y_fp)
        report.blocks.append(br)
        x_q = _forward_batched(blk, x_q)
        x_fp = y_fp.astype(x_fp.dtype)
    report.wall_time = time.perf_counter() - started
    return records, info, report


def _train_block(blk, layers: dict[str, QuantizedLinear], x_q: np.ndarray, y: np.ndarray, lam: float,
                 alphas, cfg: CalibrationConfig, br: BlockReport) -> None:
    quant = [p for l in layers.values() for p in l.quant_params()]
    lora = [p for l in layers.values() for p in l.lora_params()]
    groups = []
    if quant:
        groups.append({"params": quant, "lr": cfg.lr_quant, "weight_decay": cfg.wd_quant})
    if lora:
        groups.append({"params": lora, "lr": cfg.lr_lora, "weight_decay": cfg.wd_lora})
    if not groups:
        return
    opt = AdamW(groups)
    snaps = {n: l.snapshot() for n, l in layers.items()}
    rng = substream(cfg.seed, f"calibrate.block{br.index}")
    n = len(x_q)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        step_losses, outs, regs = [], [], []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = block_loss(blk, Tensor(x_q[idx]), y[idx], lam, cfg.variant, alphas, cfg.lora_position)
            value = float(loss.total.data)
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                for name, layer in layers.items():
                    layer.restore(snaps[name])
                br.rolled_back = True
                br.divergence = f"epoch {epoch} step {s // cfg.batch_size}: loss={value!r}"
                br.step_losses.append(step_losses)
                br.skipped_steps = opt.skipped
                return
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            step_losses.append(value)
            outs.append(loss.output)
            regs.append(loss.reg)
        br.step_losses.append(step_losses)
        br.epoch_output.append(float(np.mean(outs)))
        br.epoch_reg.append(float(np.mean(regs)))
    opt.zero_grad()
    br.skipped_steps = opt.skipped
