"""Per-weight saliency from squared gradients, and the weighted
weight-preservation penalty built on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class SaliencyError(RuntimeError):
    pass


@dataclass
class SaliencyMap:
    """Non-negative importance per weight, one matrix per quantizable layer."""

    maps: dict[str, np.ndarray]
    dataset_id: str = ""
    n_samples: int = 0
    seq_len: int = 0
    normalization: str = "mean1"
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.maps[name]

    def __contains__(self, name: str) -> bool:
        return name in self.maps

    def metadata(self) -> dict:
        return {"dataset_id": self.dataset_id, "n_samples": self.n_samples, "seq_len": self.seq_len,
                "normalization": self.normalization, "dropped": self.dropped, "layers": sorted(self.maps),
                **self.meta}

    def to_records(self) -> dict:
        rec: dict = {f"{k}.saliency": v.astype(np.float32) for k, v in sorted(self.maps.items())}
        rec["saliency.meta"] = self.metadata()
        return rec

    @classmethod
    def from_records(cls, records: dict) -> "SaliencyMap":
        if "saliency.meta" not in records:
            raise KeyError("records hold no saliency map")
        meta = dict(records["saliency.meta"])
        layers = meta.pop("layers")
        maps = {k: np.asarray(records[f"{k}.saliency"], dtype=np.float64) for k in layers}
        known = {k: meta.pop(k) for k in ("dataset_id", "n_samples", "seq_len", "normalization", "dropped")
                 if k in meta}
        return cls(maps, meta=meta, **known)


def normalize_mean_one(raw: np.ndarray) -> np.ndarray:
    """Scale to mean 1; an all-zero matrix stays zero."""
    raw = np.asarray(raw, dtype=np.float64)
    m = raw.mean()
    return raw / m if m > 0 else np.zeros_like(raw)


def squared_gradient_saliency(loss_fn: Callable[[object], Tensor], params: dict[str, Tensor],
                              samples: Iterable, normalize: bool = True) -> tuple[dict[str, np.ndarray], int, int]:
    """Mean over samples of the squared gradient of ``loss_fn(sample)``.

    Samples whose gradients contain NaN or inf are skipped. Returns
    ``(maps, used, dropped)``.
    """
    acc = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
    used = dropped = 0
    for sample in samples:
        for p in params.values():
            p.grad = None
        loss = loss_fn(sample)
        loss.backward()
        grads = {k: (np.zeros(p.shape) if p.grad is None else np.asarray(p.grad, dtype=np.float64))
                 for k, p in params.items()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            dropped += 1
            continue
        for k, g in grads.items():
            acc[k] += g * g
        used += 1
    for p in params.values():
        p.grad = None
    if used == 0:
        raise SaliencyError(f"all {dropped} calibration samples produced non-finite gradients")
    maps = {k: a / used for k, a in acc.items()}
    if normalize:
        maps = {k: normalize_mean_one(a) for k, a in maps.items()}
    return maps, used, dropped


def compute_saliency(model, batch: np.ndarray, loss_scale: float = 1.0, dataset_id: str = "",
                     normalize: bool = True) -> SaliencyMap:
    """Saliency of every block linear weight under next-token cross-entropy.

    ``batch`` holds ``(n, seq_len + 1)`` token rows; each row is one sample.
    """
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0 or batch.shape[1] < 2:
        raise ValueError(f"saliency batch must be (n >= 1, seq_len + 1 >= 2), got {batch.shape}")
    layers = model.linear_layers()
    params = {name: layer.weight for name, layer in layers.items()}
    saved = {name: p.requires_grad for name, p in model.named_parameters().items()}
    model.requires_grad_(False)
    for p in params.values():
        p.requires_grad = True
    try:
        maps, used, dropped = squared_gradient_saliency(
            lambda row: model.loss(row[None]) * loss_scale, params, batch, normalize=normalize)
    finally:
        for name, p in model.named_parameters().items():
            p.requires_grad = saved[name]
    return SaliencyMap(maps, dataset_id=dataset_id, n_samples=used, seq_len=batch.shape[1] - 1,
                       normalization="mean1" if normalize else "raw", dropped=dropped)


def saliency_regularizer(w, w_target, alpha) -> Tensor:
    """``sum(alpha * (w - w_target)**2)``; differentiable in every Tensor input."""
    shapes = [np.shape(x.data if isinstance(x, Tensor) else x) for x in (w, w_target, alpha)]
    if not shapes[0] == shapes[1] == shapes[2]:
        raise ShapeError(f"saliency_regularizer: shapes {shapes[0]}, {shapes[1]}, {shapes[2]} differ")
    diff = T.sub(w, w_target)
    return T.tsum(T.mul(alpha, T.square(diff)))
