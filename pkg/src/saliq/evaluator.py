"""Perplexity and comparative reporting."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    token_count: int
    perplexity: float
    nll_digest: str
    nan_encountered: bool = False
    mean_nll: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN literal
        for k in ("perplexity", "mean_nll"):
            if not math.isfinite(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        for k in ("perplexity", "mean_nll"):
            if d.get(k) is None:
                d[k] = float("nan")
        return cls(**d)


def perplexity_from_nll(nll: np.ndarray) -> float:
    nll = np.asarray(nll, dtype=np.float64)
    return float(np.exp(nll.sum() / nll.size))


def token_nll(model: Callable, tokens: np.ndarray, context_len: int, batch_size: int = 16) -> np.ndarray:
    """Per-token NLL (float64) for every token after the first.

    The stream is cut into non-overlapping windows of ``context_len``
    predictions; window ``i`` reads ``tokens[i*C : i*C + C]`` and predicts
    the next token at each position.
    """
    return _token_nll_ext(model, tokens, context_len, batch_size).astype(np.float64)


def _token_nll_ext(model, tokens, context_len, batch_size) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size < 2:
        raise ValueError("perplexity needs at least two tokens")
    n_pred = tokens.size - 1
    starts = list(range(0, n_pred, context_len))
    out = []
    full = [s for s in starts if s + context_len <= n_pred]
    tail = [s for s in starts if s + context_len > n_pred]
    for i in range(0, len(full), batch_size):
        chunk = full[i:i + batch_size]
        x = np.stack([tokens[s:s + context_len] for s in chunk])
        y = np.stack([tokens[s + 1:s + context_len + 1] for s in chunk])
        out.append(_window_nll(model, x, y))
    for s in tail:
        out.append(_window_nll(model, tokens[s:n_pred][None], tokens[s + 1:n_pred + 1][None]))
    return np.concatenate(out)


def _window_nll(model, x, y) -> np.ndarray:
    """Flattened NLL of one batch of windows in extended precision.

    ``exp(mean NLL)`` loses a few ulps in float64 (``exp(log(59)) != 59``);
    the longer mantissa keeps that error far below float64 resolution.
    """
    logits = model(x)
    if isinstance(logits, Tensor):
        logits = logits.data
    z = np.asarray(logits).astype(np.longdouble)
    top = z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = top[..., 0] + np.log(np.exp(z - top).sum(axis=-1))
    return (lse - np.take_along_axis(z, y[..., None], axis=-1)[..., 0]).ravel()


def perplexity(model: Callable, tokens: np.ndarray, context_len: int, model_id: str = "model",
               dataset_id: str = "stream", batch_size: int = 16) -> EvalReport:
    nll = _token_nll_ext(model, tokens, context_len, batch_size)
    digest = hashlib.sha256(np.ascontiguousarray(nll, dtype="<f8").tobytes()).hexdigest()
    finite = bool(np.all(np.isfinite(nll)))
    mean = nll.sum() / nll.size
    mean_nll = float(mean) if finite else float("nan")
    ppl = float(np.exp(mean)) if finite else float("nan")
    return EvalReport(model_id, dataset_id, int(nll.size), ppl, digest, not finite, mean_nll)


def gap_recovered(base: float, method: float, fp: float) -> float:
    """Percent of the baseline-to-full-precision gap closed by ``method``."""
    if base == fp:
        raise ValueError("baseline equals full precision; gap is zero")
    return (base - method) / (base - fp) * 100.0


def compare(reports: list[EvalReport], base_id: str, fp_id: str) -> str:
    """CSV with one row per model, one PPL column per dataset and one
    gap-recovered column per dataset."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    table: dict[str, dict[str, float]] = {}
    for r in reports:
        table.setdefault(r.model_id, {})[r.dataset_id] = r.perplexity
    datasets = sorted({r.dataset_id for r in reports})
    for model_id, row in table.items():
        if sorted(row) != datasets:
            raise ValueError(f"{model_id} was evaluated on {sorted(row)}, others on {datasets}")
    for needed in (base_id, fp_id):
        if needed not in table:
            raise KeyError(f"no report for {needed!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config"] + [f"ppl_{d}" for d in datasets] + [f"gap_recovered_pct_{d}" for d in datasets])
    for model_id, row in table.items():
        gaps = []
        for d in datasets:
            try:
                gaps.append(f"{gap_recovered(table[base_id][d], row[d], table[fp_id][d]):.4f}")
            except ValueError:
                gaps.append("")
        w.writerow([model_id] + [f"{row[d]:.6f}" for d in datasets] + gaps)
    return buf.getvalue()
