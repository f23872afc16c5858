"""Character-level decoder-only transformer, text data and pretraining.

The block layout follows LLaMA (pre-norm RMSNorm, SiLU MLP, no biases) so
each block is one calibration unit. Every projection inside a block is a
swappable layer object, which is how quantized layers are dropped in.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .optim import AdamW
from .rng import substream
from .tensor import Tensor

LINEAR_NAMES = ("q", "k", "v", "o", "mlp_up", "mlp_down")


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


# -- tokenizer / data -------------------------------------------------------

class CharTokenizer:
    def __init__(self, chars: str):
        if len(set(chars)) != len(chars):
            raise ValueError("tokenizer alphabet has duplicates")
        self.chars = chars
        self._index = {c: i for i, c in enumerate(chars)}

    @classmethod
    def from_text(cls, text: str) -> "CharTokenizer":
        return cls("".join(sorted(set(text))))

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self._index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the tokenizer alphabet") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[i] for i in np.asarray(ids).ravel())


def bundled_corpus_path() -> Path:
    return Path(__file__).with_name("data") / "corpus.txt"


@dataclass
class TextDataset:
    """UTF-8 text split into contiguous, disjoint train/valid/test spans."""

    tokens: np.ndarray
    tokenizer: CharTokenizer
    offsets: dict[str, tuple[int, int]]
    source: str = "<memory>"

    @classmethod
    def from_text(cls, text: str, fractions=(0.9, 0.05, 0.05), tokenizer: CharTokenizer | None = None,
                  source: str = "<memory>") -> "TextDataset":
        if not text:
            raise ValueError("empty corpus")
        tok = tokenizer or CharTokenizer.from_text(text)
        ids = tok.encode(text)
        n = len(ids)
        a = int(n * fractions[0])
        b = a + int(n * fractions[1])
        return cls(ids, tok, {"train": (0, a), "valid": (a, b), "test": (b, n)}, source)

    @classmethod
    def from_file(cls, path, **kw) -> "TextDataset":
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), source=path.name, **kw)

    def split(self, name: str) -> np.ndarray:
        if name not in self.offsets:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.offsets)}")
        lo, hi = self.offsets[name]
        return self.tokens[lo:hi]


def _windows(stream: np.ndarray, n: int, length: int, rng: np.random.Generator, split: str) -> np.ndarray:
    if len(stream) < length:
        raise ValueError(f"split {split!r} has {len(stream)} tokens; need at least {length}")
    starts = rng.integers(0, len(stream) - length + 1, size=n)
    return np.stack([stream[s:s + length] for s in starts]) if n else np.zeros((0, length), np.int64)


def sample_batch(dataset: TextDataset, n: int, seq_len: int, rng: np.random.Generator,
                 split: str = "train") -> np.ndarray:
    """``(n, seq_len + 1)`` windows: inputs plus shifted targets."""
    return _windows(dataset.split(split), n, seq_len + 1, rng, split)


def sample_calibration(dataset: TextDataset, n: int, seq_len: int, seed: int,
                       split: str = "train") -> np.ndarray:
    """``(n, seq_len)`` token windows drawn uniformly with a fixed seed."""
    return _windows(dataset.split(split), n, seq_len, substream(seed, "sampling"), split)


# -- model -----------------------------------------------------------------

@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    mlp_ratio: int = 4
    context_len: int = 128
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")


class Linear:
    """Bias-free projection ``y = x @ W^T`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, weight, requires_grad: bool = True):
        self.weight = Tensor(weight, requires_grad=requires_grad)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.weight))


def causal_mask(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)


class Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
        self.cfg = cfg
        self.attn_norm = Tensor(np.ones(d, dtype), requires_grad=True)
        self.mlp_norm = Tensor(np.ones(d, dtype), requires_grad=True)
        std = 0.02
        resid = std / math.sqrt(2 * cfg.n_blocks)
        self.q = Linear((rng.standard_normal((d, d)) * std).astype(dtype))
        self.k = Linear((rng.standard_normal((d, d)) * std).astype(dtype))
        self.v = Linear((rng.standard_normal((d, d)) * std).astype(dtype))
        self.o = Linear((rng.standard_normal((d, d)) * resid).astype(dtype))
        self.mlp_up = Linear((rng.standard_normal((h, d)) * std).astype(dtype))
        self.mlp_down = Linear((rng.standard_normal((d, h)) * resid).astype(dtype))

    def linears(self) -> dict:
        return {name: getattr(self, name) for name in LINEAR_NAMES}

    def attention(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        nh = self.cfg.n_heads
        dh = d // nh
        q = T.transpose(T.reshape(self.q(x), (b, t, nh, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.k(x), (b, t, nh, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self.v(x), (b, t, nh, dh)), (0, 2, 1, 3))
        scores = T.matmul(q, k) * (1.0 / math.sqrt(dh))
        att = T.softmax(T.add(scores, causal_mask(t, x.dtype)))
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        return self.o(y)

    def __call__(self, x: Tensor) -> Tensor:
        eps = self.cfg.norm_eps
        h = x + self.attention(T.rms_norm(x, self.attn_norm, eps))
        return h + self.mlp_down(T.silu(self.mlp_up(T.rms_norm(h, self.mlp_norm, eps))))


class ToyTransformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = substream(seed, "init")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        d = cfg.d_model
        self.tok_emb = Tensor((rng.standard_normal((cfg.vocab_size, d)) * 0.02).astype(dtype), requires_grad=True)
        self.pos_emb = Tensor((rng.standard_normal((cfg.context_len, d)) * 0.02).astype(dtype), requires_grad=True)
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.n_blocks)]
        self.final_norm = Tensor(np.ones(d, dtype), requires_grad=True)
        self.head = Tensor((rng.standard_normal((cfg.vocab_size, d)) * 0.02).astype(dtype), requires_grad=True)

    # parameters are addressed by dotted names, e.g. "blocks.0.q.weight"
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.attn_norm"] = blk.attn_norm
            out[f"blocks.{i}.mlp_norm"] = blk.mlp_norm
            for name, layer in blk.linears().items():
                if isinstance(layer, Linear):
                    out[f"blocks.{i}.{name}.weight"] = layer.weight
        out["final_norm"] = self.final_norm
        out["head"] = self.head
        return out

    def linear_layers(self) -> dict:
        return {f"blocks.{i}.{n}": layer for i, blk in enumerate(self.blocks)
                for n, layer in blk.linears().items()}

    def set_linear(self, name: str, layer) -> None:
        _, i, attr = name.split(".")
        setattr(self.blocks[int(i)], attr, layer)

    def requires_grad_(self, flag: bool) -> "ToyTransformer":
        for p in self.named_parameters().values():
            p.requires_grad = flag
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(self.dtype)

    def embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        t = ids.shape[-1]
        if t > self.cfg.context_len:
            raise ValueError(f"sequence length {t} exceeds context {self.cfg.context_len}")
        pos = T.reshape(T.embedding(self.pos_emb, np.arange(t)), (1, t, self.cfg.d_model))
        return T.embedding(self.tok_emb, ids) + pos

    def logits_from_hidden(self, h: Tensor) -> Tensor:
        return T.matmul(T.rms_norm(h, self.final_norm, self.cfg.norm_eps), T.transpose(self.head))

    def __call__(self, ids: np.ndarray) -> Tensor:
        h = self.embed(ids)
        for blk in self.blocks:
            h = blk(h)
        return self.logits_from_hidden(h)

    def loss(self, batch: np.ndarray) -> Tensor:
        batch = np.asarray(batch)
        return T.cross_entropy(self(batch[:, :-1]), batch[:, 1:])


# -- pretraining ------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 16
    seq_len: int = 128
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup: int = 50
    seed: int = 0


@dataclass
class PretrainResult:
    losses: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def pretrain(model: ToyTransformer, dataset: TextDataset, cfg: PretrainConfig) -> PretrainResult:
    """Next-token training with AdamW and a warmup-cosine schedule."""
    if len(dataset.split("train")) == 0:
        raise ValueError("training split is empty")
    rng = substream(cfg.seed, "pretrain")
    model.requires_grad_(True)
    params = model.named_parameters()
    decay = [p for n, p in params.items() if p.ndim == 2]
    no_decay = [p for n, p in params.items() if p.ndim != 2]
    opt = AdamW([{"params": decay, "lr": cfg.lr, "weight_decay": cfg.weight_decay},
                 {"params": no_decay, "lr": cfg.lr, "weight_decay": 0.0}])
    result = PretrainResult(config=asdict(cfg))
    for step in range(cfg.steps):
        lr = cfg.lr * _schedule(step, cfg.steps, cfg.warmup)
        for _, state in opt.groups:
            state.lr = lr
        batch = sample_batch(dataset, cfg.batch_size, cfg.seq_len, rng)
        loss = model.loss(batch)
        value = loss.item()
        result.losses.append(value)
        if not math.isfinite(value) or value > 1e4:
            raise TrainingDivergence(f"pretraining diverged at step {step} (loss={value})", result.losses)
        opt.zero_grad()
        loss.backward()
        opt.step()
    opt.zero_grad()
    model.requires_grad_(False)
    return result


def _schedule(step: int, total: int, warmup: int) -> float:
    if step < warmup:
        return (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac))
