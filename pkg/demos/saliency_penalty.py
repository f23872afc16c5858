"""Squared-gradient saliency on a briefly trained toy model, and how the
weighted preservation penalty differs from the plain squared distance."""

import numpy as np

from saliq.model import ModelConfig, PretrainConfig, TextDataset, ToyTransformer, bundled_corpus_path, \
    pretrain, sample_batch
from saliq.quantizers import rtn
from saliq.rng import substream
from saliq.saliency import compute_saliency, saliency_regularizer

data = TextDataset.from_file(bundled_corpus_path())
model = ToyTransformer(ModelConfig(data.tokenizer.vocab_size, d_model=32, n_heads=2, context_len=64), seed=0)
result = pretrain(model, data, PretrainConfig(steps=150, batch_size=8, seq_len=64))
print(f"pretraining loss {result.losses[0]:.3f} -> {result.losses[-1]:.3f}")

batch = sample_batch(data, 16, 64, substream(0, "saliency"))
sal = compute_saliency(model, batch, dataset_id="bundled:train")

print("\nlayer              max alpha  share of mass in top 1% of weights")
for name, alpha in sal.maps.items():
    top = np.sort(alpha.ravel())[::-1]
    k = max(1, top.size // 100)
    print(f"{name:<18} {alpha.max():>9.1f}  {top[:k].sum() / top.sum():.1%}")

print("\nlayer              plain L2   saliency-weighted (2-bit RTN)")
for name, layer in model.linear_layers().items():
    w = layer.weight.data.astype(np.float64)
    q = rtn(w, 2)[0]
    plain = saliency_regularizer(w, q, np.ones_like(w)).item()
    weighted = saliency_regularizer(w, q, sal[name]).item()
    print(f"{name:<18} {plain:>8.4f}   {weighted:.4f}")
