"""Reconstruction error of each quantizer on one Gaussian weight matrix,
and the storage cost once the codes are bit-packed."""

import numpy as np

from saliq.packing import pack
from saliq.quantizers import (dual_binarize, fake_quant_learnable, init_gates, quantize_rtn,
                              quantize_symmetric, rtn, rtn_params)
from saliq.tensor import Tensor

rng = np.random.default_rng(0)
w = rng.normal(size=(64, 256))

print("bits  group    RTN MSE     packed bytes")
for bits in (1, 2, 3, 4, 8):
    for gs in (None, 64):
        w_hat, spec = rtn(w, bits, gs)
        packed = pack(quantize_rtn(w, rtn_params(w, bits, gs)), spec)
        print(f"{bits:>4}  {str(gs or 'matrix'):>6}  {np.mean((w - w_hat) ** 2):.3e}  {packed.nbytes():>8}")

# learnable clipping starts slightly inside the range (sigmoid(4) ~ 0.982)
lo, hi = init_gates(w, 64)
clipped = fake_quant_learnable(w, Tensor(lo), Tensor(hi), 2, 64).data
print("\n2-bit, groups of 64")
print(f"  RTN                {np.mean((w - rtn(w, 2, 64)[0]) ** 2):.4f}")
print(f"  learnable clip     {np.mean((w - clipped) ** 2):.4f}")
db = dual_binarize(w, 64)
print(f"  dual binarization  {np.mean((w - db.w_hat) ** 2):.4f}")
sym = np.concatenate([quantize_symmetric(g, 2) for g in w.reshape(-1, 64)]).reshape(w.shape)
print(f"  symmetric RTN      {np.mean((w - sym) ** 2):.4f}")

spec = rtn_params(w, 2, 64)
print(f"\nfloat32 matrix: {w.size * 4} bytes, 2-bit packed with its group table: "
      f"{pack(quantize_rtn(w, spec), spec).nbytes()} bytes")
