"""The full command pipeline on a small configuration: pretrain, saliency,
RTN baseline, two calibrated variants, evaluation and the comparison table.

Usage: python demos/toy_pipeline.py [OUT_DIR]
"""

import sys
import tempfile
from pathlib import Path

from saliq.cli import main

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="saliq-demo-"))
config = out / "config.json"
out.mkdir(parents=True, exist_ok=True)
config.write_text("""{
  "out": "%s",
  "model": {"d_model": 32, "n_heads": 2},
  "pretrain": {"steps": 300, "batch_size": 8, "seq_len": 64},
  "saliency": {"n_samples": 16, "seq_len": 64},
  "calibration": {"epochs": 4, "n_samples": 32, "seq_len": 64}
}""" % out)

steps = [
    ["pretrain"],
    ["saliency"],
    ["quantize", "--quantizer", "rtn", "--name", "rtn"],
    ["calibrate", "--variant", "none", "--name", "apiq_none"],
    ["calibrate", "--variant", "saliency", "--name", "apiq_saliency"],
    ["eval"],
    ["eval", "--checkpoint", str(out / "rtn.ulbq")],
    ["eval", "--checkpoint", str(out / "apiq_none.ulbq")],
    ["eval", "--checkpoint", str(out / "apiq_saliency.ulbq")],
    ["pack", "--checkpoint", str(out / "apiq_saliency.ulbq")],
    ["report", "--base", "rtn"],
]
for step in steps:
    if main(step + ["--config", str(config)]) != 0:
        sys.exit(1)

print()
print((out / "report.csv").read_text())
