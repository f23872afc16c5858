import contextlib
import hashlib
import io
import time

import numpy as np
import pytest

from saliq.config import ExperimentConfig
from saliq.experiment import Pipeline, eval_reports
from saliq.model import ModelConfig, TextDataset, ToyTransformer, bundled_corpus_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus():
    return TextDataset.from_file(bundled_corpus_path())


@pytest.fixture
def tiny_model(corpus):
    cfg = ModelConfig(corpus.tokenizer.vocab_size, d_model=16, n_heads=2, n_blocks=2, mlp_ratio=2,
                      context_len=32)
    return ToyTransformer(cfg, seed=3, dtype=np.float64).requires_grad_(False)


def tiny_config(out) -> ExperimentConfig:
    """A few-second pipeline configuration for command-level tests."""
    return ExperimentConfig.from_dict({
        "out": str(out),
        "model": {"d_model": 16, "n_heads": 2, "mlp_ratio": 2, "context_len": 32},
        "pretrain": {"steps": 20, "batch_size": 4, "seq_len": 32},
        "saliency": {"n_samples": 4, "seq_len": 32},
        "calibration": {"epochs": 2, "n_samples": 6, "seq_len": 32},
    })


def content_hashes(out) -> dict[str, str]:
    """sha256 of every output file except the wall-clock records under timing/."""
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.relative_to(out).parts[0] != "timing"}


TINY_PIPELINE = [
    ["pretrain"],
    ["saliency"],
    ["quantize", "--quantizer", "rtn", "--name", "rtn"],
    ["quantize", "--quantizer", "rtn", "--bits", "8", "--name", "rtn8"],
    ["calibrate", "--variant", "none", "--name", "none"],
    ["calibrate", "--variant", "saliency", "--name", "sal"],
    ["eval"],
    ["eval", "--checkpoint", "{out}/rtn.ulbq"],
    ["eval", "--checkpoint", "{out}/rtn8.ulbq"],
    ["eval", "--checkpoint", "{out}/none.ulbq"],
    ["eval", "--checkpoint", "{out}/sal.ulbq"],
    ["pack", "--checkpoint", "{out}/sal.ulbq"],
    ["report", "--base", "rtn"],
]


def write_tiny_config(out):
    path = out / "config.json"
    path.write_text(tiny_config(out / "run").to_json())
    return path


def run_tiny_pipeline(base, config=None):
    """Run every command of TINY_PIPELINE through the CLI; returns the output directory."""
    from saliq.cli import main

    config = config or write_tiny_config(base)
    out = base / "run"
    err = io.StringIO()
    with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(err):
        for step in TINY_PIPELINE:
            argv = [a.format(out=out) for a in step] + ["--config", str(config)]
            if main(argv) != 0:
                raise RuntimeError(f"{step} failed: {err.getvalue()}")
    return out


class ReferenceRun:
    """The seeded toy experiment: pretrain, saliency, RTN baselines and two
    calibrated variants, all evaluated on the held-out splits."""

    def __init__(self, out):
        started = time.perf_counter()
        base = ExperimentConfig(out=str(out))
        self.base = base
        self.out = out
        pipe = Pipeline(base)
        pipe.run_pretrain()
        pipe.run_saliency()
        self.evals = {"fp": eval_reports(pipe.run_eval())}
        rtn = base.with_overrides({"quant.quantizer": "rtn"})
        for name, cfg in (("rtn", rtn), ("rtn8", rtn.with_overrides({"quant.bits": 8}))):
            path = Pipeline(cfg).run_quantize(name)
            self.evals[name] = eval_reports(Pipeline(cfg).run_eval(str(path)))
        self.calibration = {}
        for variant in ("none", "saliency"):
            cfg = base.with_overrides({"calibration.variant": variant})
            p = Pipeline(cfg)
            path = p.run_calibrate(f"apiq_{variant}")
            self.calibration[variant] = p.path(f"apiq_{variant}.calibration.json")
            self.evals[f"apiq_{variant}"] = eval_reports(p.run_eval(str(path)))
        self.seconds = time.perf_counter() - started

    def ppl(self, name: str, split: str = "test") -> float:
        return self.evals[name][f"bundled:{split}"].perplexity


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    return ReferenceRun(tmp_path_factory.mktemp("reference"))


# one line per acceptance criterion, echoed after the run so it lands in the log
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)
