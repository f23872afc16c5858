"""Pipeline stages shared by the command line and the tests.

Every stage reads and writes files inside the configured output directory.
Content files (checkpoints, CSV, JSON) depend only on the resolved config and
seed; wall-clock data goes to ``timing/<stage>.json``, which is never hashed.
"""

from __future__ import annotations

import json
import subprocess
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .calibrator import calibrate_model, quantize_model
from .config import ExperimentConfig
from .evaluator import EvalReport, compare, perplexity
from .model import (TextDataset, ToyTransformer, bundled_corpus_path, pretrain, sample_batch,
                    sample_calibration)
from .packing import PackedWeights, read_container, write_container
from .qlinear import FrozenLinear, repack
from .rng import substream
from .saliency import SaliencyMap, compute_saliency

META = "meta"


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, hint: str):
        super().__init__(f"{path} not found; {hint}")
        self.path, self.hint = path, hint


def build_id() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=10)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self._dataset = None
        self._build = None

    # -- paths and shared state ---------------------------------------------
    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def build(self) -> str:
        if self._build is None:
            self._build = build_id()
        return self._build

    @property
    def dataset(self) -> TextDataset:
        if self._dataset is None:
            corpus = self.cfg.data.corpus or bundled_corpus_path()
            self._dataset = TextDataset.from_file(corpus)
        return self._dataset

    def meta(self, kind: str, **extra) -> dict:
        return {"kind": kind, "config": self.cfg.to_dict(), "build": self.build,
                "tokenizer": self.dataset.tokenizer.chars, **extra}

    def _write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return p

    def _write_json(self, name: str, doc) -> Path:
        return self._write_text(name, json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def _timing(self, stage: str, started: float, **extra) -> None:
        self._write_json(f"timing/{stage}.json", {
            "stage": stage, "wall_seconds": time.perf_counter() - started,
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"), **extra})

    def _require(self, name, hint: str) -> Path:
        """``name`` is relative to the output directory unless it is a Path."""
        p = name if isinstance(name, Path) else self.path(name)
        if not p.exists():
            raise MissingArtifact(p, hint)
        return p

    # -- checkpoints --------------------------------------------------------
    def new_model(self) -> ToyTransformer:
        mcfg = self.cfg.model.model_config(self.dataset.tokenizer.vocab_size)
        return ToyTransformer(mcfg, seed=self.cfg.seed)

    def load_model(self, path) -> tuple[ToyTransformer, dict]:
        records = read_container(path)
        meta = records.get(META)
        if not isinstance(meta, dict):
            raise ValueError(f"{path} carries no metadata record")
        if meta["tokenizer"] != self.dataset.tokenizer.chars:
            raise ValueError(f"{path} was built with a different tokenizer than the configured corpus")
        saved = ExperimentConfig.from_dict(meta["config"])
        model = ToyTransformer(saved.model.model_config(len(meta["tokenizer"])), seed=saved.seed)
        if meta["kind"] == "fp":
            model.load_state_dict({k: v for k, v in records.items() if isinstance(v, np.ndarray)})
        else:
            linear = set(model.linear_layers())
            dense = {k: p for k, p in model.named_parameters().items()
                     if not any(k.startswith(n + ".") for n in linear)}
            for k, p in dense.items():
                p.data = np.asarray(records[k]).astype(model.dtype)
            for name in linear:
                model.set_linear(name, FrozenLinear.from_records(name, records, dtype=model.dtype))
        model.requires_grad_(False)
        return model, meta

    def _fp_records(self, model: ToyTransformer) -> dict:
        return {k: v.astype(np.float32) for k, v in model.state_dict().items()}

    def _quantized_records(self, fp_model: ToyTransformer, layer_records: dict, info: dict) -> dict:
        linear = set(info)
        rec = {k: v for k, v in self._fp_records(fp_model).items()
               if not any(k.startswith(n + ".") for n in linear)}
        rec.update(layer_records)
        return rec

    # -- stages ---------------------------------------------------------------
    def run_pretrain(self) -> Path:
        started = time.perf_counter()
        model = self.new_model()
        result = pretrain(model, self.dataset, self.cfg.pretrain_config())
        rec = self._fp_records(model)
        rec[META] = self.meta("fp")
        path = self.path("fp.ulbq")
        path.parent.mkdir(parents=True, exist_ok=True)
        write_container(path, rec)
        self._write_json("pretrain.json", {"build": self.build, "config": self.cfg.to_dict(),
                                           "losses": result.losses})
        self._timing("pretrain", started)
        return path

    def fp_model(self) -> ToyTransformer:
        path = self._require("fp.ulbq", "run the `pretrain` command first")
        return self.load_model(path)[0]

    def run_saliency(self) -> Path:
        started = time.perf_counter()
        model = self.fp_model()
        sc = self.cfg.saliency
        batch = sample_batch(self.dataset, sc.n_samples, sc.seq_len, substream(self.cfg.seed, "saliency"),
                             split=sc.split)
        smap = compute_saliency(model, batch, dataset_id=f"{self._dataset_id()}:{sc.split}")
        rec = smap.to_records()
        rec[META] = self.meta("saliency")
        path = self.path("saliency.ulbq")
        write_container(path, rec)
        self._timing("saliency", started)
        return path

    def load_saliency(self) -> SaliencyMap:
        path = self._require("saliency.ulbq",
                             "variant 'saliency' needs a saliency map: run the `saliency` command first")
        return SaliencyMap.from_records(read_container(path))

    def run_quantize(self, name: str = "quantized") -> Path:
        started = time.perf_counter()
        fp = self.fp_model()
        model = self.fp_model()
        layer_records, info = quantize_model(model, self.cfg.quant, seed=self.cfg.seed)
        rec = self._quantized_records(fp, layer_records, info)
        rec[META] = self.meta("quantized", layers=info, calibrated=False)
        path = self.path(f"{name}.ulbq")
        write_container(path, rec)
        self._timing(f"quantize.{name}", started)
        return path

    def run_calibrate(self, name: str = "calibrated") -> Path:
        started = time.perf_counter()
        ccfg = self.cfg.calibration_config()
        smap = self.load_saliency() if ccfg.variant == "saliency" else None
        fp = self.fp_model()
        model = self.fp_model()
        calib = sample_calibration(self.dataset, ccfg.n_samples, ccfg.seq_len, self.cfg.seed,
                                   split=self.cfg.data.calibration_split)
        layer_records, info, report = calibrate_model(model, calib, ccfg, self.cfg.quant, smap)
        rec = self._quantized_records(fp, layer_records, info)
        rec[META] = self.meta("quantized", layers=info, calibrated=True)
        path = self.path(f"{name}.ulbq")
        write_container(path, rec)
        self._write_text(f"{name}.calibration.csv", report.csv())
        summary = report.summary()
        summary.update(build=self.build, experiment=self.cfg.to_dict(),
                       step_losses=[b.step_losses for b in report.blocks])
        self._write_json(f"{name}.calibration.json", summary)
        self._timing(f"calibrate.{name}", started, calibration_wall_seconds=report.wall_time)
        return path

    def _dataset_id(self) -> str:
        return Path(self.cfg.data.corpus).name if self.cfg.data.corpus else "bundled"

    def run_eval(self, checkpoint: str | None = None, name: str | None = None) -> Path:
        started = time.perf_counter()
        ckpt = self._require(Path(checkpoint) if checkpoint else "fp.ulbq", "pass --checkpoint or run `pretrain` first")
        model_id = name or ckpt.name.split(".")[0]
        model, meta = self.load_model(ckpt)
        reports = []
        for split in self.cfg.data.eval_splits:
            r = perplexity(model, self.dataset.split(split), model.cfg.context_len, model_id=model_id,
                           dataset_id=f"{self._dataset_id()}:{split}", batch_size=self.cfg.eval.batch_size)
            reports.append(r.to_dict())
        path = self._write_json(f"eval_{model_id}.json", {
            "build": self.build, "config": self.cfg.to_dict(), "checkpoint": ckpt.name,
            "checkpoint_build": meta["build"], "reports": reports})
        self._timing(f"eval.{model_id}", started)
        return path

    def run_pack(self, checkpoint: str | None = None) -> Path:
        """Re-encode integer codes at their true bit width and record the sizes."""
        started = time.perf_counter()
        ckpt = self._require(Path(checkpoint) if checkpoint else "calibrated.ulbq", "pass --checkpoint or run `calibrate` first")
        records = read_container(ckpt)
        meta = records.get(META, {})
        if meta.get("kind") != "quantized":
            raise ValueError(f"{ckpt} is not a quantized checkpoint")
        packed = repack(records, meta["layers"])
        stem = ckpt.name.split(".")[0]
        out = self.path(f"{stem}.packed.ulbq")
        write_container(out, packed)
        n_weights = sum(int(np.prod(v.shape)) for k, v in records.items()
                        if isinstance(v, PackedWeights) and k.endswith(".weight"))
        code_bytes = sum(v.nbytes() for k, v in packed.items() if isinstance(v, PackedWeights))
        self._write_json(f"{stem}.pack.json", {
            "build": self.build, "checkpoint": ckpt.name, "packed": out.name,
            "bytes_before": ckpt.stat().st_size, "bytes_after": out.stat().st_size,
            "code_bytes": code_bytes, "quantized_weights": n_weights})
        self._timing(f"pack.{stem}", started)
        return out

    def run_report(self, base: str = "quantized", fp: str = "fp") -> Path:
        started = time.perf_counter()
        files = sorted(self.out.glob("eval_*.json"))
        if not files:
            raise MissingArtifact(self.out / "eval_*.json", "run the `eval` command first")
        reports = [EvalReport.from_dict(r) for f in files
                   for r in json.loads(f.read_text(encoding="utf-8"))["reports"]]
        path = self._write_text("report.csv", compare(reports, base, fp))
        self._timing("report", started)
        return path


def eval_reports(path) -> dict[str, EvalReport]:
    """Reports in an eval file keyed by dataset id."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {r["dataset_id"]: EvalReport.from_dict(r) for r in doc["reports"]}
