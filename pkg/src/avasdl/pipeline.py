"""Staged, reproducible runs: simulate -> extract -> train -> evaluate -> plot.

Every stage writes into ``<out>/<stage>/`` plus a ``stage.json`` record
(inputs hash, outputs, wall time).  A stage whose inputs hash matches its
previous record, with all outputs still present, is skipped.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import audio_io
from .features import MultichannelClip, assemble_features, mel_filterbank, split_segments
from .labels import (FrameLabel, FramePrediction, LabelFormatError, labels_to_csv, predictions_to_csv,
                     read_labels, read_predictions)
from .metrics import MetricsError, MetricsReport, curve_to_csv, evaluate, pr_curve_svg
from .model import ModelConfig, ModelError, load_checkpoint
from .rig import GeometryError, RigConfig, load_rig, rig_to_ini
from .sim import SceneError, generate_corpus, read_manifest
from .training import TrainConfig, TrainingError, _stack, load_segments, set_deterministic, train

log = logging.getLogger(__name__)

STAGES = ("simulate", "extract", "train", "evaluate", "plot")


class ConfigError(ValueError):
    """Invalid or unknown configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or malformed input data or artifacts (CLI exit code 3)."""


DATA_ERRORS = (DataError, SceneError, LabelFormatError, MetricsError, TrainingError,
               audio_io.AudioFormatError, FileNotFoundError)


@dataclass
class MetricOptions:
    tolerance_px: float = 89.0
    n_thresholds: int = 101
    image_width: int = 2448
    ad_threshold: float = 0.5
    camera: str = "all"  # camera id used for evaluation, or "all"


@dataclass
class RunConfig:
    out_dir: Path
    rig: str = "default"
    corpus_dir: Path | None = None
    seed: int = 0
    n_scenes: int = 12
    scene_duration: float = 4.0
    occlusion_rate: float = 0.2
    single_thread: bool = True
    predictions: Path | None = None
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)

    @property
    def corpus(self) -> Path:
        return self.corpus_dir or self.out_dir / "corpus"

    def load_rig(self) -> RigConfig:
        try:
            return load_rig(self.rig)
        except (GeometryError, OSError) as exc:
            raise ConfigError(f"rig {self.rig}: {exc}") from exc

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed), train=replace(self.train, seed=seed))


_RUN_KEYS = {"rig", "corpus_dir", "out_dir", "seed", "n_scenes", "scene_duration", "occlusion_rate",
             "single_thread", "predictions"}


def _typed(cls, section: configparser.SectionProxy, skip=()) -> dict:
    types = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        default = types[key].default
        kind = type(default) if default is not None else str
        try:
            if kind is bool:
                out[key] = section.getboolean(key)
            elif kind is int:
                out[key] = int(raw)
            elif kind is float:
                out[key] = float(raw)
            else:
                out[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from exc
    return out


def parse_run_config(text: str, base_dir: Path | str = ".", out_dir: Path | str | None = None,
                     seed: int | None = None) -> RunConfig:
    """Parse an INI run config; unknown sections or keys are rejected."""
    base = Path(base_dir)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - {"run", "model", "train", "metrics"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    run = cp["run"] if "run" in cp else {}
    bad = set(run) - _RUN_KEYS
    if bad:
        raise ConfigError(f"unknown keys in [run]: {sorted(bad)}")

    def path(key):
        v = run.get(key)
        if v is None or v.strip() in ("", "none"):
            return None
        p = Path(v.strip())
        return p if p.is_absolute() else base / p

    try:
        model_kw = {}
        preset = "toy"
        if "model" in cp:
            preset = cp["model"].get("preset", "toy")
            model_kw = _typed(ModelConfig, cp["model"], skip=("preset",))
        if preset not in ("toy", "paper"):
            raise ConfigError(f"unknown model preset {preset!r}")
        model = (ModelConfig.toy if preset == "toy" else ModelConfig.paper)(**model_kw)
        train_cfg = TrainConfig(**_typed(TrainConfig, cp["train"])) if "train" in cp else TrainConfig()
        metrics = MetricOptions(**_typed(MetricOptions, cp["metrics"])) if "metrics" in cp else MetricOptions()
        cfg = RunConfig(
            out_dir=Path(out_dir) if out_dir is not None else (path("out_dir") or base / "run"),
            rig=str(path("rig")) if run.get("rig", "default").strip() != "default" else "default",
            corpus_dir=path("corpus_dir"),
            seed=int(run.get("seed", 0)),
            n_scenes=int(run.get("n_scenes", 12)),
            scene_duration=float(run.get("scene_duration", 4.0)),
            occlusion_rate=float(run.get("occlusion_rate", 0.2)),
            single_thread=str(run.get("single_thread", "true")).strip().lower() in ("1", "true", "yes", "on"),
            predictions=path("predictions"),
            model=model, train=train_cfg, metrics=metrics,
        )
    except (ModelError, TrainingError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if metrics.camera != "all" and not metrics.camera.isdigit():
        raise ConfigError(f"metrics camera must be an id or 'all', got {metrics.camera!r}")
    if cfg.rig != "default" and not Path(cfg.rig).exists():
        raise ConfigError(f"rig file {cfg.rig} does not exist")
    if cfg.predictions is not None and not cfg.predictions.exists():
        raise ConfigError(f"predictions file {cfg.predictions} does not exist")
    # one seed drives every seeded component
    return cfg.with_seed(seed if seed is not None else cfg.seed)


def load_run_config(path: str | Path | None, out_dir=None, seed=None) -> RunConfig:
    if path is None:
        cfg = RunConfig(out_dir=Path(out_dir or "run"))
        return cfg.with_seed(seed if seed is not None else cfg.seed)
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_run_config(p.read_text(), p.parent, out_dir, seed)


# -- stage bookkeeping ---------------------------------------------------------------

def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\0")
    return h.hexdigest()


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stage_record_path(cfg: RunConfig, stage: str) -> Path:
    return cfg.out_dir / stage / "stage.json"


def _up_to_date(cfg: RunConfig, stage: str, inputs_hash: str) -> bool:
    rec_path = _stage_record_path(cfg, stage)
    if not rec_path.exists():
        return False
    rec = json.loads(rec_path.read_text())
    return rec.get("inputs_hash") == inputs_hash and all((cfg.out_dir / o).exists() for o in rec["outputs"])


def _record(cfg: RunConfig, stage: str, inputs_hash: str, outputs: Iterable[Path], started: float) -> None:
    rec = {"stage": stage, "inputs_hash": inputs_hash,
           "outputs": sorted(str(Path(o).relative_to(cfg.out_dir)) if Path(o).is_relative_to(cfg.out_dir)
                             else str(o) for o in outputs),
           "wall_time_s": round(time.time() - started, 3)}
    path = _stage_record_path(cfg, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    run_manifest = cfg.out_dir / "manifest.json"
    stages = json.loads(run_manifest.read_text()) if run_manifest.exists() else {}
    stages[stage] = rec
    run_manifest.write_text(json.dumps(stages, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what} ({path}); {hint}")
    return path


# -- stages ------------------------------------------------------------------------

def stage_simulate(cfg: RunConfig) -> bool:
    rig = cfg.load_rig()
    h = _sha("simulate", rig_to_ini(rig), cfg.n_scenes, cfg.seed, cfg.scene_duration, cfg.occlusion_rate)
    manifest = cfg.corpus / "manifest.jsonl"
    if _up_to_date(cfg, "simulate", h) and manifest.exists():
        return False
    t0 = time.time()
    generate_corpus(rig, cfg.n_scenes, cfg.seed, cfg.corpus, cfg.scene_duration, cfg.occlusion_rate)
    _record(cfg, "simulate", h, [manifest], t0)
    return True


def stage_extract(cfg: RunConfig) -> bool:
    rig = cfg.load_rig()
    manifest = _require(cfg.corpus / "manifest.jsonl", "corpus manifest", "run the 'simulate' stage first")
    h = _sha("extract", _file_sha(manifest), rig_to_ini(rig))
    if _up_to_date(cfg, "extract", h):
        return False
    t0 = time.time()
    fb = mel_filterbank()
    outputs = []
    for rec in read_manifest(manifest):
        scene_dir = cfg.corpus / rec["scene_id"]
        samples, sr = audio_io.read_wav(cfg.corpus / rec["audio"])
        if samples.shape[0] != 16 or sr != 48000:
            raise DataError(f"{rec['audio']}: expected 16 channels at 48 kHz, got {samples.shape[0]} at {sr}")
        for old in scene_dir.glob("features_*.bin"):
            old.unlink()
        for k, seg in enumerate(split_segments(samples)):
            out = scene_dir / f"features_{k:03d}.bin"
            audio_io.write_blob(out, assemble_features(MultichannelClip(seg), rig, fb).values.astype(np.float32))
            outputs.append(out)
    _record(cfg, "extract", h, outputs, t0)
    return True


def _train_hash(cfg: RunConfig, manifest: Path) -> str:
    return _sha("train", _file_sha(manifest), json.dumps(cfg.model.to_dict(), sort_keys=True),
                json.dumps(cfg.train.__dict__, sort_keys=True), cfg.single_thread)


def stage_train(cfg: RunConfig) -> bool:
    rig = cfg.load_rig()
    manifest = _require(cfg.corpus / "manifest.jsonl", "corpus manifest", "run the 'simulate' stage first")
    h = _train_hash(cfg, manifest)
    if _up_to_date(cfg, "train", h):
        return False
    t0 = time.time()
    set_deterministic(cfg.single_thread)
    out = cfg.out_dir / "train"
    train(cfg.model, cfg.train, manifest, rig, out_dir=out)
    _record(cfg, "train", h, [out / "checkpoint.bin", out / "history.csv"], t0)
    return True


def predict_segments(net, segments, rig: RigConfig, cameras: list[int]):
    """Run the model over ``segments`` for each camera; returns (predictions, labels).

    Frame indices are made unique across scenes by offsetting each scene by
    the number of frames of the scenes before it (in segment order).
    """
    dtype = next(net.parameters()).dtype
    net.eval()
    preds, labels = [], []
    offset, scene, scene_base = 0, None, 0
    for seg in segments:
        if seg.scene_id != scene:
            scene, scene_base = seg.scene_id, offset
        base = scene_base + seg.frame_offset
        for cam in cameras:
            feats, vis, oh, _, _ = _stack([seg], [cam], dtype)
            with torch.no_grad():
                out = net(feats, vis, oh)[0].double().numpy()
            width = rig.camera(cam).image_width_px
            for f in range(out.shape[0]):
                preds.append(FramePrediction(base + f, cam, float(out[f, 0]), float(out[f, 1])))
                if seg.active[cam, f]:
                    xn = float(seg.x_target[cam, f])
                    labels.append(FrameLabel(base + f, cam, True, xn, xn * width))
                else:
                    labels.append(FrameLabel(base + f, cam, False))
        offset = max(offset, base + seg.active.shape[1])
    return preds, labels


def predict_split(net, manifest: Path, rig: RigConfig, cameras: list[int], split: str | None = "test"):
    segments = load_segments(manifest, rig, split=split)
    if not segments:
        raise DataError(f"{manifest}: no '{split}' segments to evaluate")
    return predict_segments(net, segments, rig, cameras)


def _eval_cameras(cfg: RunConfig) -> list[int]:
    return list(range(11)) if cfg.metrics.camera == "all" else [int(cfg.metrics.camera)]


def stage_evaluate(cfg: RunConfig) -> bool:
    rig = cfg.load_rig()
    out = cfg.out_dir / "evaluate"
    ckpt = cfg.out_dir / "train" / "checkpoint.bin"
    m = cfg.metrics
    opts = (m.tolerance_px, m.n_thresholds, m.image_width, m.ad_threshold, m.camera)
    if cfg.predictions is not None:
        label_file = _require(cfg.corpus / "labels_test.csv", "test labels",
                              "evaluating an external predictions file needs <corpus>/labels_test.csv")
        h = _sha("evaluate", _file_sha(cfg.predictions), _file_sha(label_file), opts)
    elif ckpt.exists():
        manifest = _require(cfg.corpus / "manifest.jsonl", "corpus manifest", "run the 'simulate' stage first")
        h = _sha("evaluate", _file_sha(ckpt), _file_sha(manifest), opts)
    else:
        raise DataError(f"evaluate needs a checkpoint ({ckpt}) or a predictions file; "
                        "run the 'train' stage or set [run] predictions = <file>")
    if _up_to_date(cfg, "evaluate", h):
        return False
    t0 = time.time()
    out.mkdir(parents=True, exist_ok=True)
    if cfg.predictions is not None:
        preds, labels = read_predictions(cfg.predictions), read_labels(label_file)
    else:
        set_deterministic(cfg.single_thread)
        net = load_checkpoint(ckpt)
        preds, labels = predict_split(net, cfg.corpus / "manifest.jsonl", rig, _eval_cameras(cfg))
    (out / "predictions.csv").write_text(predictions_to_csv(preds))
    (out / "labels.csv").write_text(labels_to_csv(labels))
    cam = replace(rig.central_camera, image_width_px=m.image_width)
    report = evaluate(preds, labels, m.tolerance_px, m.n_thresholds, cam, m.ad_threshold)
    (out / "report.json").write_text(report.to_json())
    print(report.table_row("evaluate"))
    _record(cfg, "evaluate", h, [out / "predictions.csv", out / "labels.csv", out / "report.json"], t0)
    return True


def stage_plot(cfg: RunConfig) -> bool:
    report_path = _require(cfg.out_dir / "evaluate" / "report.json", "metrics report",
                           "run the 'evaluate' stage first")
    h = _sha("plot", _file_sha(report_path))
    if _up_to_date(cfg, "plot", h):
        return False
    t0 = time.time()
    report = MetricsReport.from_json(report_path.read_text())
    out = cfg.out_dir / "plot"
    out.mkdir(parents=True, exist_ok=True)
    (out / "pr_curve.csv").write_text(curve_to_csv(report.pr_curve))
    (out / "pr_curve.svg").write_text(pr_curve_svg({"model": report.pr_curve}))
    _record(cfg, "plot", h, [out / "pr_curve.csv", out / "pr_curve.svg"], t0)
    return True


def score_predictions(pred_file: str | Path, label_file: str | Path, tolerance_px: float = 89.0,
                      n_thresholds: int = 101, camera=None, name: str = "model",
                      echo: bool = True) -> MetricsReport:
    """Score an external predictions CSV against a labels CSV and print a table row."""
    report = evaluate(read_predictions(pred_file), read_labels(label_file), tolerance_px, n_thresholds, camera)
    if echo:
        print(report.table_row(name))
    return report


STAGE_FUNCS: dict[str, Callable[[RunConfig], bool]] = {
    "simulate": stage_simulate, "extract": stage_extract, "train": stage_train,
    "evaluate": stage_evaluate, "plot": stage_plot,
}


def run_pipeline(cfg: RunConfig, stages: Iterable[str]) -> dict[str, bool]:
    """Run the requested stages in canonical order; returns stage -> executed (False = skipped)."""
    wanted = list(stages)
    bad = [s for s in wanted if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stage(s) {bad}; choose from {', '.join(STAGES)}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    done = {}
    for stage in STAGES:
        if stage in wanted:
            done[stage] = STAGE_FUNCS[stage](cfg)
            log.info("%s: %s", stage, "done" if done[stage] else "up to date, skipped")
    return done
