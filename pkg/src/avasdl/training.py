"""Loss, learning-rate schedule, cross-validation folds, training loop and
gradient verification."""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import audio_io
from .features import MultichannelClip, assemble_features, mel_filterbank, split_segments
from .model import ASDLNet, ModelConfig, build_model, camera_onehot, save_checkpoint
from .rig import N_CAMERAS, RigConfig
from .sim import OBS_WIDTH, load_scene_labels, read_manifest

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_initial: float = 1e-4
    lr_flat_epochs: int = 30
    lr_decay: float = 0.9
    seed: int = 0
    folds: int = 5
    freeze_visual_backbone: bool = False

    def __post_init__(self):
        for f in ("epochs", "batch_size", "lr_initial", "lr_decay", "folds"):
            if getattr(self, f) <= 0:
                raise TrainingError(f"{f} must be positive")
        if not 0 < self.lr_flat_epochs <= self.epochs:
            raise TrainingError("lr_flat_epochs must lie in [1, epochs]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def train_config_from_ini(text: str) -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    if cp.sections() != ["train"]:
        raise TrainingError("training config must contain exactly one [train] section")
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for key, raw in cp["train"].items():
        if key not in types:
            raise TrainingError(f"unknown train config key {key!r}")
        if key == "freeze_visual_backbone":
            values[key] = cp["train"].getboolean(key)
        elif key in ("lr_initial", "lr_decay"):
            values[key] = float(raw)
        else:
            values[key] = int(raw)
    return TrainConfig(**values)


# -- loss ------------------------------------------------------------------------

def asdl_loss(pred: torch.Tensor, x_target: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    """Masked sum-squared loss, summed over frames and averaged over segments.

    ``pred`` is (B, T, 2) holding (x, confidence); ``x_target`` is (B, T) and
    may hold NaN on silent frames; ``active`` is a (B, T) boolean mask.
    """
    if pred.dim() == 2:
        pred, x_target, active = pred[None], x_target[None], active[None]
    if pred.shape[:2] != x_target.shape or x_target.shape != active.shape:
        raise TrainingError("prediction and target lengths differ")
    if torch.isnan(pred).any():
        raise TrainingError("NaN in predictions")
    active = active.bool()
    if torch.isnan(x_target[active]).any():
        raise TrainingError("NaN target position on an active frame")
    x, conf = pred[..., 0], pred[..., 1]
    # where() rather than multiplication so NaN targets on silent frames cannot leak
    reg = torch.where(active, (x - torch.nan_to_num(x_target)) ** 2, torch.zeros_like(x))
    cls = (conf - active.to(conf.dtype)) ** 2
    return (reg + cls).sum(dim=1).mean()


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise TrainingError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.lr_flat_epochs:
        return config.lr_initial
    return config.lr_initial * config.lr_decay ** (epoch - config.lr_flat_epochs + 1)


def split_folds(sequence_ids: Sequence, k: int = 5, seed: int = 0) -> list[list]:
    ids = list(sequence_ids)
    if k <= 0 or len(ids) % k:
        raise TrainingError(f"{len(ids)} sequences cannot be split into {k} equal folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    size = len(ids) // k
    return [[ids[i] for i in order[f * size : (f + 1) * size]] for f in range(k)]


# -- data ------------------------------------------------------------------------

@dataclass
class Segment:
    scene_id: str
    index: int
    features: np.ndarray  # (16, 960, 64) float32
    visual: np.ndarray  # (cameras, 60, obs)
    x_target: np.ndarray  # (cameras, 60), NaN on silent frames
    active: np.ndarray  # (cameras, 60) bool
    frame_offset: int = 0


def feature_path(scene_dir: Path, index: int) -> Path:
    return scene_dir / f"features_{index:03d}.bin"


def scene_segments(scene_dir: Path, record: dict, rig: RigConfig, frames_per_segment: int = 60,
                   fb=None) -> list[Segment]:
    """Load a scene as 2-s segments, using cached feature blobs when present."""
    root = scene_dir.parent
    labels = load_scene_labels(root / record["labels"])
    cached = sorted(scene_dir.glob("features_*.bin"))
    if cached:
        feats = [audio_io.read_blob(p) for p in cached]
    else:
        samples, _ = audio_io.read_wav(root / record["audio"])
        if fb is None:
            fb = mel_filterbank()
        feats = [assemble_features(MultichannelClip(s), rig, fb).values.astype(np.float32)
                 for s in split_segments(samples)]
    n_frames = len(feats) * frames_per_segment
    if "visual" in record:
        visual = audio_io.read_blob(root / record["visual"]).astype(np.float64)
    else:
        log.warning("%s: no visual observations, using blank frames", record["scene_id"])
        visual = np.zeros((N_CAMERAS, n_frames, OBS_WIDTH))
    x = np.full((N_CAMERAS, n_frames), np.nan)
    act = np.zeros((N_CAMERAS, n_frames), dtype=bool)
    for cam, rows in labels.items():
        for lab in rows:
            if lab.frame_index < n_frames and lab.active and lab.x_center_norm is not None:
                x[cam, lab.frame_index] = lab.x_center_norm
                act[cam, lab.frame_index] = True
    out = []
    for k, f in enumerate(feats):
        sl = slice(k * frames_per_segment, (k + 1) * frames_per_segment)
        out.append(Segment(record["scene_id"], k, f, visual[:, sl], x[:, sl], act[:, sl], k * frames_per_segment))
    return out


def load_segments(manifest: str | Path, rig: RigConfig, split: str | None = "train",
                  scene_ids: Sequence[str] | None = None) -> list[Segment]:
    manifest = Path(manifest)
    fb = mel_filterbank()
    out = []
    for rec in read_manifest(manifest):
        if split is not None and rec["split"] != split:
            continue
        if scene_ids is not None and rec["scene_id"] not in scene_ids:
            continue
        out.extend(scene_segments(manifest.parent / rec["scene_id"], rec, rig, fb=fb))
    return out


def _stack(segments: Sequence[Segment], cams: Sequence[int], dtype):
    feats = torch.as_tensor(np.stack([s.features for s in segments]), dtype=dtype)
    vis = torch.as_tensor(np.stack([s.visual[c] for s, c in zip(segments, cams)]), dtype=dtype)
    x = torch.as_tensor(np.stack([s.x_target[c] for s, c in zip(segments, cams)]), dtype=dtype)
    act = torch.as_tensor(np.stack([s.active[c] for s, c in zip(segments, cams)]))
    return feats, vis, camera_onehot(list(cams), dtype=dtype), x, act


# -- training loop -----------------------------------------------------------------

def set_deterministic(single_thread: bool = True) -> None:
    torch.use_deterministic_algorithms(True)
    if single_thread:
        torch.set_num_threads(1)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


def history_to_csv(history: Sequence[EpochRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_loss"])
    for r in history:
        w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), "" if math.isnan(r.val_loss) else repr(r.val_loss)])
    return out.getvalue()


@torch.no_grad()
def evaluate_loss(net: ASDLNet, segments: Sequence[Segment], cameras: Sequence[int] | None = None,
                  batch_size: int = 32) -> float:
    if not segments:
        return math.nan
    net.eval()
    dtype = next(net.parameters()).dtype
    cams = list(cameras) if cameras is not None else [N_CAMERAS // 2] * len(segments)
    total = 0.0
    for i in range(0, len(segments), batch_size):
        feats, vis, oh, x, act = _stack(segments[i : i + batch_size], cams[i : i + batch_size], dtype)
        total += asdl_loss(net(feats, vis, oh), x, act).item() * feats.shape[0]
    return total / len(segments)


def train_segments(model_config: ModelConfig, train_config: TrainConfig, segments: Sequence[Segment],
                   val_segments: Sequence[Segment] = (), dtype=torch.float32,
                   net: ASDLNet | None = None, progress=None) -> tuple[ASDLNet, list[EpochRecord]]:
    if not segments:
        raise TrainingError("no training segments")
    torch.manual_seed(train_config.seed)
    if net is None:
        net = build_model(model_config, dtype)
    dtype = next(net.parameters()).dtype
    if train_config.freeze_visual_backbone and net.visual.backbone is not None:
        for p in net.visual.backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=train_config.lr_initial, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(train_config.seed)
    val_cams = [N_CAMERAS // 2] * len(val_segments)
    history = []
    for epoch in range(train_config.epochs):
        lr = lr_schedule(train_config, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(segments))
        cams = rng.integers(0, N_CAMERAS, size=len(segments))
        net.train()
        total = 0.0
        for i in range(0, len(order), train_config.batch_size):
            idx = order[i : i + train_config.batch_size]
            feats, vis, oh, x, act = _stack([segments[j] for j in idx], [int(cams[j]) for j in idx], dtype)
            loss = asdl_loss(net(feats, vis, oh), x, act)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged to {float(loss)} at epoch {epoch}, batch {i // train_config.batch_size} "
                                    f"(lr {lr:g}); lower lr_initial or check the input features")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        rec = EpochRecord(epoch, lr, total / len(segments), evaluate_loss(net, val_segments, val_cams))
        history.append(rec)
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, rec.train_loss, rec.val_loss)
        if progress is not None:
            progress(rec)
    net.eval()
    return net, history


def train(model_config: ModelConfig, train_config: TrainConfig, manifest: str | Path, rig: RigConfig,
          out_dir: str | Path | None = None, val_scene_ids: Sequence[str] = (),
          dtype=torch.float32) -> tuple[ASDLNet, list[EpochRecord]]:
    """Train on the manifest's train split; scenes in ``val_scene_ids`` are held out for validation."""
    all_train = load_segments(manifest, rig, split="train")
    if not all_train:
        raise TrainingError(f"{manifest}: no training segments")
    val = [s for s in all_train if s.scene_id in set(val_scene_ids)]
    segs = [s for s in all_train if s.scene_id not in set(val_scene_ids)]
    net, history = train_segments(model_config, train_config, segs, val, dtype=dtype)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, out / "checkpoint.bin")
        (out / "history.csv").write_text(history_to_csv(history))
    return net, history


def cross_validate(model_config: ModelConfig, train_config: TrainConfig, manifest: str | Path,
                   rig: RigConfig) -> list[float]:
    """Final validation loss of each fold."""
    ids = sorted({r["scene_id"] for r in read_manifest(manifest) if r["split"] == "train"})
    losses = []
    for fold in split_folds(ids, train_config.folds, train_config.seed):
        _, hist = train(model_config, train_config, manifest, rig, val_scene_ids=fold)
        losses.append(hist[-1].val_loss)
    return losses


# -- gradient verification ---------------------------------------------------------

def central_difference(f, p: torch.Tensor, index: int, step: float = 1e-5) -> float:
    flat = p.data.view(-1)
    orig = float(flat[index])
    flat[index] = orig + step
    hi = float(f())
    flat[index] = orig - step
    lo = float(f())
    flat[index] = orig
    return (hi - lo) / (2 * step)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst_parameter: str


def _relu_signs(net: torch.nn.Module, f) -> torch.Tensor:
    """Run ``f`` and return the sign pattern of every ReLU input."""
    signs = []
    hooks = [m.register_forward_hook(lambda _m, inp, _out: signs.append((inp[0] > 0).flatten()))
             for m in net.modules() if isinstance(m, torch.nn.ReLU)]
    try:
        f()
    finally:
        for h in hooks:
            h.remove()
    return torch.cat(signs) if signs else torch.zeros(0, dtype=torch.bool)


def grad_check_report(model_config: ModelConfig, sample: Segment, camera: int = N_CAMERAS // 2,
                      n_params: int = 200, step: float = 1e-5, seed: int = 0, net: ASDLNet | None = None,
                      abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of the loss with central differences.

    Entries are sampled uniformly over all parameters.  The network runs in
    float64 with normalization layers in inference mode.  A sampled entry
    whose +-step perturbation flips any ReLU input sign sits on a kink where
    the difference quotient is not a derivative estimate; it is replaced by
    a fresh sample and counted in ``skipped_kinks``.
    """
    if net is None:
        net = build_model(model_config, torch.float64)
    net = net.double().eval()
    feats, vis, oh, x, act = _stack([sample], [camera], torch.float64)

    def loss():
        with torch.no_grad():
            return asdl_loss(net(feats, vis, oh), x, act)

    net.zero_grad()
    asdl_loss(net(feats, vis, oh), x, act).backward()
    named = sorted(net.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(int(sizes.sum()))
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for flat in order:
        if checked >= n_params:
            break
        t = int(np.searchsorted(bounds, flat, side="right"))
        idx = int(flat - (bounds[t - 1] if t else 0))
        name, p = named[t]
        entry = p.data.view(-1)
        orig = float(entry[idx])
        entry[idx] = orig + step
        plus = _relu_signs(net, loss)
        entry[idx] = orig - step
        minus = _relu_signs(net, loss)
        entry[idx] = orig
        if not torch.equal(plus, minus):
            skipped += 1
            continue
        analytic = float(p.grad.view(-1)[idx]) if p.grad is not None else 0.0
        numeric = central_difference(loss, p, idx, step)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
        checked += 1
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(worst, checked, skipped, worst_name)


def grad_check(model_config: ModelConfig, sample: Segment, **kwargs) -> float:
    """Worst relative gradient error; see :func:`grad_check_report`."""
    return grad_check_report(model_config, sample, **kwargs).max_rel_error
