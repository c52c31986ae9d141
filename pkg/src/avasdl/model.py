"""Audio-visual Conformer network for speaker detection and localization.

Data flow for one 2-s segment (paper-scale widths in brackets)::

    features (16, 960, 64) --CNN--> (60, 512) ----------------.
                                                               concat (60, 1024) -> AV-Conformer
    frames (60, obs) --backbone--> (60, 2048) -> FC (60, 512)   |                   -> FC 1024->512 -> FC 512->256
                      -> visual Conformer -> (60, 512) --------'                    -> concat camera one-hot
                                                                                   -> FC 267->2 -> sigmoid
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rig import N_CAMERAS

BACKBONES = ("toy_conv", "external_embedding")
CHECKPOINT_MAGIC = b"ASDLCKPT"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    conv_blocks: int = 4
    base_channels: int = 64
    conformer_layers: int = 4
    attention_heads: int = 8
    depthwise_kernel: int = 51
    ffn_hidden: int = 1024
    embed_dim: int = 512
    n_cameras: int = N_CAMERAS
    visual_backbone: str = "toy_conv"
    seed: int = 0
    in_channels: int = 16
    n_time: int = 960
    n_freq: int = 64
    visual_feature_dim: int = 2048
    obs_width: int = 64
    toy_channels: int = 8
    max_rel_position: int = 64

    def __post_init__(self):
        if self.conv_blocks < 1:
            raise ModelError("conv_blocks must be >= 1")
        if self.embed_dim % self.attention_heads:
            raise ModelError("embed_dim must be divisible by attention_heads")
        if self.depthwise_kernel % 2 == 0:
            raise ModelError("depthwise_kernel must be odd")
        if self.base_channels * 2 ** (self.conv_blocks - 1) != self.embed_dim:
            raise ModelError("audio CNN must end at embed_dim channels "
                             f"(base_channels * 2**(conv_blocks-1) = {self.base_channels * 2 ** (self.conv_blocks - 1)})")
        if self.visual_backbone not in BACKBONES:
            raise ModelError(f"unknown visual backbone {self.visual_backbone!r}")
        if self.n_time % 2**self.conv_blocks or self.n_freq % 2**self.conv_blocks:
            raise ModelError("time and frequency sizes must be divisible by 2**conv_blocks")
        if self.embed_dim % 2:
            raise ModelError("embed_dim must be even")

    @property
    def n_frames(self) -> int:
        return self.n_time // 2**self.conv_blocks

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = cls(conv_blocks=4, base_channels=4, conformer_layers=1, attention_heads=2,
                   depthwise_kernel=7, ffn_hidden=64, embed_dim=32, visual_feature_dim=64,
                   toy_channels=4)
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FrameOutput(NamedTuple):
    x_pred: float
    confidence: float


class ConvBlock(nn.Module):
    """conv3x3 -> conv3x3 -> avg-pool(2) -> batch-norm -> ReLU."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.pool = nn.AvgPool2d(2)
        self.bn = nn.BatchNorm2d(c_out)
        self.relu = nn.ReLU()

    def forward(self, x):
        return self.relu(self.bn(self.pool(self.conv2(self.conv1(x)))))


class AudioEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.in_channels] + [cfg.base_channels * 2**b for b in range(cfg.conv_blocks)]
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(chans[:-1], chans[1:]))

    def forward(self, x):
        # x: (B, C, T, F) -> (B, T / 2**blocks, embed)
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=3).transpose(1, 2)


class ToyVisualBackbone(nn.Module):
    """Small 1-D CNN over per-frame column profiles; stands in for an image backbone."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.toy_channels
        self.conv1 = nn.Conv1d(1, c, 5, padding=2)
        self.conv2 = nn.Conv1d(c, c, 5, padding=2)
        self.fc = nn.Linear(c * cfg.obs_width, cfg.visual_feature_dim)
        self.relu1, self.relu2, self.relu3 = nn.ReLU(), nn.ReLU(), nn.ReLU()

    def forward(self, obs):
        b, t, w = obs.shape
        h = obs.reshape(b * t, 1, w)
        h = self.relu2(self.conv2(self.relu1(self.conv1(h))))
        return self.relu3(self.fc(h.reshape(b, t, -1)))


class FeedForward(nn.Module):
    def __init__(self, d, hidden):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(self.norm(x))))


class RelPositionSelfAttention(nn.Module):
    """Multi-head self-attention with a learned per-head bias on the clipped relative offset."""

    def __init__(self, d, heads, max_rel):
        super().__init__()
        self.heads = heads
        self.max_rel = max_rel
        self.norm = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_rel + 1))

    def forward(self, x):
        b, t, d = x.shape
        h, dh = self.heads, d // self.heads
        x = self.norm(x)
        q = self.q(x).view(b, t, h, dh).transpose(1, 2)
        k = self.k(x).view(b, t, h, dh).transpose(1, 2)
        v = self.v(x).view(b, t, h, dh).transpose(1, 2)
        pos = torch.arange(t, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_rel, self.max_rel) + self.max_rel
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + self.rel_bias[:, rel]
        att = scores.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class ConvModule(nn.Module):
    def __init__(self, d, kernel):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.pw1 = nn.Conv1d(d, 2 * d, 1)
        self.dw = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.bn = nn.BatchNorm1d(d)
        self.pw2 = nn.Conv1d(d, d, 1)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pw1(h), dim=1)
        h = F.silu(self.bn(self.dw(h)))
        return self.pw2(h).transpose(1, 2)


class ConformerLayer(nn.Module):
    def __init__(self, d, heads, ffn_hidden, kernel, max_rel):
        super().__init__()
        self.ff1 = FeedForward(d, ffn_hidden)
        self.mhsa = RelPositionSelfAttention(d, heads, max_rel)
        self.conv = ConvModule(d, kernel)
        self.ff2 = FeedForward(d, ffn_hidden)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.mhsa(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class Conformer(nn.Module):
    def __init__(self, d, cfg: ModelConfig):
        super().__init__()
        self.d = d
        self.layers = nn.ModuleList(
            ConformerLayer(d, cfg.attention_heads, cfg.ffn_hidden, cfg.depthwise_kernel, cfg.max_rel_position)
            for _ in range(cfg.conformer_layers)
        )

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ModelError(f"Conformer expects width {self.d}, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer(x)
        return x


class VisualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ToyVisualBackbone(cfg) if cfg.visual_backbone == "toy_conv" else None
        self.proj = nn.Linear(cfg.visual_feature_dim, cfg.embed_dim)
        self.conformer = Conformer(cfg.embed_dim, cfg)

    def embed_frames(self, frames):
        """Backbone and projection only; applied to each frame independently."""
        if self.backbone is not None:
            if frames.shape[-1] != self.cfg.obs_width:
                raise ModelError(f"toy backbone expects {self.cfg.obs_width}-wide observations, got {frames.shape[-1]}")
            feats = self.backbone(frames)
        else:
            if frames.shape[-1] != self.cfg.visual_feature_dim:
                raise ModelError(f"external embeddings must be {self.cfg.visual_feature_dim}-d, got {frames.shape[-1]}")
            feats = frames
        return self.proj(feats)

    def forward(self, frames):
        return self.conformer(self.embed_frames(frames))


class FusionHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.conformer = Conformer(2 * d, cfg)
        self.fc1 = nn.Linear(2 * d, d)
        self.fc2 = nn.Linear(d, d // 2)
        self.fc3 = nn.Linear(d // 2 + cfg.n_cameras, 2)
        self.relu1, self.relu2 = nn.ReLU(), nn.ReLU()

    def forward(self, audio_emb, visual_emb, camera_onehot):
        h = self.conformer(torch.cat([audio_emb, visual_emb], dim=-1))
        h = self.relu2(self.fc2(self.relu1(self.fc1(h))))
        cam = camera_onehot[:, None, :].expand(-1, h.shape[1], -1)
        return torch.sigmoid(self.fc3(torch.cat([h, cam], dim=-1)))


class ASDLNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.audio = AudioEncoder(cfg)
        self.visual = VisualEncoder(cfg)
        self.fusion = FusionHead(cfg)

    def forward(self, features, frames, camera_onehot):
        """Returns (B, frames, 2): column 0 is x_pred, column 1 the confidence."""
        check_inputs(self.cfg, features, frames, camera_onehot)
        return self.fusion(self.audio(features), self.visual(frames), camera_onehot)


def build_model(cfg: ModelConfig, dtype=torch.float32) -> ASDLNet:
    net = ASDLNet(cfg)
    init_parameters(net, cfg.seed)
    return net.to(dtype)


def init_parameters(net: nn.Module, seed: int) -> None:
    """He-style uniform fan-in init for weights, zero biases, seeded and order-stable."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(net.named_parameters()):
            module_name, _, leaf = name.rpartition(".")
            module = net.get_submodule(module_name)
            if isinstance(module, (nn.LayerNorm, nn.BatchNorm1d, nn.BatchNorm2d)):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "rel_bias":
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 0.2 - 0.1)
            elif leaf == "bias":
                p.zero_()
            else:
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)


def check_inputs(cfg: ModelConfig, features, frames, camera_onehot) -> None:
    want = (cfg.in_channels, cfg.n_time, cfg.n_freq)
    if features.dim() != 4 or tuple(features.shape[1:]) != want:
        raise ModelError(f"features must be (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(features.shape)}")
    if frames.dim() != 3 or frames.shape[1] != cfg.n_frames:
        raise ModelError(f"expected {cfg.n_frames} frames per segment, got {tuple(frames.shape)}")
    validate_onehot(camera_onehot, cfg.n_cameras)


def validate_onehot(onehot, n_cameras: int) -> None:
    if onehot.dim() != 2 or onehot.shape[1] != n_cameras:
        raise ModelError(f"camera one-hot must be (B, {n_cameras})")
    ok = ((onehot == 0) | (onehot == 1)).all() and (onehot.sum(dim=1) == 1).all()
    if not bool(ok):
        raise ModelError("camera one-hot must contain exactly one 1 per row")


def camera_onehot(camera_ids, n_cameras: int = N_CAMERAS, dtype=torch.float32) -> torch.Tensor:
    ids = torch.as_tensor(np.atleast_1d(camera_ids), dtype=torch.long)
    return F.one_hot(ids, n_cameras).to(dtype)


# -- per-stage entry points on a single segment ---------------------------------

def _batch(x, dtype):
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    return t[None]


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


def audio_encoder_forward(net: ASDLNet, features) -> torch.Tensor:
    x = _batch(features, _dtype(net))
    if tuple(x.shape[1:]) != (net.cfg.in_channels, net.cfg.n_time, net.cfg.n_freq):
        raise ModelError(f"feature tensor shape {tuple(x.shape[1:])} does not match the model config")
    return net.audio(x)[0]


def visual_encoder_forward(net: ASDLNet, frames) -> torch.Tensor:
    x = _batch(frames, _dtype(net))
    if x.shape[1] != net.cfg.n_frames:
        raise ModelError(f"expected {net.cfg.n_frames} frames, got {x.shape[1]}")
    return net.visual(x)[0]


def conformer_forward(conformer: Conformer, seq) -> torch.Tensor:
    return conformer(torch.as_tensor(seq)[None])[0]


def fusion_head_forward(net: ASDLNet, audio_emb, visual_emb, onehot) -> list[FrameOutput]:
    dt = _dtype(net)
    oh = torch.as_tensor(np.asarray(onehot), dtype=dt)[None]
    validate_onehot(oh, net.cfg.n_cameras)
    out = net.fusion(torch.as_tensor(audio_emb, dtype=dt)[None], torch.as_tensor(visual_emb, dtype=dt)[None], oh)[0]
    return [FrameOutput(float(x), float(c)) for x, c in out.tolist()]


@torch.no_grad()
def model_forward(net: ASDLNet, features, frames, onehot) -> list[FrameOutput]:
    """Inference on one segment (evaluation mode)."""
    was_training = net.training
    net.eval()
    try:
        dt = _dtype(net)
        out = net(_batch(features, dt), _batch(frames, dt), torch.as_tensor(np.asarray(onehot), dtype=dt)[None])[0]
    finally:
        net.train(was_training)
    return [FrameOutput(float(x), float(c)) for x, c in out.tolist()]


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(net: ASDLNet, path: str | Path) -> None:
    """Write the model as a single self-describing little-endian file.

    Layout::

        magic "ASDLCKPT" | u32 version | u32 n | n bytes config JSON | u32 n_arrays
        per array: u16 name_len | name utf-8 | u8 dtype_len | dtype ascii (e.g. "<f8")
                   | u8 ndim | ndim x u32 shape | raw C-order data
    """
    cfg = json.dumps(net.cfg.to_dict(), sort_keys=True).encode()
    state = net.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(state))]
    for name in sorted(state):
        a = state[name].detach().cpu().numpy()
        a = np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<"), copy=False))
        nb, dt = name.encode(), a.dtype.str.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", len(dt)), dt,
                  struct.pack("<B", a.ndim), struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    cfg = ModelConfig.from_dict(json.loads(buf[pos : pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode()
        pos += ln
        (ld,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dt = np.dtype(buf[pos : pos + ld].decode())
        pos += ld
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * dt.itemsize
        arrays[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += size
    if pos != len(buf):
        raise ModelError(f"{path}: trailing bytes in checkpoint")
    return cfg, arrays


def load_checkpoint(path: str | Path) -> ASDLNet:
    cfg, arrays = read_checkpoint(path)
    net = ASDLNet(cfg)
    state = net.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise ModelError(f"checkpoint keys do not match schema (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise ModelError(f"non-finite values in {name}")
    dtype = torch.from_numpy(arrays["fusion.fc3.weight"]).dtype
    net = net.to(dtype)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return net
