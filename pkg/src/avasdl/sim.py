"""Synthetic talker scenes rendered on the rig, with exact ground truth.

A scene is one virtual talker following a piecewise-linear azimuth/distance
trajectory in the horizontal plane.  Each microphone receives the gated
excitation delayed by its true propagation time (windowed-sinc fractional
delay) and attenuated by 1/distance.  Labels come from the same geometry, so
the TDOA and position targets are known exactly.

Visual frames are not rendered.  Every camera instead gets a per-frame
column profile: a Gaussian bump over image columns centered on the talker,
removed while the scripted occlusion is on.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import signal as sps

from . import audio_io
from .features import SAMPLE_RATE, MultichannelClip
from .labels import FPS, FrameLabel, labels_to_csv, parse_labels
from .rig import MAX_CAMERA_AZIMUTH_DEG, N_CAMERAS, RigConfig, project_azimuth_to_pixel

EXCITATION_KINDS = ("am_noise", "harmonic")
TARGET_RMS = 0.1
SINC_TAPS = 64
OBS_WIDTH = 64
OBS_SIGMA = 1.5
DEFAULT_SNR_DB = 30.0


class SceneError(ValueError):
    pass


@dataclass
class SceneScript:
    duration: float
    # keyframes (time_s, azimuth_deg, distance_m), linearly interpolated
    trajectory: list[tuple[float, float, float]]
    activity: list[tuple[float, float]]
    excitation_kind: str = "am_noise"
    seed: int = 0
    snr_db: float | None = DEFAULT_SNR_DB
    occlusion: list[tuple[float, float]] = field(default_factory=list)
    face_offset_px: float = 0.0
    reflection_wall_m: float | None = None

    def validate(self) -> None:
        if self.duration <= 0:
            raise SceneError("duration must be positive")
        if self.excitation_kind not in EXCITATION_KINDS:
            raise SceneError(f"unknown excitation kind {self.excitation_kind!r}")
        if not self.trajectory:
            raise SceneError("trajectory needs at least one keyframe")
        times = [k[0] for k in self.trajectory]
        if times != sorted(times):
            raise SceneError("trajectory keyframes must be time-ordered")
        for _, az, dist in self.trajectory:
            if dist <= 0:
                raise SceneError("distance must be positive")
            if abs(az) >= MAX_CAMERA_AZIMUTH_DEG:
                raise SceneError(f"azimuth {az} outside the camera field of view")
        for name in ("activity", "occlusion"):
            prev_end = 0.0
            for start, end in getattr(self, name):
                if not (0.0 <= start < end <= self.duration) or start < prev_end:
                    raise SceneError(f"{name} intervals must be sorted, non-overlapping and inside [0, duration]")
                prev_end = end

    def position_at(self, t):
        """Azimuth (deg) and distance (m) at time(s) ``t``."""
        k = np.asarray(self.trajectory, dtype=float)
        az = np.interp(t, k[:, 0], k[:, 1])
        dist = np.interp(t, k[:, 0], k[:, 2])
        return az, dist


def _interval_mask(intervals, t) -> np.ndarray:
    t = np.asarray(t)
    mask = np.zeros(t.shape, dtype=bool)
    for start, end in intervals:
        mask |= (t >= start) & (t < end)
    return mask


def frame_activity(intervals, n_frames: int, fps: int = FPS) -> np.ndarray:
    """Half-open per-frame activity: frame f is active iff start <= f/fps < end."""
    f = np.arange(n_frames)
    mask = np.zeros(n_frames, dtype=bool)
    for start, end in intervals:
        first = math.ceil(start * fps - 1e-9)
        stop = math.ceil(end * fps - 1e-9)
        mask |= (f >= first) & (f < stop)
    return mask


def make_excitation(kind: str, duration: float, seed: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    if duration <= 0:
        raise SceneError("duration must be positive")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    if kind == "am_noise":
        # envelope stays above zero so every active frame carries energy
        env = 0.6 + 0.4 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
        x = rng.standard_normal(n) * env
        sos = sps.butter(4, [200.0, 8000.0], btype="bandpass", fs=sample_rate, output="sos")
        x = sps.sosfiltfilt(sos, x)
    elif kind == "harmonic":
        f0 = 150.0
        x = np.zeros(n)
        for k in range(1, int(8000 // f0) + 1):
            x += np.cos(2 * np.pi * k * f0 * t) / k
    else:
        raise SceneError(f"unknown excitation kind {kind!r}")
    return x * (TARGET_RMS / np.sqrt(np.mean(x**2)))


def fractional_delay(x: np.ndarray, delay_samples: np.ndarray, taps: int = SINC_TAPS) -> np.ndarray:
    """``y[n] = x(n - delay[n])`` by Hann-windowed sinc interpolation.

    ``delay_samples`` may vary per output sample.  Samples outside ``x`` are
    treated as zero.
    """
    n = x.size
    delay = np.broadcast_to(np.asarray(delay_samples, dtype=float), (n,))
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1)
    if np.ptp(delay) == 0.0:
        # constant delay: one fixed kernel, y[n] = sum_o x[n + shift + o] * h[o]
        shift = math.floor(-delay[0])
        dist = (-delay[0] - shift) - offsets
        h = _windowed_sinc(dist, half)
        full = sps.oaconvolve(x, h[::-1])
        start = shift + offsets[0] + taps - 1
        y = np.zeros(n)
        lo, hi = max(0, -start), min(n, full.size - start)
        if hi > lo:
            y[lo:hi] = full[lo + start : hi + start]
        return y
    y = np.empty(n)
    xp = np.concatenate([np.zeros(taps), x, np.zeros(taps)])
    for lo in range(0, n, 8192):
        hi = min(n, lo + 8192)
        pos = np.arange(lo, hi) - delay[lo:hi]
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        w = _windowed_sinc(pos[:, None] - idx, half)
        y[lo:hi] = np.sum(xp[idx + taps] * w, axis=1)
    return y


def _windowed_sinc(dist, half: int):
    w = np.sinc(dist) * (0.5 + 0.5 * np.cos(np.pi * dist / half))
    return np.where(np.abs(dist) >= half, 0.0, w)


class RenderedScene(NamedTuple):
    clip: MultichannelClip
    labels: dict[int, list[FrameLabel]]
    visual: np.ndarray  # (cameras, frames, OBS_WIDTH)


def _source_xyz(az_deg, dist):
    az = np.radians(az_deg)
    return np.stack([dist * np.sin(az), np.zeros_like(az), dist * np.cos(az)], axis=-1)


def _check_visibility(rig: RigConfig, xyz: np.ndarray) -> None:
    for p in xyz:
        if not any(abs(cam.azimuth_of(p)) < MAX_CAMERA_AZIMUTH_DEG for cam in rig.cameras):
            raise SceneError("trajectory leaves the field of view of every camera")


def render_audio(rig: RigConfig, script: SceneScript) -> np.ndarray:
    script.validate()
    n = int(round(script.duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    az, dist = script.position_at(t)
    src = _source_xyz(az, dist)
    _check_visibility(rig, src[:: SAMPLE_RATE // FPS])

    excitation = make_excitation(script.excitation_kind, script.duration, script.seed)
    excitation = excitation * _interval_mask(script.activity, t)
    mics = rig.layout.array
    c = rig.layout.speed_of_sound
    paths = [src]
    gains = [1.0]
    if script.reflection_wall_m is not None:
        image = src.copy()
        image[:, 0] = 2 * script.reflection_wall_m - image[:, 0]
        paths.append(image)
        gains.append(0.5)
    out = np.zeros((len(mics), n))
    for m, mic in enumerate(mics):
        for p, g in zip(paths, gains):
            r = np.linalg.norm(p - mic, axis=1)
            out[m] += g * fractional_delay(excitation, r / c * SAMPLE_RATE) / r
    if script.snr_db is not None:
        ref = out[rig.layout.reference_index]
        active = _interval_mask(script.activity, t)
        p_sig = np.mean(ref[active] ** 2) if active.any() else (TARGET_RMS / np.mean(dist)) ** 2
        noise_rms = math.sqrt(p_sig) / 10 ** (script.snr_db / 20)
        rng = np.random.default_rng([script.seed, 1])
        out += noise_rms * rng.standard_normal(out.shape)
    return out


def render_labels(rig: RigConfig, script: SceneScript, n_frames: int) -> tuple[dict[int, list[FrameLabel]], np.ndarray]:
    t = np.arange(n_frames) / FPS
    az, dist = script.position_at(t)
    src = _source_xyz(az, dist)
    active = frame_activity(script.activity, n_frames)
    occluded = frame_activity(script.occlusion, n_frames)
    rng = np.random.default_rng([script.seed, 2])
    cols = np.arange(OBS_WIDTH) + 0.5
    visual = np.zeros((N_CAMERAS, n_frames, OBS_WIDTH))
    labels: dict[int, list[FrameLabel]] = {}
    for cam in rig.cameras:
        rows = []
        for f in range(n_frames):
            cam_az = cam.azimuth_of(src[f])
            mouth = project_azimuth_to_pixel(cam, cam_az) if abs(cam_az) < MAX_CAMERA_AZIMUTH_DEG else math.nan
            face = mouth + script.face_offset_px
            x_norm = min(1.0, max(0.0, face / cam.image_width_px))
            if not occluded[f] and 0.0 <= face < cam.image_width_px:
                visual[cam.camera_id, f] = np.exp(-0.5 * ((cols - x_norm * OBS_WIDTH) / OBS_SIGMA) ** 2)
            if active[f] and math.isfinite(mouth):
                rows.append(FrameLabel(f, cam.camera_id, True, x_norm, mouth))
            else:
                rows.append(FrameLabel(f, cam.camera_id, False))
        labels[cam.camera_id] = rows
    visual += 0.02 * rng.standard_normal(visual.shape)
    return labels, visual


def render_scene(rig: RigConfig, script: SceneScript) -> RenderedScene:
    samples = render_audio(rig, script)
    n_frames = int(round(script.duration * FPS))
    labels, visual = render_labels(rig, script, n_frames)
    return RenderedScene(MultichannelClip(samples), labels, visual)


# -- scene script files ----------------------------------------------------------

_SCENE_KEYS = {"duration", "excitation", "seed", "snr_db", "face_offset_px", "reflection_wall_m"}


def script_to_ini(script: SceneScript) -> str:
    lines = ["[scene]",
             f"duration = {script.duration!r}",
             f"excitation = {script.excitation_kind}",
             f"seed = {script.seed}",
             f"snr_db = {'none' if script.snr_db is None else repr(script.snr_db)}",
             f"face_offset_px = {script.face_offset_px!r}",
             f"reflection_wall_m = {'none' if script.reflection_wall_m is None else repr(script.reflection_wall_m)}",
             "", "[trajectory]"]
    lines += [f"k{i} = {t!r}, {a!r}, {d!r}" for i, (t, a, d) in enumerate(script.trajectory)]
    for name in ("activity", "occlusion"):
        lines += ["", f"[{name}]"]
        lines += [f"i{i} = {s!r}, {e!r}" for i, (s, e) in enumerate(getattr(script, name))]
    return "\n".join(lines) + "\n"


def _opt(v: str) -> float | None:
    return None if v.strip().lower() == "none" else float(v)


def script_from_ini(text: str) -> SceneScript:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    unknown_sections = set(cp.sections()) - {"scene", "trajectory", "activity", "occlusion"}
    if unknown_sections:
        raise SceneError(f"unknown sections {sorted(unknown_sections)}")
    s = cp["scene"]
    unknown = set(s) - _SCENE_KEYS
    if unknown:
        raise SceneError(f"unknown keys in [scene]: {sorted(unknown)}")

    def rows(section, width):
        if section not in cp:
            return []
        out = []
        for v in cp[section].values():
            vals = tuple(float(x) for x in v.split(","))
            if len(vals) != width:
                raise SceneError(f"[{section}] rows need {width} values")
            out.append(vals)
        return out

    script = SceneScript(
        duration=s.getfloat("duration"),
        trajectory=rows("trajectory", 3),
        activity=rows("activity", 2),
        excitation_kind=s.get("excitation", "am_noise"),
        seed=s.getint("seed", 0),
        snr_db=_opt(s.get("snr_db", str(DEFAULT_SNR_DB))),
        occlusion=rows("occlusion", 2),
        face_offset_px=s.getfloat("face_offset_px", 0.0),
        reflection_wall_m=_opt(s.get("reflection_wall_m", "none")),
    )
    script.validate()
    return script


# -- corpus --------------------------------------------------------------------

def random_script(rng: np.random.Generator, duration: float, seed: int,
                  occlusion_rate: float = 0.2) -> SceneScript:
    """Talker at 2.5-5 m inside +-20 deg, optionally walking, with 1-3 speech turns."""
    az0 = float(rng.uniform(-20, 20))
    d0 = float(rng.uniform(2.5, 5.0))
    if rng.random() < 0.5:
        traj = [(0.0, az0, d0)]
    else:
        az1 = float(np.clip(az0 + rng.uniform(-10, 10), -20, 20))
        d1 = float(np.clip(d0 + rng.uniform(-0.5, 0.5), 2.5, 5.0))
        traj = [(0.0, az0, d0), (duration, az1, d1)]
    # speech turns on a 0.1 s grid
    grid = np.round(np.sort(rng.choice(np.arange(1, int(duration * 10)), size=4, replace=False)) / 10, 1)
    activity = [(float(grid[0]), float(grid[1])), (float(grid[2]), float(grid[3]))]
    if rng.random() < 0.3:
        activity = [(0.0, float(grid[1]))] + activity[1:]
    occlusion = []
    if rng.random() < occlusion_rate:
        start = float(np.round(rng.uniform(0, duration - 0.5), 1))
        occlusion = [(start, start + 0.5)]
    kind = EXCITATION_KINDS[int(rng.integers(2))]
    return SceneScript(duration=duration, trajectory=traj, activity=activity,
                       excitation_kind=kind, seed=seed, occlusion=occlusion)


def n_test_scenes(n_scenes: int) -> int:
    # development/test ratio 50:10
    return 0 if n_scenes < 2 else max(1, round(n_scenes / 6))


def write_scene(scene_dir: Path, rig: RigConfig, script: SceneScript) -> dict:
    scene_dir.mkdir(parents=True, exist_ok=True)
    rendered = render_scene(rig, script)
    audio_io.write_wav(scene_dir / "audio.wav", rendered.clip.samples, SAMPLE_RATE)
    rows = [lab for cam in sorted(rendered.labels) for lab in rendered.labels[cam]]
    (scene_dir / "labels.csv").write_text(labels_to_csv(rows))
    audio_io.write_blob(scene_dir / "visual.bin", rendered.visual.astype(np.float32))
    (scene_dir / "scene.ini").write_text(script_to_ini(script))
    return {"audio": "audio.wav", "labels": "labels.csv", "visual": "visual.bin", "script": "scene.ini"}


def generate_corpus(rig: RigConfig, n_scenes: int, seed: int, out_dir: str | Path,
                    duration: float = 4.0, occlusion_rate: float = 0.2) -> Path:
    """Render ``n_scenes`` random scenes and write ``manifest.jsonl``; returns its path."""
    if n_scenes < 1:
        raise SceneError("n_scenes must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SceneError(f"cannot create {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**63 - 1, size=n_scenes)
    test = set(rng.permutation(n_scenes)[: n_test_scenes(n_scenes)].tolist())
    records = []
    for i in range(n_scenes):
        scene_id = f"scene_{i:03d}"
        srng = np.random.default_rng(int(scene_seeds[i]))
        script = random_script(srng, duration, int(scene_seeds[i]) % (2**31), occlusion_rate)
        files = write_scene(out / scene_id, rig, script)
        records.append({"scene_id": scene_id, "split": "test" if i in test else "train",
                        **{k: f"{scene_id}/{v}" for k, v in files.items()}})
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_scene_labels(path: str | Path) -> dict[int, list[FrameLabel]]:
    by_cam: dict[int, list[FrameLabel]] = {}
    for lab in parse_labels(Path(path).read_text(), str(path)):
        by_cam.setdefault(lab.camera_id, []).append(lab)
    return by_cam
