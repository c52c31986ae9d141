"""Microphone-array and camera geometry of an audio-visual array rig.

Coordinates are in meters with the origin at the array center: +x to the
right (as seen by the cameras), +y up, +z forward into the scene.  Azimuth
is measured in the horizontal plane, positive towards +x.

The default coordinates are stand-ins: the true microphone positions and
camera intrinsics of the recording rig are not public.  They respect the
published constraints (16 microphones on a 450 mm x 40 mm aperture with
log-spaced horizontal gaps, 11 cameras, reference microphone at the start of
the lower sub-array).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

N_MICS = 16
N_CAMERAS = 11
SPEED_OF_SOUND = 343.0

# Spatial tolerance used for evaluation: 2 degrees of azimuth ~ 89 px.
TOLERANCE_DEG = 2.0
TOLERANCE_PX = 89.0
DEGREES_PER_PIXEL = TOLERANCE_DEG / TOLERANCE_PX
DEFAULT_IMAGE_WIDTH = 2448
MAX_CAMERA_AZIMUTH_DEG = 45.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class MicrophoneArrayLayout:
    positions: tuple[tuple[float, float, float], ...]
    reference_index: int
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.shape != (N_MICS, 3):
            raise GeometryError(f"expected {N_MICS} microphone positions, got shape {pos.shape}")
        if not 0 <= self.reference_index < N_MICS:
            raise GeometryError(f"reference_index {self.reference_index} out of range")
        if self.speed_of_sound <= 0:
            raise GeometryError("speed_of_sound must be positive")
        d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        if np.any(d[~np.eye(N_MICS, dtype=bool)] <= 0):
            raise GeometryError("microphone positions must be distinct")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=float)

    @property
    def horizontal_extent(self) -> float:
        x = self.array[:, 0]
        return float(x.max() - x.min())

    @property
    def vertical_extent(self) -> float:
        y = self.array[:, 1]
        return float(y.max() - y.min())

    @property
    def non_reference(self) -> list[int]:
        return [i for i in range(N_MICS) if i != self.reference_index]


@dataclass(frozen=True)
class CameraModel:
    camera_id: int
    focal_length_px: float
    principal_point_px: float
    image_width_px: int = DEFAULT_IMAGE_WIDTH
    degrees_per_pixel_linear: float = DEGREES_PER_PIXEL
    # Optical center on the baffle; all optical axes point along +z.
    position_m: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0 <= self.camera_id < N_CAMERAS:
            raise GeometryError(f"camera_id {self.camera_id} out of range")
        if self.focal_length_px <= 0 or self.image_width_px <= 0:
            raise GeometryError("focal length and image width must be positive")

    def azimuth_of(self, point: Sequence[float]) -> float:
        """Horizontal angle (deg) of a 3D point relative to this camera's axis."""
        dx = point[0] - self.position_m[0]
        dz = point[2] - self.position_m[2]
        return math.degrees(math.atan2(dx, dz))


@dataclass(frozen=True)
class RigConfig:
    layout: MicrophoneArrayLayout
    cameras: tuple[CameraModel, ...]
    rig_id: str = "ava-default"

    def __post_init__(self):
        if len(self.cameras) != N_CAMERAS:
            raise GeometryError(f"expected {N_CAMERAS} cameras, got {len(self.cameras)}")
        ids = sorted(c.camera_id for c in self.cameras)
        if ids != list(range(N_CAMERAS)):
            raise GeometryError("camera ids must be unique and cover 0..10")

    def camera(self, camera_id: int) -> CameraModel:
        for cam in self.cameras:
            if cam.camera_id == camera_id:
                return cam
        raise GeometryError(f"no camera {camera_id}")

    @property
    def central_camera(self) -> CameraModel:
        return self.camera(N_CAMERAS // 2)


def default_focal_length() -> float:
    return TOLERANCE_PX / math.tan(math.radians(TOLERANCE_DEG))


def _row_offsets(aperture: float = 0.450, inner_gap: float = 0.025) -> list[float]:
    # Distances from the row center grow geometrically, so the gaps between
    # neighbouring microphones are log-spaced.
    half = aperture / 2
    inner = inner_gap / 2
    ratio = (half / inner) ** (1 / 3)
    right = [inner * ratio**k for k in range(4)]
    right[-1] = half
    return [-r for r in reversed(right)] + right


def build_default_rig() -> RigConfig:
    xs = _row_offsets()
    upper = [(x, 0.020, 0.0) for x in xs]
    lower = [(x, -0.020, 0.0) for x in xs]
    # Lower row occupies indices 8..15; its leftmost element is the reference.
    layout = MicrophoneArrayLayout(positions=tuple(upper + lower), reference_index=8)

    focal = default_focal_length()
    cam_x = np.linspace(-0.25, 0.25, N_CAMERAS)
    cameras = tuple(
        CameraModel(
            camera_id=k,
            focal_length_px=focal,
            principal_point_px=DEFAULT_IMAGE_WIDTH / 2,
            position_m=(float(cam_x[k]), 0.10, 0.0),
        )
        for k in range(N_CAMERAS)
    )
    return RigConfig(layout=layout, cameras=cameras)


def source_position(azimuth_deg: float, distance_m: float, height_m: float = 0.0) -> np.ndarray:
    az = math.radians(azimuth_deg)
    return np.array([distance_m * math.sin(az), height_m, distance_m * math.cos(az)])


def expected_tdoa(layout: MicrophoneArrayLayout, mic_index: int, azimuth_deg: float,
                  distance_m: float) -> float:
    """Arrival-time difference (s) between ``mic_index`` and the reference mic.

    Positive values mean the wavefront reaches ``mic_index`` after the
    reference microphone.  The source sits in the horizontal plane through
    the array center.
    """
    if not 0 <= mic_index < N_MICS:
        raise GeometryError(f"mic_index {mic_index} out of range")
    if mic_index == layout.reference_index:
        raise GeometryError("mic_index must differ from the reference microphone")
    if distance_m <= 0:
        raise GeometryError("distance must be positive")
    src = source_position(azimuth_deg, distance_m)
    pos = layout.array
    d_mic = np.linalg.norm(src - pos[mic_index])
    d_ref = np.linalg.norm(src - pos[layout.reference_index])
    return float((d_mic - d_ref) / layout.speed_of_sound)


def project_azimuth_to_pixel(camera: CameraModel, azimuth_deg: float) -> float:
    if abs(azimuth_deg) >= MAX_CAMERA_AZIMUTH_DEG:
        raise GeometryError(f"azimuth {azimuth_deg} deg outside the camera field of view")
    return camera.principal_point_px + camera.focal_length_px * math.tan(math.radians(azimuth_deg))


def pixel_to_azimuth(camera: CameraModel, u_px: float) -> float:
    return math.degrees(math.atan((u_px - camera.principal_point_px) / camera.focal_length_px))


def pixel_error_to_degrees(camera: CameraModel, pixel_error: float) -> float:
    if pixel_error < 0:
        raise GeometryError("pixel_error must be non-negative")
    return pixel_error * camera.degrees_per_pixel_linear


# -- key-value (INI) serialization -------------------------------------------

def rig_to_ini(rig: RigConfig) -> str:
    cp = configparser.ConfigParser()
    cp["rig"] = {
        "rig_id": rig.rig_id,
        "speed_of_sound": repr(rig.layout.speed_of_sound),
        "reference_index": str(rig.layout.reference_index),
    }
    cp["microphones"] = {
        f"mic{i:02d}": ", ".join(repr(float(v)) for v in p)
        for i, p in enumerate(rig.layout.positions)
    }
    for cam in rig.cameras:
        cp[f"camera.{cam.camera_id}"] = {
            "focal_length_px": repr(cam.focal_length_px),
            "principal_point_px": repr(cam.principal_point_px),
            "image_width_px": str(cam.image_width_px),
            "degrees_per_pixel_linear": repr(cam.degrees_per_pixel_linear),
            "position_m": ", ".join(repr(float(v)) for v in cam.position_m),
        }
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


_CAMERA_KEYS = {"focal_length_px", "principal_point_px", "image_width_px",
                "degrees_per_pixel_linear", "position_m"}


def rig_from_ini(text: str) -> RigConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise GeometryError(f"malformed rig file: {exc}") from exc
    try:
        head = cp["rig"]
        unknown = set(head) - {"rig_id", "speed_of_sound", "reference_index"}
        if unknown:
            raise GeometryError(f"unknown keys in [rig]: {sorted(unknown)}")
        mics = cp["microphones"]
        positions = tuple(_floats(mics[f"mic{i:02d}"]) for i in range(N_MICS))
        if len(mics) != N_MICS:
            raise GeometryError(f"expected {N_MICS} microphone rows, got {len(mics)}")
        layout = MicrophoneArrayLayout(
            positions=positions,
            reference_index=head.getint("reference_index"),
            speed_of_sound=head.getfloat("speed_of_sound", SPEED_OF_SOUND),
        )
        cameras = []
        for section in cp.sections():
            if not section.startswith("camera."):
                if section not in ("rig", "microphones"):
                    raise GeometryError(f"unknown section [{section}]")
                continue
            s = cp[section]
            unknown = set(s) - _CAMERA_KEYS
            if unknown:
                raise GeometryError(f"unknown keys in [{section}]: {sorted(unknown)}")
            cameras.append(CameraModel(
                camera_id=int(section.split(".", 1)[1]),
                focal_length_px=s.getfloat("focal_length_px"),
                principal_point_px=s.getfloat("principal_point_px"),
                image_width_px=s.getint("image_width_px", DEFAULT_IMAGE_WIDTH),
                degrees_per_pixel_linear=s.getfloat("degrees_per_pixel_linear", DEGREES_PER_PIXEL),
                position_m=_floats(s.get("position_m", "0, 0, 0")),
            ))
    except (KeyError, TypeError) as exc:
        raise GeometryError(f"malformed rig file: missing {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, GeometryError):
            raise
        raise GeometryError(f"malformed rig file: {exc}") from exc
    cameras.sort(key=lambda c: c.camera_id)
    return RigConfig(layout=layout, cameras=tuple(cameras), rig_id=head.get("rig_id", "rig"))


def load_rig(path: str | Path | None) -> RigConfig:
    if path is None or str(path) == "default":
        return build_default_rig()
    return rig_from_ini(Path(path).read_text())


def save_rig(rig: RigConfig, path: str | Path) -> None:
    Path(path).write_text(rig_to_ini(rig))
