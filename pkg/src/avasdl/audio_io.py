"""Multichannel WAV files and the binary array blob used for feature tensors.

Array blob layout (all integers little-endian)::

    magic      8 bytes   b"ASDLARR1"
    dtype_len  u8        length of the numpy dtype string
    dtype      ascii     e.g. "<f4", "<f8"
    ndim       u8
    shape      ndim x u32
    data       raw little-endian values, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

BLOB_MAGIC = b"ASDLARR1"


class AudioFormatError(ValueError):
    pass


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(samples, sample_rate)`` with samples shaped (channels, n) in [-1, 1)."""
    try:
        sr, data = wavfile.read(str(path))
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.ndim == 1:
        data = data[:, None]
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    return np.ascontiguousarray(x.T), int(sr)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int, sample_format: str = "float32") -> None:
    x = np.asarray(samples)
    if x.ndim != 2:
        raise AudioFormatError("samples must be (channels, n)")
    if sample_format == "float32":
        data = x.T.astype(np.float32)
    elif sample_format == "int16":
        data = np.clip(np.round(x.T * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise AudioFormatError(f"unsupported sample format {sample_format!r}")
    wavfile.write(str(path), sample_rate, data)


def write_blob(path: str | Path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array)
    a = a.astype(a.dtype.newbyteorder("<"), copy=False)
    dt = a.dtype.str.encode("ascii")
    header = BLOB_MAGIC + struct.pack("<B", len(dt)) + dt + struct.pack("<B", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(a.tobytes())


def read_blob(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != BLOB_MAGIC:
        raise AudioFormatError(f"{path}: not an array blob")
    pos = 8
    (n,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    dt = np.dtype(buf[pos : pos + n].decode("ascii"))
    pos += n
    (ndim,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - pos != count * dt.itemsize:
        raise AudioFormatError(f"{path}: truncated array blob")
    return np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
