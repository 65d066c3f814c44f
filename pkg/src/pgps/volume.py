"""Dense 3D image/label containers, a raw little-endian file format, and synthetic blob data."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

VOLUME_MAGIC = b"PGPSVOL1".ljust(16, b"\0")
LABEL_MAGIC = b"PGPSLAB1".ljust(16, b"\0")
_HEADER = 16 + 3 * 8
_MAX_DIM = 2**31 - 1


class FormatError(ValueError):
    pass


class GenerationError(ValueError):
    pass


def _shape3(shape) -> Tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"shape must be 3 positive ints, got {shape}")
    return shape


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar float32 image indexed ``[w, h, d]`` (C order)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        _shape3(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, Volume) and self.data.tobytes() == other.data.tobytes() and self.shape == other.shape


@dataclass(frozen=True, eq=False)
class LabelVolume:
    labels: np.ndarray
    n_classes: int = 2

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.labels, dtype=np.uint8)
        _shape3(arr.shape)
        if not 2 <= self.n_classes <= 256:
            raise ValueError(f"n_classes must be in [2, 256], got {self.n_classes}")
        if arr.size and int(arr.max()) >= self.n_classes:
            raise ValueError(f"label {int(arr.max())} >= n_classes {self.n_classes}")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape

    @property
    def foreground_fraction(self) -> float:
        return float(np.count_nonzero(self.labels)) / self.labels.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabelVolume)
            and self.n_classes == other.n_classes
            and self.shape == other.shape
            and self.labels.tobytes() == other.labels.tobytes()
        )


def save_volume(vol: Volume, path: "str | os.PathLike") -> None:
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<3Q", *vol.shape))
        f.write(vol.data.astype("<f4", copy=False).tobytes())


def save_labels(lab: LabelVolume, path: "str | os.PathLike") -> None:
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<3Q", *lab.shape))
        f.write(struct.pack("<Q", lab.n_classes))
        f.write(lab.labels.tobytes())


def _read_header(buf: bytes, magic: bytes) -> Tuple[int, int, int]:
    if len(buf) < 16:
        raise FormatError(f"truncated magic at byte offset {len(buf)}")
    if buf[:16] != magic:
        raise FormatError(f"magic mismatch at byte offset 0: {buf[:16]!r}")
    if len(buf) < _HEADER:
        raise FormatError(f"truncated header at byte offset {len(buf)}")
    dims = struct.unpack_from("<3Q", buf, 16)
    for i, d in enumerate(dims):
        if d < 1 or d > _MAX_DIM:
            raise FormatError(f"dim {d} out of range at byte offset {16 + 8 * i}")
    return dims


def load_volume(path: "str | os.PathLike") -> Volume:
    with open(path, "rb") as f:
        buf = f.read()
    dims = _read_header(buf, VOLUME_MAGIC)
    n = dims[0] * dims[1] * dims[2]
    if n * 4 > 2**62:
        raise FormatError("dims overflow payload size at byte offset 16")
    end = _HEADER + 4 * n
    if len(buf) < end:
        raise FormatError(f"truncated payload at byte offset {len(buf)}, expected {end} bytes")
    if len(buf) > end:
        raise FormatError(f"trailing data at byte offset {end}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER).reshape(dims)
    try:
        return Volume(data.astype(np.float32))
    except ValueError as exc:
        raise FormatError(f"{exc} in payload starting at byte offset {_HEADER}") from None


def load_labels(path: "str | os.PathLike") -> LabelVolume:
    with open(path, "rb") as f:
        buf = f.read()
    dims = _read_header(buf, LABEL_MAGIC)
    if len(buf) < _HEADER + 8:
        raise FormatError(f"truncated n_classes at byte offset {len(buf)}")
    (n_classes,) = struct.unpack_from("<Q", buf, _HEADER)
    n = dims[0] * dims[1] * dims[2]
    start = _HEADER + 8
    end = start + n
    if len(buf) < end:
        raise FormatError(f"truncated payload at byte offset {len(buf)}, expected {end} bytes")
    if len(buf) > end:
        raise FormatError(f"trailing data at byte offset {end}")
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start).reshape(dims)
    try:
        return LabelVolume(labels.copy(), int(n_classes))
    except ValueError as exc:
        raise FormatError(f"{exc} (header n_classes at byte offset {_HEADER})") from None


def synth_blobs(
    shape=(64, 64, 64),
    n_blobs: int = 3,
    radius_range: Tuple[float, float] = (4.0, 10.0),
    seed: int = 0,
) -> Tuple[Volume, LabelVolume]:
    """Noise background in [0, 0.3] with ``n_blobs`` axis-aligned ellipsoids of label 1.

    Blob intensities lie in [0.6, 1.0]; the same seed always gives the same pair.
    """
    shape = _shape3(shape)
    lo, hi = float(radius_range[0]), float(radius_range[1])
    if n_blobs < 0:
        raise GenerationError(f"n_blobs must be >= 0, got {n_blobs}")
    if not 0 < lo <= hi:
        raise GenerationError(f"bad radius range {radius_range}")
    if n_blobs and 2 * hi >= min(shape):
        raise GenerationError(f"radius {hi} does not fit inside shape {shape}")

    rng = np.random.Generator(np.random.Philox(key=seed))
    image = rng.uniform(0.0, 0.3, size=shape).astype(np.float32)
    labels = np.zeros(shape, dtype=np.uint8)
    grids = np.ogrid[: shape[0], : shape[1], : shape[2]]
    for _ in range(n_blobs):
        radii = rng.uniform(lo, hi, size=3)
        centre = [rng.uniform(r, s - 1 - r) for r, s in zip(radii, shape)]
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii)) <= 1.0
        if not inside.any():
            raise GenerationError("blob contains no voxel")
        base = rng.uniform(0.7, 0.9)
        texture = rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)
        image[inside] = np.clip(base + texture[inside], 0.6, 1.0)
        labels[inside] = 1
    return Volume(image), LabelVolume(labels, 2)
