"""Patch extraction with zero padding and forced-foreground batch composition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .arch import PatchSize3D, as_patch
from .volume import LabelVolume, Volume


class SamplerError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; ``(seed, stream)`` fully determines the sequence."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), stream & (2**64 - 1)]))


@dataclass
class PatchRequest:
    size: PatchSize3D
    force_foreground: bool
    rng: np.random.Generator

    def __post_init__(self) -> None:
        self.size = as_patch(self.size)


@dataclass(frozen=True)
class Patch:
    image: np.ndarray
    labels: np.ndarray
    origin: Tuple[int, int, int]
    forced: bool


def _foreground_index(lab: LabelVolume) -> np.ndarray:
    # Cached on the (immutable) label volume; flat indices of non-zero labels.
    idx = lab.__dict__.get("_fg_index")
    if idx is None:
        idx = np.flatnonzero(lab.labels)
        object.__setattr__(lab, "_fg_index", idx)
    return idx


def _origin_bounds(shape: Sequence[int], size: Sequence[int]):
    lo = [min(0, s - p) for s, p in zip(shape, size)]
    hi = [max(0, s - p) for s, p in zip(shape, size)]
    return lo, hi


def crop(array: np.ndarray, origin: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """Crop ``size`` at ``origin`` (may be negative / overhang); outside is zero."""
    out = np.zeros(tuple(size), dtype=array.dtype)
    src, dst = [], []
    for o, p, s in zip(origin, size, array.shape):
        a, b = max(o, 0), min(o + p, s)
        if b <= a:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    out[tuple(dst)] = array[tuple(src)]
    return out


def sample_patch(vol: Volume, lab: LabelVolume, req: PatchRequest) -> Patch:
    """Draw one patch of ``req.size``.

    Forced patches are centred on a uniformly drawn foreground voxel and shifted
    to stay inside the volume where possible; if the label map has no
    foreground the draw falls back to a uniform origin.
    """
    if vol.shape != lab.shape:
        raise SamplerError(f"volume shape {vol.shape} != label shape {lab.shape}")
    size = req.size.dims
    lo, hi = _origin_bounds(vol.shape, size)
    fg = _foreground_index(lab) if req.force_foreground else None
    forced = fg is not None and fg.size > 0
    if forced:
        centre = np.unravel_index(int(fg[req.rng.integers(fg.size)]), vol.shape)
        origin = tuple(
            int(min(max(c - p // 2, l), h)) for c, p, l, h in zip(centre, size, lo, hi)
        )
    else:
        origin = tuple(int(req.rng.integers(l, h + 1)) for l, h in zip(lo, hi))
    return Patch(
        image=crop(vol.data, origin, size),
        labels=crop(lab.labels, origin, size),
        origin=origin,
        forced=forced,
    )


def n_forced(batch: int) -> int:
    return (batch + 1) // 2


def compose_batch(
    vol: Volume,
    lab: LabelVolume,
    size: "PatchSize3D | Sequence[int]",
    batch: int,
    rng: np.random.Generator,
) -> List[Patch]:
    """``ceil(batch/2)`` forced-foreground patches first, the rest unconstrained."""
    return compose_case_batch([(vol, lab)], size, batch, rng, pick_case=False)


def compose_case_batch(
    cases: Sequence[Tuple[Volume, LabelVolume]],
    size: "PatchSize3D | Sequence[int]",
    batch: int,
    rng: np.random.Generator,
    pick_case: bool = True,
) -> List[Patch]:
    """Like :func:`compose_batch` but each patch comes from a randomly chosen case."""
    if batch < 1:
        raise SamplerError(f"batch must be >= 1, got {batch}")
    if not cases:
        raise SamplerError("no cases to sample from")
    size = as_patch(size)
    forced = n_forced(batch)
    patches = []
    for i in range(batch):
        k = int(rng.integers(len(cases))) if pick_case else 0
        vol, lab = cases[k]
        patches.append(sample_patch(vol, lab, PatchRequest(size, i < forced, rng)))
    return patches


def stack(patches: Sequence[Patch]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack into ``(B, 1, w, h, d)`` float32 images and ``(B, w, h, d)`` labels."""
    images = np.stack([p.image for p in patches])[:, None]
    labels = np.stack([p.labels for p in patches])
    return images, labels
