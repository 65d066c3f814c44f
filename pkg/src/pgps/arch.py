"""Architecture constraints that decide which patch sizes a network accepts.

A fully convolutional encoder with ``k`` stride-2 poolings along an axis can
only consume extents that are multiples of ``2**k`` along that axis.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

MAX_POOLINGS = 8
_U64_MAX = 2**64 - 1


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSize3D:
    """Spatial patch extent in voxels, ordered width, height, depth."""

    dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3:
            raise ArchError(f"patch needs 3 dims, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ArchError(f"patch dims must be >= 1, got {dims}")
        if dims[0] * dims[1] * dims[2] > _U64_MAX:
            raise ArchError(f"patch {dims} overflows 64-bit voxel count")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, text: str) -> "PatchSize3D":
        """Parse ``"80x192x160"`` (``*`` and ``,`` are accepted as separators too)."""
        parts = text.replace("*", "x").replace(",", "x").lower().split("x")
        try:
            return cls(tuple(int(p) for p in parts))
        except ValueError:
            raise ArchError(f"cannot parse patch size {text!r}") from None

    @property
    def voxel_count(self) -> int:
        w, h, d = self.dims
        return w * h * d

    def __iter__(self):
        return iter(self.dims)

    def __getitem__(self, i: int) -> int:
        return self.dims[i]

    def __str__(self) -> str:
        return "x".join(str(d) for d in self.dims)

    def elementwise_max(self, other: "PatchSize3D") -> "PatchSize3D":
        return PatchSize3D(tuple(max(a, b) for a, b in zip(self.dims, other.dims)))


@dataclass(frozen=True)
class ArchitectureSpec:
    """Per-axis pooling counts of a task's network, plus an optional explicit minimal patch."""

    poolings_per_axis: Tuple[int, int, int]
    name: str = ""
    min_patch_override: Optional[PatchSize3D] = None

    def __post_init__(self) -> None:
        pools = tuple(int(p) for p in self.poolings_per_axis)
        if len(pools) != 3:
            raise ArchError(f"poolings_per_axis needs 3 entries, got {len(pools)}")
        for axis, p in enumerate(pools):
            if not 0 <= p <= MAX_POOLINGS:
                raise ArchError(f"poolings_per_axis[{axis}]={p} outside [0, {MAX_POOLINGS}]")
        object.__setattr__(self, "poolings_per_axis", pools)
        override = self.min_patch_override
        if override is not None:
            if not isinstance(override, PatchSize3D):
                override = PatchSize3D(tuple(override))
                object.__setattr__(self, "min_patch_override", override)
            steps = axis_steps(self)
            for axis, (d, s) in enumerate(zip(override.dims, steps)):
                if d % s:
                    raise ArchError(
                        f"min_patch_override[{axis}]={d} is not a multiple of step {s}"
                    )

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureSpec":
        unknown = set(doc) - {"name", "poolings_per_axis", "min_patch_override"}
        if unknown:
            raise ArchError(f"unknown architecture keys: {sorted(unknown)}")
        if "poolings_per_axis" not in doc:
            raise ArchError("missing key: poolings_per_axis")
        override = doc.get("min_patch_override")
        return cls(
            poolings_per_axis=tuple(doc["poolings_per_axis"]),
            name=str(doc.get("name", "")),
            min_patch_override=PatchSize3D(tuple(override)) if override is not None else None,
        )

    def to_dict(self) -> dict:
        doc = {"name": self.name, "poolings_per_axis": list(self.poolings_per_axis)}
        if self.min_patch_override is not None:
            doc["min_patch_override"] = list(self.min_patch_override.dims)
        return doc


def load_architecture(path: "str | os.PathLike") -> ArchitectureSpec:
    with open(path, "r", encoding="utf-8") as f:
        return ArchitectureSpec.from_dict(json.load(f))


def axis_steps(spec: ArchitectureSpec) -> Tuple[int, int, int]:
    """Smallest legal per-axis increment, ``2**poolings``."""
    return tuple(2**p for p in spec.poolings_per_axis)


def min_patch(spec: ArchitectureSpec) -> PatchSize3D:
    """Smallest patch the network accepts.

    Unless overridden, the first axis gets two steps and the others one.
    """
    if spec.min_patch_override is not None:
        return spec.min_patch_override
    s0, s1, s2 = axis_steps(spec)
    return PatchSize3D((2 * s0, s1, s2))


def is_legal_patch(spec: ArchitectureSpec, patch: "PatchSize3D | Sequence[int]") -> bool:
    if not isinstance(patch, PatchSize3D):
        patch = PatchSize3D(tuple(patch))
    lo = min_patch(spec)
    return all(
        d > 0 and d % s == 0 and d >= m
        for d, s, m in zip(patch.dims, axis_steps(spec), lo.dims)
    )


def check_legal_patch(spec: ArchitectureSpec, patch: PatchSize3D, what: str = "patch") -> None:
    """Raise ArchError naming the first offending axis if ``patch`` is illegal."""
    lo = min_patch(spec)
    for axis, (d, s, m) in enumerate(zip(patch.dims, axis_steps(spec), lo.dims)):
        if d % s:
            raise ArchError(f"{what} axis {axis}: {d} is not a multiple of step {s}")
        if d < m:
            raise ArchError(f"{what} axis {axis}: {d} is below minimal patch {m}")


def as_patch(value: "PatchSize3D | Iterable[int] | str") -> PatchSize3D:
    if isinstance(value, PatchSize3D):
        return value
    if isinstance(value, str):
        return PatchSize3D.parse(value)
    return PatchSize3D(tuple(value))
