"""Patch-size curricula: stage generation, batch sizes, epoch budgets and voxel accounting."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from .arch import ArchError, ArchitectureSpec, PatchSize3D, as_patch, axis_steps, check_legal_patch, min_patch

MAX_BATCH = 24
# Round-robin order over axes. Starting at axis 1 continues the cycle begun by
# the extra first-axis step of the minimal patch.
DEFAULT_AXIS_CYCLE = (1, 2, 0)


class ScheduleError(ValueError):
    pass


class AccountingError(ValueError):
    pass


class Scheme(str, enum.Enum):
    CPS = "CPS"
    PGPS = "PGPS"
    PGPS_PLUS = "PGPS_PLUS"
    RPSS = "RPSS"

    @classmethod
    def parse(cls, text: "str | Scheme") -> "Scheme":
        if isinstance(text, Scheme):
            return text
        key = str(text).strip().upper().replace("+", "_PLUS").replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ScheduleError(f"unknown scheme {text!r}") from None

    @property
    def cli_name(self) -> str:
        return {"PGPS_PLUS": "pgps+"}.get(self.value, self.value.lower())


@dataclass(frozen=True)
class Stage:
    patch: PatchSize3D
    batch: int
    epochs: int
    iterations_per_epoch: int = 250

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch", as_patch(self.patch))
        if self.batch < 1:
            raise ScheduleError(f"stage batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ScheduleError(f"stage epochs must be >= 0, got {self.epochs}")
        if self.iterations_per_epoch < 1:
            raise ScheduleError(f"iterations_per_epoch must be >= 1, got {self.iterations_per_epoch}")

    @property
    def tensor_voxels(self) -> int:
        return self.batch * self.patch.voxel_count

    @property
    def iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


@dataclass(frozen=True)
class CurriculumPlan:
    scheme: Scheme
    stages: Tuple[Stage, ...]
    total_epochs: int
    default_batch: int
    iterations_per_epoch: int = 250
    notes: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self, steps: Optional[Sequence[int]] = None) -> None:
        """Check plan invariants; with ``steps`` also check one-step growth between stages."""
        if not self.stages:
            raise ScheduleError("plan has no stages")
        if self.default_batch < 1:
            raise ScheduleError("default_batch must be >= 1")
        if self.total_epochs < 0:
            raise ScheduleError("total_epochs must be >= 0")
        if sum(s.epochs for s in self.stages) != self.total_epochs:
            raise ScheduleError(
                f"stage epochs sum to {sum(s.epochs for s in self.stages)}, "
                f"expected total_epochs={self.total_epochs}"
            )
        if self.scheme is Scheme.CPS and len(self.stages) != 1:
            raise ScheduleError("CPS plans have exactly one stage")
        for k, (a, b) in enumerate(zip(self.stages, self.stages[1:])):
            diff = [(axis, y - x) for axis, (x, y) in enumerate(zip(a.patch, b.patch)) if x != y]
            if len(diff) != 1 or diff[0][1] <= 0:
                raise ScheduleError(f"stages {k} -> {k + 1} must grow exactly one axis")
            if steps is not None and diff[0][1] != steps[diff[0][0]]:
                raise ScheduleError(
                    f"stages {k} -> {k + 1} grow axis {diff[0][0]} by {diff[0][1]}, "
                    f"expected step {steps[diff[0][0]]}"
                )

    @property
    def max_patch(self) -> PatchSize3D:
        return self.stages[-1].patch

    @property
    def total_iterations(self) -> int:
        return self.total_epochs * self.iterations_per_epoch

    def stage_for_epoch(self, epoch: int) -> int:
        """Index of the stage that owns ``epoch`` (0-based) for stage-ordered schemes."""
        acc = 0
        for k, s in enumerate(self.stages):
            acc += s.epochs
            if epoch < acc:
                return k
        raise ScheduleError(f"epoch {epoch} beyond plan of {self.total_epochs} epochs")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "default_batch": self.default_batch,
            "total_epochs": self.total_epochs,
            "iterations_per_epoch": self.iterations_per_epoch,
            "stages": [
                {"patch": list(s.patch.dims), "batch": s.batch, "epochs": s.epochs}
                for s in self.stages
            ],
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc: dict) -> "CurriculumPlan":
        iters = int(doc.get("iterations_per_epoch", 250))
        stages = tuple(
            Stage(
                patch=PatchSize3D(tuple(s["patch"])),
                batch=int(s["batch"]),
                epochs=int(s["epochs"]),
                iterations_per_epoch=iters,
            )
            for s in doc["stages"]
        )
        return cls(
            scheme=Scheme.parse(doc["scheme"]),
            stages=stages,
            total_epochs=int(doc["total_epochs"]),
            default_batch=int(doc["default_batch"]),
            iterations_per_epoch=iters,
        )


def generate_stages(
    min_patch: "PatchSize3D | Sequence[int]",
    max_patch: "PatchSize3D | Sequence[int]",
    steps: Sequence[int],
    axis_cycle: Sequence[int] = DEFAULT_AXIS_CYCLE,
) -> List[PatchSize3D]:
    """Grow ``min_patch`` to ``max_patch`` one axis step at a time.

    Axes are visited round-robin in ``axis_cycle`` order; an axis that has
    reached its target is skipped.
    """
    lo, hi = as_patch(min_patch), as_patch(max_patch)
    if sorted(axis_cycle) != [0, 1, 2]:
        raise ScheduleError(f"axis_cycle must be a permutation of (0, 1, 2), got {axis_cycle}")
    remaining = []
    for axis, (a, b, s) in enumerate(zip(lo, hi, steps)):
        if s < 1:
            raise ScheduleError(f"axis {axis}: step must be positive, got {s}")
        if b < a:
            raise ScheduleError(f"axis {axis}: max {b} is below min {a}")
        if (b - a) % s:
            raise ScheduleError(f"axis {axis}: max-min={b - a} is not divisible by step {s}")
        remaining.append((b - a) // s)

    current = list(lo.dims)
    stages = [PatchSize3D(tuple(current))]
    while any(remaining):
        for axis in axis_cycle:
            if remaining[axis]:
                current[axis] += steps[axis]
                remaining[axis] -= 1
                stages.append(PatchSize3D(tuple(current)))
    return stages


def plan_pgps_plus_batches(stage_voxels: Sequence[int], default_batch: int) -> List[int]:
    """Backward-chained PGPS+ batch sizes.

    The final stage keeps ``default_batch``; each earlier stage takes the largest
    batch whose tensor does not exceed the next stage's tensor, clamped to
    ``[default_batch, MAX_BATCH]``.
    """
    if not stage_voxels:
        raise ScheduleError("no stages to plan batches for")
    if default_batch < 1:
        raise ScheduleError(f"default_batch must be >= 1, got {default_batch}")
    batches = [default_batch]
    for k in range(len(stage_voxels) - 2, -1, -1):
        b = (batches[0] * stage_voxels[k + 1]) // stage_voxels[k]
        batches.insert(0, min(max(b, default_batch), MAX_BATCH))
    return batches


def plan_pgps_batches(n_stages: int, default_batch: int) -> List[int]:
    if n_stages < 1:
        raise ScheduleError(f"n_stages must be >= 1, got {n_stages}")
    return [default_batch] * n_stages


def allocate_epochs(total_epochs: int, n_stages: int) -> List[int]:
    """Equal epochs per stage, remainder to the last (largest) stage."""
    if n_stages < 1:
        raise ScheduleError(f"n_stages must be >= 1, got {n_stages}")
    if total_epochs < 0:
        raise ScheduleError(f"total_epochs must be >= 0, got {total_epochs}")
    base, rem = divmod(total_epochs, n_stages)
    epochs = [base] * n_stages
    epochs[-1] += rem
    return epochs


def voxels_shown(plan: CurriculumPlan) -> Fraction:
    """Voxels consumed by a plan; for RPSS the expectation over uniform stage draws."""
    if plan.scheme is Scheme.RPSS:
        mean_v = Fraction(sum(s.patch.voxel_count for s in plan.stages), len(plan.stages))
        return mean_v * plan.default_batch * plan.total_iterations
    return Fraction(sum(s.tensor_voxels * s.iterations for s in plan.stages))


def voxels_shown_fraction(plan: CurriculumPlan, baseline: CurriculumPlan) -> float:
    """Voxels shown by ``plan`` relative to ``baseline`` (normally the CPS plan)."""
    denom = voxels_shown(baseline)
    if denom == 0:
        raise AccountingError("baseline plan shows zero voxels")
    return float(voxels_shown(plan) / denom)


def build_plan(
    spec: ArchitectureSpec,
    max_patch: "PatchSize3D | Sequence[int]",
    scheme: "Scheme | str",
    default_batch: int,
    total_epochs: int,
    iterations_per_epoch: int = 250,
    batch_override: Optional[Sequence[int]] = None,
) -> CurriculumPlan:
    """Compose stages, batch sizes and epoch budgets into a validated plan.

    ``batch_override`` replaces the computed PGPS+ batch column (used for
    published columns the backward rule does not reproduce).
    """
    scheme = Scheme.parse(scheme)
    top = as_patch(max_patch)
    try:
        check_legal_patch(spec, top, "max_patch")
    except ArchError as exc:
        raise ScheduleError(str(exc)) from None
    steps = axis_steps(spec)
    notes: List[str] = []

    if scheme is Scheme.CPS:
        patches = [top]
    else:
        patches = generate_stages(min_patch(spec), top, steps)

    if scheme is Scheme.PGPS_PLUS:
        batches = plan_pgps_plus_batches([p.voxel_count for p in patches], default_batch)
        if batch_override is not None:
            if len(batch_override) != len(patches):
                raise ScheduleError(
                    f"batch_override has {len(batch_override)} entries for {len(patches)} stages"
                )
            if list(batch_override) != batches:
                notes.append(
                    f"batch override applied: rule gives {batches}, using {list(batch_override)}"
                )
            batches = [int(b) for b in batch_override]
    else:
        batches = plan_pgps_batches(len(patches), default_batch)

    epochs = allocate_epochs(total_epochs, len(patches))
    stages = tuple(
        Stage(p, b, e, iterations_per_epoch) for p, b, e in zip(patches, batches, epochs)
    )
    plan = CurriculumPlan(
        scheme=scheme,
        stages=stages,
        total_epochs=total_epochs,
        default_batch=default_batch,
        iterations_per_epoch=iterations_per_epoch,
        notes=tuple(notes),
    )
    plan.validate(steps)
    return plan
