"""Published MSD patch/batch tables and the task presets derived from them."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Optional, Tuple

from .arch import ArchitectureSpec, PatchSize3D, axis_steps, min_patch
from .curriculum import (
    CurriculumPlan,
    Scheme,
    build_plan,
    generate_stages,
    plan_pgps_plus_batches,
)

TASK_ORDER = (
    "brain",
    "heart",
    "liver",
    "hippocampus",
    "prostate",
    "lung",
    "pancreas",
    "hepatic_vessel",
    "spleen",
    "colon",
)


@dataclass(frozen=True)
class FixtureStage:
    patch: PatchSize3D
    batch: int


@dataclass(frozen=True)
class TaskPreset:
    key: str
    arch: ArchitectureSpec
    max_patch: PatchSize3D
    default_batch: int
    stages: Tuple[FixtureStage, ...]
    batch_override: bool = False

    def plan(
        self,
        scheme: "Scheme | str" = Scheme.PGPS_PLUS,
        total_epochs: int = 1000,
        iterations_per_epoch: int = 250,
        default_batch: Optional[int] = None,
    ) -> CurriculumPlan:
        override = None
        batch = self.default_batch if default_batch is None else default_batch
        if self.batch_override and batch == self.default_batch:
            override = [s.batch for s in self.stages]
        return build_plan(
            self.arch,
            self.max_patch,
            scheme,
            batch,
            total_epochs,
            iterations_per_epoch,
            batch_override=override,
        )


def load_fixture_document(text: Optional[str] = None) -> dict:
    if text is None:
        text = resources.files("pgps").joinpath("data/msd_fixtures.json").read_text("utf-8")
    return json.loads(text)


def parse_presets(doc: dict) -> Dict[str, TaskPreset]:
    presets = {}
    for key, task in doc["tasks"].items():
        stages = tuple(
            FixtureStage(PatchSize3D(tuple(s["patch"])), int(s["batch"]))
            for s in task["plan"]["stages"]
        )
        presets[key] = TaskPreset(
            key=key,
            arch=ArchitectureSpec(tuple(task["poolings_per_axis"]), name=task["name"]),
            max_patch=stages[-1].patch,
            default_batch=int(task["plan"]["default_batch"]),
            stages=stages,
            batch_override=bool(task.get("batch_override", False)),
        )
    return presets


@lru_cache(maxsize=1)
def _embedded_presets() -> Dict[str, TaskPreset]:
    return parse_presets(load_fixture_document())


def task_presets() -> Dict[str, TaskPreset]:
    return dict(_embedded_presets())


def get_task(key: str) -> TaskPreset:
    norm = key.strip().lower().replace("-", "_").replace(" ", "_")
    presets = _embedded_presets()
    if norm not in presets:
        raise KeyError(f"unknown task {key!r}; choose from {', '.join(TASK_ORDER)}")
    return presets[norm]


@dataclass
class TaskCheck:
    task: str
    patch_ok: bool
    batch_ok: bool
    batch_exception: bool
    n_stages: int
    first_patch_divergence: Optional[int] = None
    first_batch_divergence: Optional[int] = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.patch_ok and (self.batch_ok or self.batch_exception)


def check_task(preset: TaskPreset) -> TaskCheck:
    """Compare the generated PGPS+ plan for one task with its published columns.

    Batches are checked against the plain backward rule, so an overridden
    column is reported as an exception rather than a silent pass.
    """
    expected = [s.patch for s in preset.stages]
    try:
        got = generate_stages(min_patch(preset.arch), preset.max_patch, axis_steps(preset.arch))
    except ValueError as exc:
        return TaskCheck(preset.key, False, False, False, 0, 0, None, str(exc))

    patch_div = _first_divergence(got, expected)
    rule = plan_pgps_plus_batches([p.voxel_count for p in got], preset.default_batch)
    published = [s.batch for s in preset.stages]
    batch_div = _first_divergence(rule, published)

    detail = []
    if patch_div is not None:
        g = str(got[patch_div]) if patch_div < len(got) else "<none>"
        e = str(expected[patch_div]) if patch_div < len(expected) else "<none>"
        detail.append(f"patch stage {patch_div + 1}: generated {g}, published {e}")
    exception = batch_div is not None and preset.batch_override
    if batch_div is not None:
        g = rule[batch_div] if batch_div < len(rule) else None
        e = published[batch_div] if batch_div < len(published) else None
        tag = "override in use" if exception else "mismatch"
        detail.append(f"batch stage {batch_div + 1}: rule {g}, published {e} ({tag})")
    return TaskCheck(
        task=preset.key,
        patch_ok=patch_div is None,
        batch_ok=batch_div is None,
        batch_exception=exception,
        n_stages=len(expected),
        first_patch_divergence=patch_div,
        first_batch_divergence=batch_div,
        detail="; ".join(detail),
    )


def verify_fixtures(presets: Optional[Dict[str, TaskPreset]] = None) -> List[TaskCheck]:
    presets = presets if presets is not None else _embedded_presets()
    order = [k for k in TASK_ORDER if k in presets] + sorted(set(presets) - set(TASK_ORDER))
    return [check_task(presets[k]) for k in order]


def _first_divergence(a, b) -> Optional[int]:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None
