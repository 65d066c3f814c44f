"""Progressive patch-size curricula for 3D segmentation."""

__version__ = "0.1.0"

from .arch import ArchitectureSpec, PatchSize3D, axis_steps, is_legal_patch, min_patch
from .curriculum import (
    CurriculumPlan,
    Scheme,
    Stage,
    allocate_epochs,
    build_plan,
    generate_stages,
    plan_pgps_batches,
    plan_pgps_plus_batches,
    voxels_shown_fraction,
)
from .fixtures import get_task, task_presets, verify_fixtures

__all__ = [
    "ArchitectureSpec",
    "CurriculumPlan",
    "PatchSize3D",
    "Scheme",
    "Stage",
    "allocate_epochs",
    "axis_steps",
    "build_plan",
    "generate_stages",
    "get_task",
    "is_legal_patch",
    "min_patch",
    "plan_pgps_batches",
    "plan_pgps_plus_batches",
    "task_presets",
    "verify_fixtures",
    "voxels_shown_fraction",
]
