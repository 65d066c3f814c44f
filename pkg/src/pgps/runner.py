"""Run curriculum plans on the toy network and account for voxels, runtime and CO2."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .arch import ArchitectureSpec, PatchSize3D
from .curriculum import CurriculumPlan, Scheme, build_plan
from .sampler import compose_case_batch, make_rng, stack
from .toynet import NumericError, OptimState, ToyNet, dice_score, predict_volume, train_step
from .volume import LabelVolume, Volume, synth_blobs

log = logging.getLogger(__name__)

# Lung-shaped schedule at a quarter of the published scale: same 13 stages,
# same stage-voxel ratios, patches that fit 64^3 volumes.
TOY_LUNG_ARCH = ArchitectureSpec((2, 3, 3), name="toy_lung")
TOY_LUNG_MAX_PATCH = PatchSize3D((20, 48, 40))

# Wallclock-derived fields; excluded when comparing reports for determinism.
WALLCLOCK_KEYS = frozenset({"wallclock_seconds", "estimated_co2_grams", "seconds", "runtime_seconds"})

# Lung CPS row: 13.55 h, 5.59 kg CO2-eq, 1000 epochs x 250 iterations of 2 x 80x192x160.
LUNG_CPS_HOURS = 13.55
LUNG_CPS_GRAMS = 5590.0
LUNG_CPS_VOXELS = 1000 * 250 * 2 * 80 * 192 * 160
A100_WATTS = 400.0


class RunError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    device_power_watts: float = A100_WATTS
    grid_intensity_g_per_kwh: float = LUNG_CPS_GRAMS / (LUNG_CPS_HOURS * A100_WATTS / 1000.0)
    seconds_per_voxel: float = LUNG_CPS_HOURS * 3600.0 / LUNG_CPS_VOXELS

    def __post_init__(self) -> None:
        for name in ("device_power_watts", "grid_intensity_g_per_kwh", "seconds_per_voxel"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a positive finite number, got {v}")

    @classmethod
    def calibrated(
        cls,
        hours: float = LUNG_CPS_HOURS,
        grams: float = LUNG_CPS_GRAMS,
        device_power_watts: float = A100_WATTS,
        voxels: Optional[int] = LUNG_CPS_VOXELS,
    ) -> "CostModel":
        """Choose grid intensity (and seconds per voxel) so ``hours`` of training emit ``grams``."""
        intensity = grams / (hours * device_power_watts / 1000.0)
        spv = hours * 3600.0 / voxels if voxels else cls.seconds_per_voxel
        return cls(device_power_watts, intensity, spv)

    def grams_for_seconds(self, seconds: float) -> float:
        return seconds / 3600.0 * self.device_power_watts / 1000.0 * self.grid_intensity_g_per_kwh

    def seconds_for_voxels(self, voxels: int) -> float:
        return voxels * self.seconds_per_voxel


@dataclass
class NetConfig:
    channels: int = 8
    n_classes: int = 2
    learning_rate: float = 0.05
    momentum: float = 0.9
    poly_exponent: float = 0.9


@dataclass
class Dataset:
    train: List[Tuple[Volume, LabelVolume]]
    val: List[Tuple[Volume, LabelVolume]]

    def __post_init__(self) -> None:
        if not self.train:
            raise RunError("dataset has no training cases")
        if not self.val:
            raise RunError("dataset has no validation cases")


def synthetic_dataset(
    n_train: int = 4,
    n_val: int = 2,
    shape=(64, 64, 64),
    n_blobs: int = 3,
    radius_range=(4.0, 10.0),
    seed: int = 0,
) -> Dataset:
    cases = [
        synth_blobs(shape, n_blobs, radius_range, seed=seed * 1000 + i)
        for i in range(n_train + n_val)
    ]
    return Dataset(train=cases[:n_train], val=cases[n_train:])


@dataclass
class EpochRecord:
    epoch: int
    stage_index: Optional[int]
    patch: Optional[List[int]]
    batch: int
    iterations: int
    voxels: int
    loss: float
    val_dice: Optional[float]
    seconds: float = 0.0


@dataclass
class TrainReport:
    scheme: str
    seed: int
    records: List[EpochRecord] = field(default_factory=list)
    voxels_shown: int = 0
    iterations: int = 0
    wallclock_seconds: float = 0.0
    estimated_co2_grams: float = 0.0
    modelled_seconds: float = 0.0
    final_val_dice: Optional[float] = None
    case_dice: List[float] = field(default_factory=list)
    stage_draws: Optional[List[int]] = None
    truncated: bool = False
    valid: bool = True
    error: Optional[str] = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, mask_wallclock: bool = False) -> str:
        doc = self.to_dict()
        if mask_wallclock:
            doc = mask_wallclock_fields(doc)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainReport":
        doc = dict(doc)
        doc["records"] = [EpochRecord(**r) for r in doc.get("records", [])]
        return cls(**doc)

    def epoch_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "stage_index", "patch", "batch", "iterations", "voxels", "loss", "val_dice", "seconds"])
        for r in self.records:
            w.writerow([
                r.epoch,
                "" if r.stage_index is None else r.stage_index,
                "random" if r.patch is None else "x".join(map(str, r.patch)),
                r.batch,
                r.iterations,
                r.voxels,
                f"{r.loss:.6f}",
                "" if r.val_dice is None else f"{r.val_dice:.6f}",
                f"{r.seconds:.4f}",
            ])
        return buf.getvalue()


def mask_wallclock_fields(doc):
    if isinstance(doc, dict):
        return {k: (None if k in WALLCLOCK_KEYS else mask_wallclock_fields(v)) for k, v in doc.items()}
    if isinstance(doc, list):
        return [mask_wallclock_fields(v) for v in doc]
    return doc


def toy_lung_plan(
    scheme: "Scheme | str",
    total_epochs: int = 26,
    iterations_per_epoch: int = 10,
    default_batch: int = 2,
) -> CurriculumPlan:
    return build_plan(
        TOY_LUNG_ARCH, TOY_LUNG_MAX_PATCH, scheme, default_batch, total_epochs, iterations_per_epoch
    )


def validate(net: ToyNet, dataset: Dataset, tile: PatchSize3D, n_classes: int) -> List[float]:
    return [
        dice_score(predict_volume(net, vol.data, tile), lab.labels, n_classes)[1]
        for vol, lab in dataset.val
    ]


def run_experiment(
    plan: CurriculumPlan,
    dataset: Dataset,
    net_config: Optional[NetConfig] = None,
    seed: int = 0,
    voxel_budget: Optional[int] = None,
    cost_model: Optional[CostModel] = None,
    val_every: int = 1,
) -> TrainReport:
    """Train a fresh toy net under ``plan``.

    Stage schemes walk their stages in order; RPSS draws a uniform stage per
    iteration at the default batch. Validation always uses the maximal patch.
    With ``voxel_budget`` the run stops before the first iteration that would
    exceed it.
    """
    cfg = net_config or NetConfig()
    cost = cost_model or CostModel()
    net = ToyNet.init(cfg.channels, cfg.n_classes, seed=seed)
    optim = OptimState(cfg.learning_rate, cfg.momentum, cfg.poly_exponent)
    sample_rng = make_rng(seed, 1)
    report = TrainReport(
        scheme=plan.scheme.value,
        seed=seed,
        config={
            "plan": plan.to_dict(),
            "net": asdict(cfg),
            "voxel_budget": voxel_budget,
            "cost_model": asdict(cost),
            "val_every": val_every,
        },
    )
    rpss = plan.scheme is Scheme.RPSS
    if rpss:
        report.stage_draws = [0] * len(plan.stages)
        draws = iter(rpss_stage_draws(len(plan.stages), plan.total_iterations, seed))
    tile = plan.max_patch
    started = time.perf_counter()
    try:
        for epoch in range(plan.total_epochs):
            t0 = time.perf_counter()
            k = None if rpss else plan.stage_for_epoch(epoch)
            losses = []
            epoch_voxels = 0
            stop = False
            for _ in range(plan.iterations_per_epoch):
                if rpss:
                    j = next(draws)
                    report.stage_draws[j] += 1
                    patch, batch = plan.stages[j].patch, plan.default_batch
                else:
                    patch, batch = plan.stages[k].patch, plan.stages[k].batch
                step_voxels = batch * patch.voxel_count
                if voxel_budget is not None and report.voxels_shown + step_voxels > voxel_budget:
                    stop = True
                    break
                x, y = stack(compose_case_batch(dataset.train, patch, batch, sample_rng))
                losses.append(train_step(net, optim, x, y, epoch, plan.total_epochs))
                report.voxels_shown += step_voxels
                report.iterations += 1
                epoch_voxels += step_voxels
            val = None
            if losses and (stop or (epoch + 1) % val_every == 0 or epoch + 1 == plan.total_epochs):
                report.case_dice = validate(net, dataset, tile, cfg.n_classes)
                val = float(np.mean(report.case_dice))
                report.final_val_dice = val
            if losses:
                report.records.append(
                    EpochRecord(
                        epoch=epoch,
                        stage_index=k,
                        patch=None if rpss else list(plan.stages[k].patch.dims),
                        batch=plan.default_batch if rpss else plan.stages[k].batch,
                        iterations=len(losses),
                        voxels=epoch_voxels,
                        loss=float(np.mean(losses)),
                        val_dice=val,
                        seconds=time.perf_counter() - t0,
                    )
                )
            if stop:
                report.truncated = True
                break
    except (NumericError, FloatingPointError) as exc:
        report.valid = False
        report.error = f"numeric failure at epoch {epoch}: {exc}"
        log.error(report.error)
    report.wallclock_seconds = time.perf_counter() - started
    report.modelled_seconds = cost.seconds_for_voxels(report.voxels_shown)
    report.estimated_co2_grams = estimate_co2(report, cost)
    return report


def rpss_stage_draws(n_stages: int, n_iterations: int, seed: int) -> List[int]:
    """Uniform stage indices, one per iteration, from the seed's stage stream."""
    return make_rng(seed, 2).integers(n_stages, size=n_iterations).tolist()


def budget_matched_cps(plan: CurriculumPlan, voxel_budget: int) -> CurriculumPlan:
    """CPS plan at ``plan``'s maximal stage, just long enough to spend ``voxel_budget``."""
    top = plan.stages[-1]
    per_epoch = plan.default_batch * top.patch.voxel_count * plan.iterations_per_epoch
    epochs = max(1, -(-voxel_budget // per_epoch))
    return CurriculumPlan(
        scheme=Scheme.CPS,
        stages=(type(top)(top.patch, plan.default_batch, epochs, plan.iterations_per_epoch),),
        total_epochs=epochs,
        default_batch=plan.default_batch,
        iterations_per_epoch=plan.iterations_per_epoch,
    )


def extrapolate_cps_runtime(epoch_time_at_max_patch: float, n_epochs: int) -> float:
    """CPS runtime estimated from one measured epoch at the maximal patch."""
    if epoch_time_at_max_patch < 0 or n_epochs < 0:
        raise ValueError("epoch time and epoch count must be non-negative")
    return epoch_time_at_max_patch * n_epochs


def estimate_co2(report: "TrainReport | float", model: CostModel) -> float:
    """Grams CO2-eq: wallclock hours x device kW x grid intensity."""
    seconds = report.wallclock_seconds if isinstance(report, TrainReport) else float(report)
    return model.grams_for_seconds(seconds)


# --- iteration-budget sweep ---------------------------------------------------------


@dataclass
class SweepRow:
    fraction: float
    scheme: str
    mean_dice: float
    voxels: int
    voxel_fraction: float
    runtime_seconds: float
    n_seeds: int


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PGPS_THREADS", "1")))
    except ValueError:
        return 1


def _run_task(args) -> TrainReport:
    plan_doc, dataset_kwargs, cfg, seed, val_every = args
    plan = CurriculumPlan.from_dict(plan_doc)
    dataset = synthetic_dataset(**dataset_kwargs)
    return run_experiment(plan, dataset, NetConfig(**cfg), seed=seed, val_every=val_every)


def run_many(
    plans_and_seeds: Sequence[Tuple[CurriculumPlan, int]],
    dataset_kwargs: dict,
    net_config: Optional[NetConfig] = None,
    val_every: int = 1,
) -> List[TrainReport]:
    """Run independent (plan, seed) jobs, in parallel up to ``PGPS_THREADS`` processes."""
    cfg = asdict(net_config or NetConfig())
    jobs = [(p.to_dict(), dataset_kwargs, cfg, s, val_every) for p, s in plans_and_seeds]
    workers = min(_threads(), len(jobs))
    if workers <= 1:
        return [_run_task(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_task, jobs))


def sweep_iteration_budgets(
    fractions: Iterable[float],
    schemes: Iterable["Scheme | str"],
    seeds: Iterable[int],
    total_epochs: int = 26,
    iterations_per_epoch: int = 10,
    dataset_kwargs: Optional[dict] = None,
    net_config: Optional[NetConfig] = None,
    val_every: Optional[int] = None,
) -> Tuple[List[SweepRow], List[TrainReport]]:
    """Train every (fraction, scheme, seed) on the toy Lung schedule.

    ``fraction`` scales iterations per epoch; voxel fractions are relative to
    the full-budget CPS plan.
    """
    fractions = [float(f) for f in fractions]
    schemes = [Scheme.parse(s) for s in schemes]
    seeds = list(seeds)
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
    dataset_kwargs = dataset_kwargs or {}
    full_cps = toy_lung_plan(Scheme.CPS, total_epochs, iterations_per_epoch)
    full_voxels = full_cps.total_iterations * full_cps.default_batch * full_cps.max_patch.voxel_count

    keys, jobs = [], []
    for f in fractions:
        iters = max(1, math.floor(f * iterations_per_epoch + 0.5))
        if abs(iters - f * iterations_per_epoch) > 1e-9:
            log.warning("fraction %g of %d iterations rounded to %d", f, iterations_per_epoch, iters)
        for s in schemes:
            plan = toy_lung_plan(s, total_epochs, iters)
            for seed in seeds:
                keys.append((f, s))
                jobs.append((plan, seed))
    reports = run_many(jobs, dataset_kwargs, net_config, val_every or total_epochs)

    grouped: Dict[Tuple[float, Scheme], List[TrainReport]] = {}
    for key, rep in zip(keys, reports):
        grouped.setdefault(key, []).append(rep)
    rows = []
    for (f, s), reps in grouped.items():
        dice = [r.final_val_dice for r in reps if r.final_val_dice is not None]
        voxels = sum(r.voxels_shown for r in reps) // len(reps)
        rows.append(
            SweepRow(
                fraction=f,
                scheme=s.value,
                mean_dice=float(np.mean(dice)) if dice else float("nan"),
                voxels=voxels,
                voxel_fraction=voxels / full_voxels,
                runtime_seconds=float(np.mean([r.wallclock_seconds for r in reps])),
                n_seeds=len(reps),
            )
        )
    rows.sort(key=lambda r: (r.scheme, r.fraction))
    return rows, reports


def sweep_csv(rows: Sequence[SweepRow], mask_wallclock: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "fraction", "mean_dice", "voxels", "voxel_fraction", "runtime_seconds", "n_seeds"])
    for r in rows:
        w.writerow([
            r.scheme,
            f"{r.fraction:g}",
            f"{r.mean_dice:.6f}",
            r.voxels,
            f"{r.voxel_fraction:.6f}",
            "" if mask_wallclock else f"{r.runtime_seconds:.3f}",
            r.n_seeds,
        ])
    return buf.getvalue()
