"""Command-line interface: plan, verify-fixtures, sample, train, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .arch import ArchError, ArchitectureSpec, PatchSize3D, as_patch, load_architecture
from .curriculum import CurriculumPlan, Scheme, ScheduleError, build_plan
from .fixtures import TASK_ORDER, get_task, load_fixture_document, parse_presets, verify_fixtures
from .runner import (
    CostModel,
    Dataset,
    NetConfig,
    TrainReport,
    estimate_co2,
    run_experiment,
    run_many,
    sweep_csv,
    sweep_iteration_budgets,
    synthetic_dataset,
    toy_lung_plan,
)
from .sampler import PatchRequest, compose_batch, make_rng, sample_patch
from .stats import paired_one_sided_ttest
from .volume import GenerationError, LabelVolume, Volume, load_labels, load_volume, save_labels, save_volume

log = logging.getLogger("pgps")

SCHEME_CHOICES = ("cps", "pgps", "pgps+", "rpss")


class CliError(Exception):
    """Invalid configuration; reported with exit code 2."""


def _schemes(text: str) -> List[Scheme]:
    try:
        return [Scheme.parse(s) for s in text.split(",") if s.strip()]
    except ScheduleError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _fractions(text: str) -> List[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}")
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError("fractions must lie in (0, 1]")
    return values


def _patch(text: str) -> PatchSize3D:
    try:
        return PatchSize3D.parse(text)
    except ArchError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgps",
        description="Progressive patch-size curricula: plans, fixture checks, sampling and toy training.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("plan", help="generate a patch-size curriculum")
    p.add_argument("--config", help="JSON file with defaults for these flags")
    p.add_argument("--task", choices=TASK_ORDER, help="MSD task preset")
    p.add_argument("--arch", help="architecture JSON (name, poolings_per_axis, min_patch_override)")
    p.add_argument("--max-patch", type=_patch, help="maximal patch WxHxD (required with --arch)")
    p.add_argument("--scheme", choices=SCHEME_CHOICES, default="pgps", help="training scheme")
    p.add_argument("--default-batch", type=_positive, help="batch size at the maximal patch")
    p.add_argument("--epochs", type=_non_negative, default=1000, help="total training epochs")
    p.add_argument("--iterations", type=_positive, default=250, help="iterations per epoch")
    p.add_argument("--emit", choices=("table", "json", "csv"), default="table", help="output format")
    p.add_argument("--out", help="also write the plan JSON to this path")

    p = sub.add_parser("verify-fixtures", help="check generated plans against the published tables")
    p.add_argument("--config", help="JSON file with defaults for these flags")
    p.add_argument("--fixtures", help="alternative fixture JSON (default: embedded tables)")

    p = sub.add_parser("sample", help="extract a batch of patches from a volume")
    p.add_argument("--config", help="JSON file with defaults for these flags")
    p.add_argument("--volume", required=False, help="image volume file (PGPSVOL1)")
    p.add_argument("--labels", required=False, help="label volume file (PGPSLAB1)")
    p.add_argument("--size", type=_patch, help="patch size WxHxD")
    p.add_argument("--batch", type=_positive, default=2, help="number of patches")
    p.add_argument("--force-fg", action="store_true", help="force foreground in ceil(batch/2) patches")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--out-dir", help="directory for patch files")

    p = sub.add_parser("train", help="train the toy network under a curriculum")
    p.add_argument("--config", help="JSON file with defaults for these flags")
    p.add_argument("--synthetic", action="store_true", help="use synthetic blob volumes")
    p.add_argument("--volume-shape", type=_patch, default=PatchSize3D((64, 64, 64)),
                   help="shape of synthetic volumes WxHxD")
    p.add_argument("--data-dir", help="directory of NAME.vol / NAME.lab pairs")
    p.add_argument("--val-cases", type=_positive, default=2, help="cases held out for validation")
    p.add_argument("--plan", help="plan JSON to train (default: toy Lung-shaped schedule)")
    p.add_argument("--scheme", choices=SCHEME_CHOICES, default="pgps", help="training scheme")
    p.add_argument("--epochs", type=_non_negative, default=26, help="total training epochs")
    p.add_argument("--iterations", type=_positive, default=10, help="iterations per epoch")
    p.add_argument("--default-batch", type=_positive, default=2, help="batch size at the maximal patch")
    p.add_argument("--seed", type=int, default=0, help="seed of the first run")
    p.add_argument("--seeds", type=_positive, default=1, help="number of consecutive seeds")
    p.add_argument("--sweep", type=_fractions, help="comma-separated iteration fractions, e.g. 0.1,0.25,0.5,1.0")
    p.add_argument("--schemes", type=_schemes, default=None, help="comma-separated schemes for --sweep")
    p.add_argument("--learning-rate", type=float, default=0.05, help="initial SGD learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--channels", type=_positive, default=8, help="hidden channels of the toy net")
    p.add_argument("--val-every", type=_positive, default=1, help="validate every N epochs")
    p.add_argument("--out-dir", required=False, help="directory for report files")

    p = sub.add_parser("report", help="summarise train reports")
    p.add_argument("--config", help="JSON file with defaults for these flags")
    p.add_argument("reports", nargs="*", help="report JSON files")
    p.add_argument("--baseline", help="report used as the 100%% voxel reference (usually CPS)")
    p.add_argument("--power-watts", type=float, help="device power for CO2 re-estimation")
    p.add_argument("--intensity", type=float, help="grid intensity g/kWh for CO2 re-estimation")
    p.add_argument("--emit", choices=("table", "json"), default="table", help="output format")
    return parser


# --- config merging -------------------------------------------------------------------


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` act as defaults under explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"--config: cannot read {args.config}: {exc}")
        if not isinstance(cfg, dict):
            sub.error("--config: top level must be a JSON object")
        dests = {a.dest: a for a in sub._actions}  # noqa: SLF001
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in dests or dest in ("help", "config"):
                sub.error(f"--config: unknown field {key!r}")
            action = dests[dest]
            if action.type is not None and isinstance(value, (str, int, float)):
                try:
                    value = action.type(str(value))
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    sub.error(f"--config: invalid value for field {key!r}: {exc}")
            if action.choices is not None and value not in action.choices:
                sub.error(f"--config: field {key!r} must be one of {sorted(action.choices)}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# --- commands -------------------------------------------------------------------------


def _resolve_plan_inputs(args):
    if args.task:
        preset = get_task(args.task)
        if args.arch or args.max_patch:
            raise CliError("--task cannot be combined with --arch/--max-patch")
        return preset
    if not args.arch:
        raise CliError("field 'task' or 'arch' is required")
    if args.max_patch is None:
        raise CliError("field 'max_patch' is required with --arch")
    try:
        return load_architecture(args.arch)
    except (OSError, ValueError) as exc:
        raise CliError(f"field 'arch': {exc}")


def plan_table(plan: CurriculumPlan) -> str:
    lines = [f"scheme {plan.scheme.cli_name}  epochs {plan.total_epochs}  iterations/epoch {plan.iterations_per_epoch}"]
    lines.append(f"{'stage':>5}  {'batch*w*h*d':<18} {'epochs':>6} {'tensor voxels':>14}")
    for k, s in enumerate(plan.stages, 1):
        shape = "*".join(str(v) for v in (s.batch,) + s.patch.dims)
        lines.append(f"{k:>5}  {shape:<18} {s.epochs:>6} {s.tensor_voxels:>14}")
    for note in plan.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def plan_csv(plan: CurriculumPlan) -> str:
    rows = ["stage,batch,w,h,d,epochs,tensor_voxels"]
    for k, s in enumerate(plan.stages, 1):
        rows.append(",".join(map(str, (k, s.batch, *s.patch.dims, s.epochs, s.tensor_voxels))))
    return "\n".join(rows) + "\n"


def cmd_plan(args) -> int:
    src = _resolve_plan_inputs(args)
    scheme = Scheme.parse(args.scheme)
    try:
        if isinstance(src, ArchitectureSpec):
            plan = build_plan(
                src, args.max_patch, scheme, args.default_batch or 2, args.epochs, args.iterations
            )
        else:
            plan = src.plan(scheme, args.epochs, args.iterations, args.default_batch)
    except ValueError as exc:
        raise CliError(str(exc))
    text = {"table": plan_table, "csv": plan_csv, "json": lambda p: p.to_json() + "\n"}[args.emit](plan)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(plan.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_verify_fixtures(args) -> int:
    presets = None
    if args.fixtures:
        try:
            presets = parse_presets(load_fixture_document(Path(args.fixtures).read_text("utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"field 'fixtures': {exc}")
    checks = verify_fixtures(presets)
    patch_pass = sum(c.patch_ok for c in checks)
    batch_pass = sum(c.batch_ok for c in checks)
    exceptions = [c for c in checks if c.batch_exception]
    for c in checks:
        if c.patch_ok and c.batch_ok:
            status = "PASS"
        elif c.patch_ok and c.batch_exception:
            status = "EXCEPTION"
        else:
            status = "FAIL"
        line = f"{status:<9} {c.task:<15} stages={c.n_stages:<3} patches={'ok' if c.patch_ok else 'DIVERGE'} batches={'ok' if c.batch_ok else 'DIVERGE'}"
        if c.detail:
            line += f"  [{c.detail}]"
        print(line)
    n = len(checks)
    print(f"patch columns: {patch_pass}/{n} match")
    print(f"batch columns: {batch_pass}/{n} match by rule, {len(exceptions)} documented exception(s)"
          + (f" ({', '.join(c.task for c in exceptions)})" if exceptions else ""))
    unexplained = [c for c in checks if not c.batch_ok and not c.batch_exception]
    ok = patch_pass == n and batch_pass >= n - 1 and not unexplained
    print("verify-fixtures: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_sample(args) -> int:
    for field_name in ("volume", "labels", "size", "out_dir"):
        if getattr(args, field_name) is None:
            raise CliError(f"field '{field_name}' is required")
    try:
        vol, lab = load_volume(args.volume), load_labels(args.labels)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc))
    rng = make_rng(args.seed, 0)
    if args.force_fg:
        patches = compose_batch(vol, lab, args.size, args.batch, rng)
    else:
        patches = [sample_patch(vol, lab, PatchRequest(args.size, False, rng)) for _ in range(args.batch)]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, p in enumerate(patches):
        save_volume(Volume(p.image), out / f"patch_{i:03d}.vol")
        save_labels(LabelVolume(p.labels, lab.n_classes), out / f"patch_{i:03d}.lab")
        index.append({"index": i, "origin": list(p.origin), "forced": p.forced,
                      "foreground_voxels": int((p.labels > 0).sum())})
    (out / "patches.json").write_text(
        json.dumps({"size": list(args.size.dims), "seed": args.seed, "patches": index}, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {len(patches)} patches of {args.size} to {out}")
    return 0


def _load_dataset(args) -> tuple:
    if args.synthetic == bool(args.data_dir):
        raise CliError("exactly one of --synthetic or --data-dir is required")
    if args.synthetic:
        shape = as_patch(args.volume_shape).dims
        m = min(shape)
        # blob radii shrink with small volumes; 64^3 keeps (4, 10)
        kwargs = {"n_val": args.val_cases, "shape": shape, "radius_range": (min(4.0, m / 5), min(10.0, m / 4))}
        try:
            return synthetic_dataset(**kwargs), kwargs
        except GenerationError as exc:
            raise CliError(f"field 'volume_shape': {exc}")
    root = Path(args.data_dir)
    cases = []
    for vol_path in sorted(root.glob("*.vol")):
        lab_path = vol_path.with_suffix(".lab")
        if not lab_path.exists():
            raise CliError(f"field 'data_dir': missing labels for {vol_path.name}")
        cases.append((load_volume(vol_path), load_labels(lab_path)))
    if len(cases) <= args.val_cases:
        raise CliError(f"field 'data_dir': need more than {args.val_cases} cases, found {len(cases)}")
    return Dataset(cases[: -args.val_cases], cases[-args.val_cases :]), None


def _summary(rep: TrainReport, baseline_voxels: Optional[int]) -> str:
    frac = f"{rep.voxels_shown / baseline_voxels:.4f}" if baseline_voxels else "n/a"
    dice = "n/a" if rep.final_val_dice is None else f"{rep.final_val_dice:.4f}"
    return (f"{rep.scheme:<9} seed={rep.seed:<3} epochs={len(rep.records):<4} voxels={rep.voxels_shown} "
            f"voxel_fraction={frac} runtime={rep.wallclock_seconds:.2f}s dice={dice}"
            + ("" if rep.valid else f" INVALID: {rep.error}"))


def cmd_train(args) -> int:
    if not args.out_dir:
        raise CliError("field 'out_dir' is required")
    dataset, synth_kwargs = _load_dataset(args)
    cfg = NetConfig(channels=args.channels, learning_rate=args.learning_rate, momentum=args.momentum)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.seeds))

    if args.sweep:
        if synth_kwargs is None:
            raise CliError("field 'sweep' currently requires --synthetic")
        schemes = args.schemes or [Scheme.CPS, Scheme.RPSS, Scheme.PGPS]
        rows, reports = sweep_iteration_budgets(
            args.sweep, schemes, seeds, args.epochs, args.iterations, synth_kwargs, cfg, args.val_every
        )
        (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
        for rep in reports:
            iters = rep.config["plan"]["iterations_per_epoch"]
            stem = f"{rep.scheme.lower()}_it{iters}_seed{rep.seed}"
            (out / f"{stem}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        print(sweep_csv(rows), end="")
        return 0 if all(r.valid for r in reports) else 1

    if args.plan:
        try:
            plan = CurriculumPlan.from_dict(json.loads(Path(args.plan).read_text("utf-8")))
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"field 'plan': {exc}")
    else:
        plan = toy_lung_plan(args.scheme, args.epochs, args.iterations, args.default_batch)
    cps_voxels = plan.total_iterations * plan.default_batch * plan.max_patch.voxel_count

    if synth_kwargs is not None and len(seeds) > 1:
        reports = run_many([(plan, s) for s in seeds], synth_kwargs, cfg, args.val_every)
    else:
        reports = [run_experiment(plan, dataset, cfg, seed=s, val_every=args.val_every) for s in seeds]
    for rep in reports:
        stem = f"{rep.scheme.lower()}_seed{rep.seed}"
        (out / f"{stem}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        (out / f"{stem}.csv").write_text(rep.epoch_csv(), encoding="utf-8")
        print(_summary(rep, cps_voxels))
    return 0 if all(r.valid for r in reports) else 1


def cmd_report(args) -> int:
    if not args.reports:
        raise CliError("field 'reports' needs at least one report file")
    try:
        reports = [TrainReport.from_dict(json.loads(Path(p).read_text("utf-8"))) for p in args.reports]
        baseline = (TrainReport.from_dict(json.loads(Path(args.baseline).read_text("utf-8")))
                    if args.baseline else None)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"field 'reports': {exc}")
    model = CostModel()
    if args.power_watts or args.intensity:
        model = CostModel(
            device_power_watts=args.power_watts or model.device_power_watts,
            grid_intensity_g_per_kwh=args.intensity or model.grid_intensity_g_per_kwh,
            seconds_per_voxel=model.seconds_per_voxel,
        )
    rows = []
    for path, rep in zip(args.reports, reports):
        row = {
            "report": str(path),
            "scheme": rep.scheme,
            "seed": rep.seed,
            "valid": rep.valid,
            "final_val_dice": rep.final_val_dice,
            "voxels_shown": rep.voxels_shown,
            "wallclock_seconds": rep.wallclock_seconds,
            "estimated_co2_grams": estimate_co2(rep, model),
        }
        if baseline is not None:
            row["voxel_fraction"] = rep.voxels_shown / baseline.voxels_shown if baseline.voxels_shown else None
            if rep.case_dice and len(rep.case_dice) == len(baseline.case_dice) and len(rep.case_dice) >= 2:
                res = paired_one_sided_ttest(rep.case_dice, baseline.case_dice)
                row["ttest_t"], row["ttest_p"], row["ttest_degenerate"] = res.statistic, res.pvalue, res.degenerate
        rows.append(row)
    if args.emit == "json":
        print(json.dumps(rows, indent=2, sort_keys=True))
        return 0
    for r in rows:
        parts = [f"{r['scheme']:<9}", f"seed={r['seed']}", f"dice={_fmt(r['final_val_dice'])}",
                 f"voxels={r['voxels_shown']}", f"runtime={r['wallclock_seconds']:.2f}s",
                 f"co2={r['estimated_co2_grams']:.4f}g"]
        if "voxel_fraction" in r:
            parts.append(f"voxel_fraction={_fmt(r['voxel_fraction'])}")
        if "ttest_p" in r:
            parts.append(f"p={r['ttest_p']:.4g}" + ("*" if r["ttest_p"] < 0.05 else ""))
        if not r["valid"]:
            parts.append("INVALID")
        print("  ".join(parts))
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


COMMANDS = {
    "plan": cmd_plan,
    "verify-fixtures": cmd_verify_fixtures,
    "sample": cmd_sample,
    "train": cmd_train,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"pgps {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
