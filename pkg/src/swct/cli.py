"""swct command line.

Subcommands: phantom gen, seg grow|track|ffd, eval dice|loocv|boxplot|
baseline|copygt, mesh extract, motion trace, serve.

Exit codes are stable: 0 success, 1 usage error, 2 data error, 3 algorithm
error (e.g. a region-growing leak hit the voxel cap). Global options go
before the subcommand: ``swct --jobs 4 --quiet eval loocv ...``. Every
command rerun with identical inputs and seeds writes byte-identical files.
``SWCT_LOG`` (error|warn|info|debug) controls diagnostics on stderr;
machine-readable results only ever go to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AlgorithmError, DataError, SwctError

log = logging.getLogger("swct")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_seed_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise _UsageError(f"seed must be X,Y,Z, got '{text}'")
    return tuple(int(p) for p in parts)


def _parse_range(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise _UsageError(f"range must be LO:HI, got '{text}'")
    return float(parts[0]), float(parts[1])


def _parse_regions(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p != ""]


def _say(args, message: str):
    if not args.quiet:
        print(message)


# ---------------------------------------------------------------------------
# command implementations


def cmd_phantom_gen(args):
    from .phantom import PhantomConfig, write_phantom_case

    cfg = PhantomConfig.from_json(args.config) if args.config else PhantomConfig()
    seed = args.gen_seed if args.gen_seed is not None else args.seed
    out = write_phantom_case(cfg, args.out, seed=seed,
                             encoding=args.encoding)
    _say(args, f"wrote phantom case to {out} "
               f"({cfg.n_frames} frames, dims {cfg.dims})")


def cmd_seg_grow(args):
    from .segkit import GrowParams, region_grow
    from .volcore import load_labels, load_volume, save_labels

    volume = load_volume(args.vol)
    restriction = load_labels(args.restrict) if args.restrict else None
    params = GrowParams(tuple(args.seeds), args.range,
                        restriction=restriction,
                        connectivity=args.connectivity,
                        max_voxels=args.max_voxels)
    mask = region_grow(volume, params)
    save_labels(mask, args.out)
    _say(args, f"grew {int(mask.codes.sum())} voxels -> {args.out}")


def cmd_seg_track(args):
    from .segkit import track_rigid
    from .volcore import load_case, load_labels, save_labels

    seq = load_case(args.case, with_labels=False)
    template = load_labels(args.template)
    steps = track_rigid(seq, template)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = []
    for step in steps:
        save_labels(step.mask, out / f"f{step.pose.frame_index:03d}_mask.nrrd")
        poses.append(step.pose.to_dict())
    (out / "poses.json").write_text(json.dumps(
        {"region": args.region, "poses": poses}, indent=2) + "\n")
    _say(args, f"tracked {len(steps)} frames -> {out}")


def cmd_seg_ffd(args):
    from .segkit import cage_bind, cage_deform, load_obj, voxelize
    from .segkit.ffd import load_cage
    from .volcore import load_volume, save_labels

    mesh = load_obj(args.mesh)
    cage = load_cage(args.cage)
    if args.deform:
        try:
            spec = json.loads(Path(args.deform).read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{args.deform}: invalid JSON: {e}") from e
        if "displaced" in spec:
            cage = cage.with_displaced(np.array(spec["displaced"], dtype=float))
        elif "deltas" in spec:
            displaced = cage.displaced.copy()
            for node, dx, dy, dz in spec["deltas"]:
                displaced[int(node)] += (dx, dy, dz)
            cage = cage.with_displaced(displaced)
        else:
            raise DataError(f"{args.deform}: needs 'displaced' or 'deltas'")
    binding = cage_bind(mesh, cage)
    deformed = cage_deform(binding, cage)
    geom = load_volume(args.geom)
    mask = voxelize(deformed, geom)
    save_labels(mask, args.out)
    _say(args, f"voxelized {int(mask.codes.sum())} voxels -> {args.out}")


def cmd_eval_dice(args):
    from .evalkit import dice_report, format_aggregate_table, save_report
    from .volcore import load_case

    gt = load_case(args.gt)
    pred = load_case(args.pred)
    regions = _parse_regions(args.regions) if args.regions else None
    report = dice_report(gt, pred, regions=regions)
    save_report(report, args.out)
    _say(args, format_aggregate_table(report.aggregates))
    _say(args, f"report -> {args.out}")


def cmd_eval_loocv(args):
    from .evalkit import (PredictorSpec, format_aggregate_table, loocv_plan,
                          run_loocv, save_report)
    from .volcore import load_case

    try:
        listing = json.loads(Path(args.cases).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{args.cases}: invalid JSON: {e}") from e
    dirs = listing["cases"] if isinstance(listing, dict) else listing
    base = Path(args.cases).parent
    cases_by_id = {}
    for d in dirs:
        path = Path(d) if Path(d).is_absolute() else base / d
        seq = load_case(path, with_labels=False)
        cases_by_id[seq.case_id] = path
    plan = loocv_plan(list(cases_by_id))
    if args.predictor.strip() == "builtin":
        predictor = PredictorSpec(kind="builtin", timeout_s=args.timeout)
    else:
        predictor = PredictorSpec(kind="command", command=args.predictor,
                                  timeout_s=args.timeout)
    work = Path(args.work) if args.work else Path(args.out).parent / "loocv_work"
    report = run_loocv(plan, predictor, cases_by_id, work, jobs=args.jobs)
    save_report(report, args.out)
    _say(args, format_aggregate_table(report.aggregates))
    for fold in report.folds:
        _say(args, f"fold {fold['test_case']}: {fold['status']}"
                   + (f" ({fold['error']})" if fold.get("error") else ""))
    failed = [f for f in report.folds if f["status"] != "ok"]
    _say(args, f"report -> {args.out} ({len(failed)} failed fold(s))")


def cmd_eval_boxplot(args):
    from .evalkit import boxplot_export, boxplot_rows, load_report

    report = load_report(args.report)
    rows = boxplot_rows(report)
    boxplot_export(rows, args.out)
    _say(args, f"box-plot data -> {args.out}")
    if args.fig is not None:
        from .figures import render_boxplot
        fig_path = Path(args.fig) if args.fig != "AUTO" \
            else Path(args.out).with_suffix(".png")
        render_boxplot(rows, fig_path)
        _say(args, f"box-plot figure -> {fig_path}")


def cmd_eval_baseline(args):
    from .evalkit import baseline_predict

    out = baseline_predict(args.train, args.test, args.out)
    _say(args, f"baseline predictions -> {out}")


def cmd_eval_copygt(args):
    from .evalkit import copy_gt_predict

    out = copy_gt_predict(args.test, args.out)
    _say(args, f"ground-truth copies -> {out}")


def cmd_mesh_extract(args):
    from .meshviz import build_mesh_sequence, export_mesh_sequence
    from .volcore import load_case

    seq = load_case(args.case)
    regions = _parse_regions(args.regions)
    if not regions:
        raise DataError("no regions given")
    ms = build_mesh_sequence(seq, regions, jobs=args.jobs)
    index = export_mesh_sequence(ms, args.out)
    _say(args, f"mesh sequence -> {index}")


def cmd_motion_trace(args):
    from .meshviz import centroid_trajectory, horn_asymmetry
    from .volcore import RegionCode, load_case

    seq = load_case(args.case)
    if args.region == int(RegionCode.hyoid):
        trace = horn_asymmetry(seq, args.region)
    else:
        trace = centroid_trajectory(seq, args.region)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(trace.to_dict(), indent=2) + "\n")
    _say(args, f"trace -> {args.out}")
    if args.fig is not None:
        from .figures import render_trace
        fig_path = Path(args.fig) if args.fig != "AUTO" \
            else Path(args.out).with_suffix(".png")
        render_trace(trace, fig_path)
        _say(args, f"trace figure -> {fig_path}")


def cmd_serve(args):
    from .annotd import serve

    ui = args.ui
    if ui is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui = str(bundled) if bundled.is_dir() else None
    _say(args, f"serving {args.data} on {args.host}:{args.port}"
               + (f" (ui: {ui})" if ui else ""))
    serve(args.data, port=args.port, host=args.host, ui_dir=ui)


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> _Parser:
    p = _Parser(prog="swct", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"swct {__version__}")
    p.add_argument("--jobs", "-j", type=int, default=os.cpu_count() or 1,
                   help="worker pool bound for parallel axes (frames, folds)")
    p.add_argument("--quiet", action="store_true",
                   help="suppress all non-error human output")
    p.add_argument("--seed", type=int, default=None,
                   help="global RNG seed override for generative commands")
    top = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    phantom = top.add_parser("phantom", help="synthetic 4D-CT generation")
    psub = phantom.add_subparsers(dest="subcommand", required=True)
    gen = psub.add_parser("gen", help="generate a labeled phantom case")
    gen.add_argument("--config", help="PhantomConfig JSON (defaults if omitted)")
    gen.add_argument("--seed", dest="gen_seed", type=int, default=None)
    gen.add_argument("--out", required=True)
    gen.add_argument("--encoding", choices=("raw", "gzip"), default="gzip")
    gen.set_defaults(func=cmd_phantom_gen)

    seg = top.add_parser("seg", help="segmentation operations")
    ssub = seg.add_subparsers(dest="subcommand", required=True)
    grow = ssub.add_parser("grow", help="range-restricted region growing")
    grow.add_argument("--vol", required=True)
    grow.add_argument("--seed", dest="seeds", action="append", required=True,
                      type=_parse_seed_triple, metavar="X,Y,Z")
    grow.add_argument("--range", required=True, type=_parse_range, metavar="LO:HI")
    grow.add_argument("--restrict")
    grow.add_argument("--connectivity", type=int, choices=(6, 26), default=6)
    grow.add_argument("--max-voxels", type=int, default=2_000_000)
    grow.add_argument("--out", required=True)
    grow.set_defaults(func=cmd_seg_grow)

    track = ssub.add_parser("track", help="rigid-body template tracking")
    track.add_argument("--case", required=True)
    track.add_argument("--template", required=True)
    track.add_argument("--region", type=int, default=0)
    track.add_argument("--out", required=True)
    track.set_defaults(func=cmd_seg_track)

    ffd = ssub.add_parser("ffd", help="cage deformation + voxelization")
    ffd.add_argument("--mesh", required=True)
    ffd.add_argument("--cage", required=True)
    ffd.add_argument("--deform", help="JSON with 'displaced' or 'deltas'")
    ffd.add_argument("--geom", required=True)
    ffd.add_argument("--out", required=True)
    ffd.set_defaults(func=cmd_seg_ffd)

    ev = top.add_parser("eval", help="Dice evaluation and LOOCV")
    esub = ev.add_subparsers(dest="subcommand", required=True)
    dice_p = esub.add_parser("dice", help="per-frame per-region Dice report")
    dice_p.add_argument("--gt", required=True)
    dice_p.add_argument("--pred", required=True)
    dice_p.add_argument("--regions", help="comma-separated region codes")
    dice_p.add_argument("--out", required=True)
    dice_p.set_defaults(func=cmd_eval_dice)

    loocv = esub.add_parser("loocv", help="leave-one-out cross-validation")
    loocv.add_argument("--cases", required=True,
                       help="JSON list of case directories")
    loocv.add_argument("--predictor", required=True,
                       help="'builtin' or a command template with "
                            "{train} {test} {out}")
    loocv.add_argument("--timeout", type=float, default=600.0)
    loocv.add_argument("--work", help="fold working directory")
    loocv.add_argument("--out", required=True)
    loocv.set_defaults(func=cmd_eval_loocv)

    box = esub.add_parser("boxplot", help="box-plot CSV (and optional figure)")
    box.add_argument("--report", required=True)
    box.add_argument("--out", required=True)
    box.add_argument("--fig", nargs="?", const="AUTO", default=None,
                     help="also render a PNG (default: next to --out)")
    box.set_defaults(func=cmd_eval_boxplot)

    base = esub.add_parser("baseline", help="builtin classical predictor")
    base.add_argument("--train", required=True)
    base.add_argument("--test", required=True)
    base.add_argument("--out", required=True)
    base.set_defaults(func=cmd_eval_baseline)

    copyg = esub.add_parser("copygt", help="copy-ground-truth oracle predictor")
    copyg.add_argument("--test", required=True)
    copyg.add_argument("--out", required=True)
    copyg.set_defaults(func=cmd_eval_copygt)

    mesh = top.add_parser("mesh", help="surface extraction")
    msub = mesh.add_subparsers(dest="subcommand", required=True)
    ext = msub.add_parser("extract", help="per-frame OBJ meshes")
    ext.add_argument("--case", required=True)
    ext.add_argument("--regions", required=True)
    ext.add_argument("--out", required=True)
    ext.set_defaults(func=cmd_mesh_extract)

    motion = top.add_parser("motion", help="motion metrics")
    osub = motion.add_subparsers(dest="subcommand", required=True)
    trace = osub.add_parser("trace", help="centroid trajectory / horn asymmetry")
    trace.add_argument("--case", required=True)
    trace.add_argument("--region", type=int, required=True)
    trace.add_argument("--out", required=True)
    trace.add_argument("--fig", nargs="?", const="AUTO", default=None)
    trace.set_defaults(func=cmd_motion_trace)

    serve_p = top.add_parser("serve", help="annotation HTTP service")
    serve_p.add_argument("--port", type=int, default=8080)
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--data", required=True)
    serve_p.add_argument("--ui", help="static frontend bundle directory")
    serve_p.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SWCT_LOG", "warn").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level.replace("WARN", "WARNING"),
                                      logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except AlgorithmError as e:
        print(f"swct: algorithm error: {e}", file=sys.stderr)
        return 3
    except SwctError as e:
        print(f"swct: data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"swct: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
