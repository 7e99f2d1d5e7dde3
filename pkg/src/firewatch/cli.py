"""Command-line entry point (``firewatch``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .detect import BoundingBox, DetectorProfile, early_fuse, late_fuse, run_detector, to_detections, write_detections
from .formats import BundleError, emit_report, load_bundle, tables_from_report_json
from .mission import make_grids, run_mission
from .scene import read_pgm, write_pgm
from .scheduler import (build_instance, grid_costs, load_instance, save_instance, schedule_to_dict, solve_bruteforce,
                        solve_exact)
from .visibility import GroundPoint, PointKind, compute_tensors, save_tensors

log = logging.getLogger("firewatch")


def packaged_scenario(name: str) -> Path:
    return Path(str(resources.files("firewatch") / "scenarios" / f"{name}.json"))


def _bundle_path(value: str) -> Path:
    p = Path(value)
    if not p.exists() and not p.suffix:
        p = packaged_scenario(value)
    return p


def _profile(path: str | None) -> DetectorProfile:
    if path is None:
        return DetectorProfile()
    return DetectorProfile(**json.loads(Path(path).read_text()))


def cmd_mission_run(args: argparse.Namespace) -> int:
    bundle = load_bundle(_bundle_path(args.config))
    config = bundle.config
    if args.mode:
        config.mode = args.mode
    if args.blocks is not None:
        config.n_blocks = args.blocks
    out = Path(args.out) if args.out else bundle.output_dir
    if out is None:
        raise BundleError("no output directory: pass --out or set output.dir in the bundle")
    report = run_mission(config)
    files = emit_report(report, out)
    totals = report.totals()
    print(f"{len(report.blocks)} blocks, z={totals['z']:.4f}, data={totals['data_gathered']:.1f} MB, "
          f"{len(files)} files in {out}")
    return 0


def cmd_schedule_solve(args: argparse.Namespace) -> int:
    inst = load_instance(args.instance)
    sched = solve_bruteforce(inst) if args.bruteforce else solve_exact(inst, timeout=args.timeout)
    doc = schedule_to_dict(sched, inst)
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"status={sched.status.value} z={sched.z:.6f} -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0 if not doc["violations"] else 1


def cmd_detect(args: argparse.Namespace) -> int:
    band6 = read_pgm(args.raster)
    band7 = read_pgm(args.band7) if args.band7 else band6
    mode = args.mode or ("late" if args.band7 else "band6")
    boxes = run_detector(band6, band7, _profile(args.profile), mode)
    dets = to_detections(boxes, band6.meta)
    if args.out:
        write_detections(args.out, dets)
    else:
        for d in dets:
            print(json.dumps(d.to_dict(), sort_keys=True))
    log.info("%d detections", len(dets))
    return 0


def cmd_fuse_early(args: argparse.Namespace) -> int:
    fused = early_fuse([read_pgm(p) for p in args.rasters])
    write_pgm(args.out, fused)
    return 0


def cmd_fuse_late(args: argparse.Namespace) -> int:
    boxes = []
    for line in Path(args.boxes).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            boxes.append(BoundingBox(**(d["box"] if "box" in d else d)))
    fused = late_fuse(boxes, args.models, args.iou)
    lines = [json.dumps(b.__dict__, sort_keys=True) for b in fused]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_visibility_compute(args: argparse.Namespace) -> int:
    """First-Block tensors for a bundle: fires as priority targets, full budget grids."""
    config = load_bundle(_bundle_path(args.config)).config
    hz = config.horizon
    grids = make_grids(config, [s.elements for s in config.satellites], [s.budget for s in config.satellites])
    targets = [GroundPoint(f.id, f.lat, f.lon, PointKind.PRIORITY) for f in config.fires
               if f.start_time <= config.start]
    tensors = compute_tensors(grids, hz, config.start, targets, (), config.stations, config.scene.half_angle)
    if args.instance:
        initial, cost = grid_costs(grids, hz.stages)
        inst = build_instance(hz, tensors, initial, cost, config.resources, config.C,
                              c_max=[s.budget for s in config.satellites],
                              satellites=[s.name for s in config.satellites], priority_ids=[t.id for t in targets],
                              station_ids=[g.id for g in config.stations])
        save_instance(args.instance, inst)
    save_tensors(args.out, tensors)
    print(json.dumps(tensors.shape, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    src = Path(args.mission) / "report.json"
    if not src.exists():
        raise BundleError(f"{src} not found")
    files = tables_from_report_json(src, args.out or args.mission)
    for f in files:
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="firewatch", description="Wildfire detection and satellite scheduling simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    mission = sub.add_parser("mission").add_subparsers(dest="action", required=True)
    run = mission.add_parser("run", help="run a mission from a scenario bundle")
    run.add_argument("--config", required=True, help="bundle JSON, or a packaged name: full, scaled")
    run.add_argument("--out")
    run.add_argument("--mode", choices=["reossp", "eossp"])
    run.add_argument("--blocks", type=int)
    run.set_defaults(func=cmd_mission_run)

    sched = sub.add_parser("schedule").add_subparsers(dest="action", required=True)
    solve = sched.add_parser("solve", help="solve a saved instance")
    solve.add_argument("--instance", required=True)
    solve.add_argument("--out")
    solve.add_argument("--timeout", type=float)
    solve.add_argument("--bruteforce", action="store_true")
    solve.set_defaults(func=cmd_schedule_solve)

    det = sub.add_parser("detect", help="detect fires in a PGM raster")
    det.add_argument("--raster", required=True)
    det.add_argument("--band7")
    det.add_argument("--profile")
    det.add_argument("--mode", choices=["band6", "band7", "early", "late"])
    det.add_argument("--out")
    det.set_defaults(func=cmd_detect)

    fuse = sub.add_parser("fuse").add_subparsers(dest="action", required=True)
    early = fuse.add_parser("early", help="PCA-weighted pixel fusion")
    early.add_argument("--rasters", nargs="+", required=True)
    early.add_argument("--out", required=True)
    early.set_defaults(func=cmd_fuse_early)
    late = fuse.add_parser("late", help="weighted box fusion of JSON-lines boxes")
    late.add_argument("--boxes", required=True)
    late.add_argument("--models", type=int, required=True)
    late.add_argument("--iou", type=float, default=0.5)
    late.add_argument("--out")
    late.set_defaults(func=cmd_fuse_late)

    vis = sub.add_parser("visibility").add_subparsers(dest="action", required=True)
    comp = vis.add_parser("compute", help="first-Block visibility tensors for a bundle")
    comp.add_argument("--config", required=True)
    comp.add_argument("--out", required=True)
    comp.add_argument("--instance", help="also write a schedule instance JSON")
    comp.set_defaults(func=cmd_visibility_compute)

    rep = sub.add_parser("report", help="rebuild CSV tables from a mission output directory")
    rep.add_argument("--mission", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (BundleError, ValueError, OSError) as exc:
        print(f"firewatch: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
