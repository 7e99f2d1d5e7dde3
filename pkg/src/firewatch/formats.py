"""
Scenario bundles, element files and mission report emission.

A bundle is a JSON document tagged ``"format": "firewatch-bundle/1"``.
Loading is strict: unknown keys and missing required keys raise
``BundleError`` naming the key path.  Relative paths resolve against the
bundle's directory.

Report output is byte-deterministic for a fixed seed: CSVs use ``,`` and
LF with a header row, floats are written with ``repr`` (shortest string
that round-trips), and JSON keys are sorted.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .confidence import save_registry
from .detect import DetectorProfile, write_detections
from .mission import MissionConfig, MissionReport, SatelliteSpec
from .orbit import OrbitalElements, parse_tle
from .scene import ClutterSource, FireTruth, SceneConfig, generate_fires, ingest_fires, write_pgm
from .scheduler import ResourceParams, schedule_to_dict
from .visibility import GroundPoint, PointKind

BUNDLE_FORMAT = "firewatch-bundle/1"


class BundleError(ValueError):
    pass


# section -> {key: default}; a default of REQUIRED marks a mandatory key
REQUIRED = object()

MISSION_KEYS: dict[str, Any] = {
    "start": REQUIRED,
    "seed": REQUIRED,
    "n_blocks": 4,
    "block_duration": 302400.0,
    "dt": 100.0,
    "stages": 4,
    "mode": "reossp",
    "fusion": "late",
    "C": 5.0,
    "n_planes": 5,
    "n_anomaly": 15,
    "reschedule": True,
    "timeout": None,
    "match_radius": 0.5,
    "iou_threshold": 0.5,
    "pgm_samples": 4,
    "battery_reserve": None,
}
SATELLITE_KEYS: dict[str, Any] = {
    "name": REQUIRED, "elements": None, "tle": None, "elements_file": None, "budget": 1.0,
    "d0": None, "b0": None, "circularize": True,
}
STATION_KEYS: dict[str, Any] = {"id": REQUIRED, "lat": REQUIRED, "lon": REQUIRED}
FIRE_KEYS: dict[str, Any] = {"csv": None, "window": None, "seed": 0, "area_range": [1000.0, 5000.0],
                             "generate": None}
GENERATE_KEYS: dict[str, Any] = {"n": REQUIRED, "lat_range": REQUIRED, "lon_range": REQUIRED, "start": None,
                                 "end": None, "seed": 0}
REGISTRY_KEYS: dict[str, Any] = {"promotion_threshold": 0.95, "cluster_radius": 0.5, "top_k": 50}
CLUTTER_KEYS: dict[str, Any] = {f.name: REQUIRED if f.name in ("lat", "lon", "intensity") else f.default
                                for f in fields(ClutterSource)}
TOP_KEYS = {"format", "mission", "satellites", "stations", "fires", "detector", "resources", "registry", "scene",
            "clutter", "output"}


@dataclass
class ScenarioBundle:
    config: MissionConfig
    source: Path
    output_dir: Path | None
    fires_path: Path | None
    raw: dict


def _section(data: Any, spec: dict[str, Any], where: str, strict: bool = True) -> dict:
    if not isinstance(data, dict):
        raise BundleError(f"{where}: expected an object")
    if strict:
        unknown = sorted(set(data) - set(spec))
        if unknown:
            raise BundleError(f"{where}: unknown key '{unknown[0]}'")
    out = {}
    for key, default in spec.items():
        if key in data:
            out[key] = data[key]
        elif default is REQUIRED:
            raise BundleError(f"{where}: missing required key '{key}'")
        else:
            out[key] = default
    return out


def _dataclass_section(data: Any, cls: type, where: str, strict: bool) -> dict:
    spec = {f.name: f.default for f in fields(cls)}
    return {k: v for k, v in _section(data or {}, spec, where, strict).items()}


def _time(value: str, where: str) -> datetime:
    try:
        # 3.10's fromisoformat does not take a trailing Z
        t = datetime.fromisoformat(value[:-1] + "+00:00" if value.endswith("Z") else value)
    except (TypeError, ValueError, AttributeError) as exc:
        raise BundleError(f"{where}: bad timestamp {value!r}") from exc
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


def _resolve(base: Path, value: str, where: str) -> Path:
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise BundleError(f"{where}: file not found: {value}")
    return p


def load_elements(path: str | Path) -> list[OrbitalElements]:
    """Elements from a JSON file (object or list) or a TLE text file (2 or 3 lines per set)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
        items = data if isinstance(data, list) else [data]
        return [OrbitalElements.from_dict(d) for d in items]
    lines = [ln.rstrip() for ln in text.splitlines() if ln.strip()]
    out = []
    i = 0
    while i < len(lines):
        if lines[i].startswith("1 ") and i + 1 < len(lines) and lines[i + 1].startswith("2 "):
            out.append(parse_tle(lines[i], lines[i + 1]))
            i += 2
        else:
            i += 1  # name line
    if not out:
        raise BundleError(f"{path}: no element sets found")
    return out


def _satellite(data: Any, base: Path, where: str, strict: bool) -> SatelliteSpec:
    s = _section(data, SATELLITE_KEYS, where, strict)
    given = [k for k in ("elements", "tle", "elements_file") if s[k] is not None]
    if len(given) != 1:
        raise BundleError(f"{where}: exactly one of 'elements', 'tle', 'elements_file' is required")
    try:
        if s["elements"] is not None:
            el = OrbitalElements.from_dict(s["elements"])
        elif s["tle"] is not None:
            el = parse_tle(*s["tle"])
        else:
            el = load_elements(_resolve(base, s["elements_file"], f"{where}.elements_file"))[0]
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"{where}: bad elements ({exc})") from exc
    if s["circularize"] and el.eccentricity != 0.0:
        el = replace(el, eccentricity=0.0)
    return SatelliteSpec(str(s["name"]), el, float(s["budget"]), s["d0"], s["b0"])


def _fires(data: Any, base: Path, start: datetime, strict: bool) -> tuple[list[FireTruth], Path | None]:
    f = _section(data, FIRE_KEYS, "fires", strict)
    if (f["csv"] is None) == (f["generate"] is None):
        raise BundleError("fires: exactly one of 'csv' or 'generate' is required")
    if f["csv"] is not None:
        path = _resolve(base, f["csv"], "fires.csv")
        window = None
        if f["window"] is not None:
            window = (_time(f["window"][0], "fires.window"), _time(f["window"][1], "fires.window"))
        return ingest_fires(path, window, int(f["seed"]), area_range=tuple(f["area_range"])), path
    g = _section(f["generate"], GENERATE_KEYS, "fires.generate", strict)
    t0 = _time(g["start"], "fires.generate.start") if g["start"] else start
    t1 = _time(g["end"], "fires.generate.end") if g["end"] else None
    return generate_fires(int(g["n"]), tuple(g["lat_range"]), tuple(g["lon_range"]), t0, t1, int(g["seed"])), None


def load_bundle(path: str | Path, strict: bool = True) -> ScenarioBundle:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise BundleError(f"{path}: top level must be an object")
    if strict:
        unknown = sorted(set(raw) - TOP_KEYS)
        if unknown:
            raise BundleError(f"unknown key '{unknown[0]}'")
    for key in ("format", "mission", "satellites", "fires"):
        if key not in raw:
            raise BundleError(f"missing required key '{key}'")
    if raw["format"] != BUNDLE_FORMAT:
        raise BundleError(f"format: expected {BUNDLE_FORMAT!r}, got {raw['format']!r}")
    base = path.parent
    m = _section(raw["mission"], MISSION_KEYS, "mission", strict)
    start = _time(m["start"], "mission.start")
    if not isinstance(raw["satellites"], list) or not raw["satellites"]:
        raise BundleError("satellites: expected a non-empty list")
    sats = [_satellite(s, base, f"satellites[{i}]", strict) for i, s in enumerate(raw["satellites"])]
    stations = []
    for i, st in enumerate(raw.get("stations", [])):
        s = _section(st, STATION_KEYS, f"stations[{i}]", strict)
        stations.append(GroundPoint(str(s["id"]), float(s["lat"]), float(s["lon"]), PointKind.STATION))
    fires, fires_path = _fires(raw["fires"], base, start, strict)
    try:
        profile = DetectorProfile(**_dataclass_section(raw.get("detector"), DetectorProfile, "detector", strict))
        resources = ResourceParams(**_dataclass_section(raw.get("resources"), ResourceParams, "resources", strict))
        scene = SceneConfig(**_dataclass_section(raw.get("scene"), SceneConfig, "scene", strict))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, BundleError):
            raise
        raise BundleError(str(exc)) from exc
    reg = _section(raw.get("registry", {}), REGISTRY_KEYS, "registry", strict)
    clutter = [ClutterSource(**_section(c, CLUTTER_KEYS, f"clutter[{i}]", strict))
               for i, c in enumerate(raw.get("clutter", []))]
    out = raw.get("output", {})
    if strict and set(out) - {"dir"}:
        raise BundleError(f"output: unknown key '{sorted(set(out) - {'dir'})[0]}'")
    try:
        config = MissionConfig(
            start=start, satellites=sats, stations=stations, fires=fires, seed=int(m["seed"]),
            n_blocks=int(m["n_blocks"]), block_duration=float(m["block_duration"]), dt=float(m["dt"]),
            stages=int(m["stages"]), mode=str(m["mode"]), fusion=str(m["fusion"]), profile=profile,
            resources=resources, C=float(m["C"]), n_planes=int(m["n_planes"]), n_anomaly=int(m["n_anomaly"]),
            reschedule=bool(m["reschedule"]), timeout=m["timeout"], match_radius=float(m["match_radius"]),
            iou_threshold=float(m["iou_threshold"]), promotion_threshold=float(reg["promotion_threshold"]),
            cluster_radius=float(reg["cluster_radius"]), top_k=int(reg["top_k"]), scene=scene, clutter=clutter,
            pgm_samples=int(m["pgm_samples"]),
            battery_reserve=None if m["battery_reserve"] is None else float(m["battery_reserve"]),
        )
    except ValueError as exc:
        raise BundleError(f"mission: {exc}") from exc
    out_dir = Path(out["dir"]) if "dir" in out else None
    if out_dir is not None and not out_dir.is_absolute():
        out_dir = base / out_dir
    return ScenarioBundle(config, path, out_dir, fires_path, raw)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

BLOCK_COLUMNS = ["block", "z", "data_gathered_mb", "battery_used_kj", "provided_budget_kms", "maneuver_cost_kms"]
DETECTION_COLUMNS = ["block", "detections", "true_detections", "false_detections", "priority_targets",
                     "auxiliary_targets", "reschedules", "useful_data_mb", "data_gathered_mb",
                     "useful_downlinked_mb", "data_downlinked_mb"]
SATELLITE_COLUMNS = ["block", "satellite", "observations", "downlinks", "charges", "data_gathered",
                     "data_downlinked", "battery_used", "maneuver_cost", "provided_budget"]
TRACK_COLUMNS = ["block", "satellite", "step", "time", "lat", "lon"]
GANTT_COLUMNS = ["block", "satellite", "step", "stage", "slot", "action", "target"]


def fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if v == 0.0:
            return "0.0"
        return repr(v) if math.isfinite(v) else str(v)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, datetime):
        return value.isoformat()
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list[Any]], sum_row: bool = False) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    if sum_row and rows:
        total = ["Sum"]
        for col in range(1, len(header)):
            vals = [row[col] for row in rows]
            if all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in vals):
                total.append(fmt(sum(int(v) for v in vals)))
            elif all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in vals):
                total.append(fmt(math.fsum(float(v) for v in vals)))
            else:
                total.append("")
        w.writerow(total)
    path.write_text(buf.getvalue())


def block_rows(report: MissionReport) -> list[list[Any]]:
    return [[b.index + 1, b.z, b.data_gathered, b.battery_used, b.provided_budget, b.maneuver_cost]
            for b in report.blocks]


def detection_rows(report: MissionReport) -> list[list[Any]]:
    return [[b.index + 1, b.n_detections, b.true_detections, b.n_detections - b.true_detections, b.priority_count,
             b.auxiliary_count, b.reschedules, b.useful_data, b.data_gathered, b.useful_downlinked,
             b.data_downlinked] for b in report.blocks]


def _gantt(report: MissionReport) -> list[list[Any]]:
    rows = []
    for blk in report.blocks:
        sch, inst = blk.schedule, blk.instance
        hz = inst.horizon
        for k in range(inst.K):
            for tau in range(hz.steps):
                s = hz.stage_of(tau)
                action, target = "idle", ""
                if sch.y[k, tau].any():
                    action, target = "observe", inst.priority_ids[int(np.argmax(sch.y[k, tau]))] if inst.priority_ids else ""
                elif sch.q[k, tau].any():
                    action, target = "downlink", inst.station_ids[int(np.argmax(sch.q[k, tau]))] if inst.station_ids else ""
                elif sch.h[k, tau]:
                    action = "charge"
                rows.append([blk.index + 1, inst.satellites[k], tau, s + 1, int(sch.path[k, s]), action, target])
    return rows


def report_to_dict(report: MissionReport) -> dict:
    return {
        "format": "firewatch-report/1",
        "seed": report.config.seed,
        "mode": report.config.mode,
        "fusion": report.config.fusion,
        "blocks": [
            {
                "block": b.index + 1, "start": b.start.isoformat(), "z": b.z, "planned_z": b.planned_z,
                "status": b.status.value, "detections": b.n_detections, "true_detections": b.true_detections,
                "data_gathered": b.data_gathered, "useful_data": b.useful_data,
                "data_downlinked": b.data_downlinked, "useful_downlinked": b.useful_downlinked,
                "battery_used": b.battery_used, "maneuver_cost": b.maneuver_cost,
                "provided_budget": b.provided_budget, "priority_count": b.priority_count,
                "auxiliary_count": b.auxiliary_count, "reschedules": b.reschedules, "satellites": b.satellites,
            }
            for b in report.blocks
        ],
        "totals": report.totals(),
        "metrics": report.metrics.to_dict(),
    }


def _dump(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def emit_report(report: MissionReport, out_dir: str | Path) -> list[Path]:
    """Write every report artifact into ``out_dir``; returns the files written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BundleError(f"cannot create output directory {out}: {exc}") from exc
    written: list[Path] = []

    def note(p: Path) -> Path:
        written.append(p)
        return p

    write_csv(note(out / "blocks.csv"), BLOCK_COLUMNS, block_rows(report), sum_row=True)
    write_csv(note(out / "detection_status.csv"), DETECTION_COLUMNS, detection_rows(report), sum_row=True)
    sat_rows = [[b.index + 1] + [s[c] for c in SATELLITE_COLUMNS[1:]] for b in report.blocks for s in b.satellites]
    write_csv(note(out / "satellites.csv"), SATELLITE_COLUMNS, sat_rows, sum_row=True)
    m = report.metrics
    summary = [["precision", m.precision], ["recall", m.recall], ["f_score", m.f_score], ["tp", m.tp],
               ["fp", m.fp], ["fn", m.fn]] + [[k, v] for k, v in report.totals().items()]
    write_csv(note(out / "summary.csv"), ["metric", "value"], summary)
    track = [[b, s, tau, t, lat, lon] for blk in report.blocks for (b, s, tau, t, lat, lon) in blk.ground_track]
    track = [[r[0] + 1] + r[1:] for r in track]
    write_csv(note(out / "ground_track.csv"), TRACK_COLUMNS, track)
    write_csv(note(out / "gantt.csv"), GANTT_COLUMNS, _gantt(report))
    for blk in report.blocks:
        _dump(note(out / f"registry_block{blk.index + 1}.json"), blk.registry)
        _dump(note(out / f"schedule_block{blk.index + 1}.json"), schedule_to_dict(blk.schedule, blk.instance))
        write_detections(note(out / f"detections_block{blk.index + 1}.jsonl"), blk.detections)
    save_registry(note(out / "registry_final.json"), report.registry)
    _dump(note(out / "metrics.json"), report.metrics.to_dict())
    _dump(note(out / "report.json"), report_to_dict(report))
    samples = [r for blk in report.blocks for r in blk.samples][: report.config.pgm_samples]
    if samples:
        (out / "samples").mkdir(exist_ok=True)
    for i, raster in enumerate(samples):
        p = out / "samples" / f"sample_{i:02d}_{raster.band.value}.pgm"
        write_pgm(note(p), raster)
        written.append(p.with_suffix(p.suffix + ".json"))
    return written


def tables_from_report_json(path: str | Path, out_dir: str | Path) -> list[Path]:
    """Rebuild the CSV tables from a saved ``report.json``."""
    data = json.loads(Path(path).read_text())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blocks = data["blocks"]
    rows = [[b["block"], b["z"], b["data_gathered"], b["battery_used"], b["provided_budget"], b["maneuver_cost"]]
            for b in blocks]
    det = [[b["block"], b["detections"], b["true_detections"], b["detections"] - b["true_detections"],
            b["priority_count"], b["auxiliary_count"], b["reschedules"], b["useful_data"], b["data_gathered"],
            b["useful_downlinked"], b["data_downlinked"]] for b in blocks]
    files = [out / "blocks.csv", out / "detection_status.csv"]
    write_csv(files[0], BLOCK_COLUMNS, rows, sum_row=True)
    write_csv(files[1], DETECTION_COLUMNS, det, sum_row=True)
    return files
