"""
Block-by-Block mission loop.

Each Block runs four phases: fly the planned schedule while taking a passive
nadir image every step, detect and geolocate fires, fold the detections into
the target registry (re-planning the rest of the Block when a target is
promoted), and plan the next Block from the end-of-Block state.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from .confidence import TargetRegistry, TrackedTarget, register_detection, register_miss, select_auxiliary
from .detect import (DETECTION_MODES, BoundingBox, Detection, DetectionMetrics, DetectorProfile, chebyshev, run_detector,
                     score_detections, to_detections)
from .horizon import ScheduleHorizon
from .orbit import OrbitalElements, SlotGrid, build_slot_grid, elements_at, passive_cadence, propagate
from .scene import ClutterSource, FireTruth, Raster, SceneConfig, make_meta, project_to_pixel, render
from .scheduler import (ResourceParams, Schedule, ScheduleInstance, SolverStatus, build_instance, grid_costs,
                        reschedule_remainder, satellite_summary, solve_exact)
from .visibility import GroundPoint, PointKind, VisibilityTensors, compute_tensors

logger = logging.getLogger(__name__)

MISS_MARGIN_PX = 4.0


@dataclass
class SatelliteSpec:
    name: str
    elements: OrbitalElements
    budget: float = 1.0  # km/s
    d0: float | None = None
    b0: float | None = None


@dataclass
class MissionConfig:
    start: datetime
    satellites: list[SatelliteSpec]
    stations: list[GroundPoint] = field(default_factory=list)
    fires: list[FireTruth] = field(default_factory=list)
    seed: int = 0
    n_blocks: int = 4
    block_duration: float = 302400.0
    dt: float = 100.0
    stages: int = 4
    mode: str = "reossp"
    fusion: str = "late"
    profile: DetectorProfile = field(default_factory=DetectorProfile)
    resources: ResourceParams = field(default_factory=ResourceParams)
    C: float = 5.0
    n_planes: int = 5
    n_anomaly: int = 15
    reschedule: bool = True
    timeout: float | None = None
    match_radius: float = 0.5
    iou_threshold: float = 0.5
    promotion_threshold: float = 0.95
    cluster_radius: float = 0.5
    top_k: int = 50
    scene: SceneConfig = field(default_factory=SceneConfig)
    clutter: list[ClutterSource] = field(default_factory=list)
    pgm_samples: int = 4
    battery_reserve: float | None = None  # kJ each Block must leave for the next; None plans each Block alone

    def __post_init__(self) -> None:
        if self.mode not in ("reossp", "eossp"):
            raise ValueError(f"mode must be 'reossp' or 'eossp', not {self.mode!r}")
        if self.fusion not in DETECTION_MODES:
            raise ValueError(f"fusion must be one of {DETECTION_MODES}, not {self.fusion!r}")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        self.horizon  # validates the step/stage arithmetic

    @property
    def horizon(self) -> ScheduleHorizon:
        return ScheduleHorizon.from_duration(self.block_duration, self.dt, self.stages)

    def block_start(self, n: int) -> datetime:
        return self.start + timedelta(seconds=n * self.block_duration)


@dataclass
class Plan:
    instance: ScheduleInstance
    schedule: Schedule
    grids: list[SlotGrid]
    priority: list[TrackedTarget]


@dataclass
class MissionState:
    elements: list[OrbitalElements]
    d: np.ndarray
    b: np.ndarray
    spent: np.ndarray
    registry: TargetRegistry
    plan: Plan | None = None
    queues: list[deque] = field(default_factory=list)  # FIFO of [target_id, MB] per satellite


@dataclass
class BlockResult:
    index: int
    start: datetime
    schedule: Schedule
    instance: ScheduleInstance
    planned_z: float
    status: SolverStatus
    detections: list[Detection]
    true_detections: int
    registry: dict
    data_gathered: float
    useful_data: float
    data_downlinked: float
    useful_downlinked: float
    battery_used: float
    maneuver_cost: float
    provided_budget: float
    priority_count: int
    auxiliary_count: int
    reschedules: int
    satellites: list[dict]
    ground_track: list[tuple]
    samples: list[Raster] = field(default_factory=list)

    @property
    def z(self) -> float:
        return self.schedule.z

    @property
    def n_detections(self) -> int:
        return len(self.detections)


@dataclass
class MissionReport:
    config: MissionConfig
    blocks: list[BlockResult]
    registry: TargetRegistry
    metrics: DetectionMetrics

    def totals(self) -> dict:
        keys = ("z", "planned_z", "data_gathered", "useful_data", "data_downlinked", "useful_downlinked",
                "battery_used", "maneuver_cost", "provided_budget", "n_detections", "true_detections")
        return {k: sum(getattr(b, k) for b in self.blocks) for k in keys}


def passive_cadence_check(elements: OrbitalElements, dt: float) -> int:
    """Passive observations per orbital period."""
    return passive_cadence(elements, dt)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def offered_budget(initial: float, spent: float, block: int, n_blocks: int) -> float:
    """Budget offered to 0-based ``block``: none in the first, half the rest in middle Blocks, all in the last."""
    if block == 0:
        return 0.0
    remaining = max(initial - spent, 0.0)
    return remaining if block == n_blocks - 1 else remaining / 2.0


def _pad_grid(grid: SlotGrid, J: int) -> SlotGrid:
    if len(grid) >= J:
        return grid
    extra = [grid.slots[grid.current_index]] * (J - len(grid))
    return replace(grid, slots=list(grid.slots) + extra)


def _target_points(targets: Sequence[TrackedTarget], kind: PointKind) -> list[GroundPoint]:
    return [GroundPoint(t.id, t.lat, t.lon, kind) for t in targets]


def make_grids(config: MissionConfig, elements: Sequence[OrbitalElements], budgets: Sequence[float]) -> list[SlotGrid]:
    if config.mode == "eossp":
        return [SlotGrid([el], (1, 1), 1, [(0.0, 0.0)]) for el in elements]
    grids = [build_slot_grid(el, bud, config.n_planes, config.n_anomaly) for el, bud in zip(elements, budgets)]
    J = max(len(g) for g in grids)
    return [_pad_grid(g, J) for g in grids]


def plan_block(config: MissionConfig, grids: list[SlotGrid], start: datetime, priority: Sequence[TrackedTarget],
               auxiliary: Sequence[tuple[TrackedTarget, float]], c_max: Sequence[float], d0: Sequence[float],
               b0: Sequence[float], eossp: bool) -> Plan:
    hz = config.horizon
    aux_targets = [] if eossp else [t for t, _ in auxiliary]
    tensors = compute_tensors(grids, hz, start, _target_points(priority, PointKind.PRIORITY),
                              _target_points(aux_targets, PointKind.AUXILIARY), config.stations,
                              config.scene.half_angle)
    initial, cost = grid_costs(grids, hz.stages)
    inst = build_instance(
        hz, tensors, initial, cost, config.resources, config.C,
        O=[w for _, w in auxiliary] if not eossp else [], d0=d0, b0=b0, c_max=c_max, eossp=eossp,
        b_end_min=config.battery_reserve,
        satellites=[s.name for s in config.satellites], priority_ids=[t.id for t in priority],
        auxiliary_ids=[t.id for t in aux_targets], station_ids=[g.id for g in config.stations], grids=grids,
    )
    sched = solve_exact(inst, timeout=config.timeout)
    if sched.status is SolverStatus.INFEASIBLE:
        raise RuntimeError(f"Block starting {start.isoformat()}: no feasible schedule")
    return Plan(inst, sched, grids, list(priority))


def _extend_priority(plan: Plan, config: MissionConfig, start: datetime, new: Sequence[TrackedTarget]) -> ScheduleInstance:
    inst = plan.instance
    extra = compute_tensors(plan.grids, config.horizon, start, _target_points(new, PointKind.PRIORITY), (), (),
                            config.scene.half_angle)
    tv = inst.tensors
    tensors = VisibilityTensors(np.concatenate([tv.V, extra.V], axis=4), tv.U, tv.W, tv.H)
    return replace(inst, tensors=tensors, priority_ids=list(inst.priority_ids) + [t.id for t in new])


# ---------------------------------------------------------------------------
# Block execution
# ---------------------------------------------------------------------------

def initial_state(config: MissionConfig) -> MissionState:
    r = config.resources
    return MissionState(
        elements=[s.elements for s in config.satellites],
        d=np.array([r.D_min if s.d0 is None else s.d0 for s in config.satellites], float),
        b=np.array([r.B_max if s.b0 is None else s.b0 for s in config.satellites], float),
        spent=np.zeros(len(config.satellites)),
        registry=TargetRegistry(promotion_threshold=config.promotion_threshold,
                                cluster_radius=config.cluster_radius, top_k=config.top_k),
        queues=[deque() for _ in config.satellites],
    )


def _is_true(lat: float, lon: float, fires: Sequence[FireTruth], t: datetime, radius: float) -> bool:
    return any(f.start_time <= t and chebyshev(lat, lon, f.lat, f.lon) <= radius for f in fires)


def _in_view(meta, lat: float, lon: float, margin: float = 0.0) -> bool:
    c, r = project_to_pixel(lat, lon, meta)
    n = meta.n_pixels
    return margin - 0.5 <= c < n - 0.5 - margin and margin - 0.5 <= r < n - 0.5 - margin


def ingest_observation(registry: TargetRegistry, meta, dets: Sequence[Detection],
                       profile: DetectorProfile) -> set[str]:
    """Fold one image's detections into the registry.

    Tracked targets well inside the footprint that no detection matched
    get a miss update.  Returns the ids of targets that were re-detected.
    """
    hit: set[str] = set()
    for det in sorted(dets, key=lambda d: (-d.confidence, d.lat, d.lon)):
        hit.add(register_detection(registry, det, profile).id)
    for tgt in registry.auxiliary:
        if tgt.id not in hit and _in_view(meta, tgt.lat, tgt.lon, MISS_MARGIN_PX):
            register_miss(registry, tgt, profile, meta.time)
    return hit


def _observe(config: MissionConfig, el: OrbitalElements, t: datetime, name: str):
    """Passive image pair at ``t``; None when nothing bright can be in the footprint."""
    state = propagate(el, t)
    meta = make_meta(state, config.scene, name)
    active = [f for f in config.fires if f.start_time <= t and _in_view(meta, f.lat, f.lon)]
    clutter = [c for c in config.clutter if _in_view(meta, c.lat, c.lon)]
    # pure background plus noise never clears the detector threshold, so skip rendering it
    if not active and not clutter and config.profile.threshold >= config.scene.noise:
        return meta, None
    rasters = [render(state, active, band, seed=config.seed, config=config.scene, clutter=clutter, satellite=name)
               for band in ("band6", "band7")]
    return meta, rasters


def run_block(state: MissionState, config: MissionConfig, index: int) -> BlockResult:
    hz = config.horizon
    start = config.block_start(index)
    K = len(config.satellites)
    names = [s.name for s in config.satellites]
    if state.plan is None:
        # first Block: fixed orbits, nothing to observe yet, charge when sunlit
        grids = make_grids(replace(config, mode="eossp"), state.elements, [0.0] * K)
        state.plan = plan_block(config, grids, start, [], [], [0.0] * K, state.d, state.b, eossp=True)
    plan = state.plan
    schedule = plan.schedule
    instance = plan.instance
    planned_z = schedule.z
    status = schedule.status
    can_replan = config.reschedule and index > 0

    detections: list[Detection] = []
    samples: list[Raster] = []
    track: list[tuple] = []
    reschedules = 0
    profile = config.profile
    for tau in range(hz.steps):
        t = start + timedelta(seconds=tau * hz.dt)
        s = hz.stage_of(tau)
        promoted_before = len(state.registry.priority)
        for k in range(K):
            el = plan.grids[k][int(schedule.path[k, s])]
            meta, rasters = _observe(config, el, t, names[k])
            track.append((index, names[k], tau, t, meta.lat0, meta.lon0))
            dets: list[Detection] = []
            if rasters is not None:
                boxes = run_detector(rasters[0], rasters[1], profile, config.fusion, config.iou_threshold)
                dets = to_detections(boxes, meta)
                if dets and len(samples) < config.pgm_samples:
                    samples.append(rasters[0])
                detections.extend(dets)
            ingest_observation(state.registry, meta, dets, profile)
        new = state.registry.priority[promoted_before:]
        if new and can_replan and tau + 1 < hz.steps:
            instance = _extend_priority(replace(plan, instance=instance), config, start, new)
            schedule = reschedule_remainder(schedule, instance, tau + 1)
            reschedules += 1

    # accounting
    r = config.resources
    T = hz.steps
    end = start + timedelta(seconds=config.block_duration)
    pri_true = [_is_true(*_target_pos(state.registry, pid), config.fires, end, config.match_radius)
                for pid in instance.priority_ids]
    sats = [satellite_summary(schedule, instance, k) for k in range(K)]
    useful = 0.0
    downlinked_useful = 0.0
    for k in range(K):
        q = state.queues[k]
        for tau in range(T):
            for p in np.flatnonzero(schedule.y[k, tau]):
                useful += r.D_obs if pri_true[p] else 0.0
                q.append([instance.priority_ids[p], r.D_obs, pri_true[p]])
            for _ in np.flatnonzero(schedule.q[k, tau]):
                need = r.D_comm
                while need > 0 and q:
                    take = min(need, q[0][1])
                    downlinked_useful += take if q[0][2] else 0.0
                    q[0][1] -= take
                    need -= take
                    if q[0][1] <= 0:
                        q.popleft()
    true_dets = sum(_is_true(d.lat, d.lon, config.fires, d.time, config.match_radius) for d in detections)
    cost = np.array([instance.path_cost(k, schedule.path[k]) for k in range(K)])
    result = BlockResult(
        index=index, start=start, schedule=schedule, instance=instance, planned_z=planned_z, status=status,
        detections=detections, true_detections=int(true_dets), registry=state.registry.to_dict(),
        data_gathered=sum(x["data_gathered"] for x in sats), useful_data=useful,
        data_downlinked=sum(x["data_downlinked"] for x in sats), useful_downlinked=downlinked_useful,
        battery_used=sum(x["battery_used"] for x in sats), maneuver_cost=float(cost.sum()),
        provided_budget=float(instance.c_max.sum()), priority_count=len(state.registry.priority),
        auxiliary_count=len(state.registry.auxiliary), reschedules=reschedules, satellites=sats,
        ground_track=track, samples=samples,
    )

    # carry over to the next Block
    state.spent += cost
    state.d = schedule.d[:, T].copy()
    state.b = schedule.b[:, T].copy()
    state.elements = [elements_at(plan.grids[k][int(schedule.path[k, -1])], end) for k in range(K)]
    state.plan = None
    if index + 1 < config.n_blocks:
        eossp = config.mode == "eossp"
        offered = [0.0 if eossp else offered_budget(s.budget, state.spent[k], index + 1, config.n_blocks)
                   for k, s in enumerate(config.satellites)]
        grids = make_grids(config, state.elements, offered)
        aux = [] if eossp else select_auxiliary(state.registry)
        state.plan = plan_block(config, grids, end, list(state.registry.priority), aux, offered, state.d, state.b,
                                eossp)
    return result


def _target_pos(registry: TargetRegistry, target_id: str) -> tuple[float, float]:
    tgt = registry.get(target_id)
    return tgt.lat, tgt.lon


def run_mission(config: MissionConfig) -> MissionReport:
    state = initial_state(config)
    blocks = []
    for n in range(config.n_blocks):
        logger.info("Block %d/%d", n + 1, config.n_blocks)
        blocks.append(run_block(state, config, n))
    end = config.block_start(config.n_blocks)
    truth = [f for f in config.fires if f.start_time <= end]
    found = [Detection(_point_box(t.confidence), t.lat, t.lon, end) for t in state.registry.priority]
    metrics = score_detections(found, truth, config.match_radius)
    return MissionReport(config, blocks, state.registry, metrics)


def _point_box(conf: float) -> BoundingBox:
    return BoundingBox(0.0, 0.0, 0.0, 0.0, min(max(conf, 0.0), 1.0), 0)
