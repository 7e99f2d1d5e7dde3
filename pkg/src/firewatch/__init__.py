"""Wildfire detection and reconfigurable satellite scheduling simulator."""

from .confidence import TargetRegistry, TrackedTarget, bayes_update, register_detection, register_miss, select_auxiliary
from .detect import (BoundingBox, Detection, DetectionMetrics, DetectorProfile, detect_blobs, early_fuse, geolocate,
                     iou, late_fuse, score_detections)
from .horizon import ScheduleHorizon
from .mission import MissionConfig, MissionReport, SatelliteSpec, passive_cadence_check, run_block, run_mission
from .orbit import OrbitalElements, SlotGrid, StateVector, build_slot_grid, maneuver_cost, propagate, subpoint
from .scene import FireTruth, Raster, gsd, ingest_fires, render
from .scheduler import (ResourceParams, Schedule, ScheduleInstance, build_instance, reschedule_remainder,
                        solve_bruteforce, solve_exact, validate_schedule)
from .visibility import GroundPoint, VisibilityTensors, compute_tensors

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "Detection", "DetectionMetrics", "DetectorProfile", "FireTruth", "GroundPoint", "MissionConfig",
    "MissionReport", "OrbitalElements", "Raster", "ResourceParams", "SatelliteSpec", "Schedule", "ScheduleHorizon",
    "ScheduleInstance", "SlotGrid", "StateVector", "TargetRegistry", "TrackedTarget", "VisibilityTensors",
    "bayes_update", "build_instance", "build_slot_grid", "compute_tensors", "detect_blobs", "early_fuse",
    "geolocate", "gsd", "ingest_fires", "iou", "late_fuse", "maneuver_cost", "passive_cadence_check", "propagate",
    "register_detection", "register_miss", "render", "reschedule_remainder", "run_block", "run_mission",
    "score_detections", "select_auxiliary", "solve_bruteforce", "solve_exact", "subpoint", "validate_schedule",
]
