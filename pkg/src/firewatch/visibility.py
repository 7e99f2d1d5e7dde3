"""
Geometric access predicates and the binary visibility tensors used by the
scheduler.

Targets are seen through a nadir sensor cone, ground stations through an
elevation mask, and the Sun through a cylindrical Earth-shadow test.  All
predicates are sampled at the start instant of each time step.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .horizon import ScheduleHorizon
from .orbit import (
    DEFAULT_FRAME,
    J2000,
    R_EARTH,
    EarthFrame,
    OrbitalElements,
    SlotGrid,
    StateVector,
    ecef_to_eci,
    geodetic_to_ecef,
    propagate_offsets,
    seconds_between,
)

DEFAULT_HALF_ANGLE = 22.5  # deg
DEFAULT_MIN_ELEVATION = 10.0  # deg
# inclusive comparisons tolerate round-off of this size (cosines / sines)
_EPS = 1e-12


class PointKind(str, enum.Enum):
    PRIORITY = "priority_target"
    AUXILIARY = "auxiliary_target"
    STATION = "ground_station"


@dataclass(frozen=True)
class GroundPoint:
    id: str
    lat: float
    lon: float
    kind: PointKind = PointKind.PRIORITY

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 < self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range (-180, 180]")

    def to_dict(self) -> dict:
        return {"id": self.id, "lat": self.lat, "lon": self.lon, "kind": PointKind(self.kind).value}

    @classmethod
    def from_dict(cls, data: dict) -> "GroundPoint":
        return cls(str(data["id"]), float(data["lat"]), float(data["lon"]), PointKind(data.get("kind", "priority_target")))


# ---------------------------------------------------------------------------
# Sun
# ---------------------------------------------------------------------------

def sun_directions(t0: datetime, offsets: np.ndarray | Sequence[float]) -> np.ndarray:
    """Unit ECI Sun vectors from the low-precision almanac series, shape (N, 3)."""
    n = (seconds_between(J2000, t0) + np.asarray(offsets, float)) / 86400.0
    L = np.radians(280.460 + 0.9856474 * n)
    g = np.radians(357.528 + 0.9856003 * n)
    lam = L + np.radians(1.915) * np.sin(g) + np.radians(0.020) * np.sin(2 * g)
    eps = np.radians(23.439 - 0.0000004 * n)
    return np.stack([np.cos(lam), np.cos(eps) * np.sin(lam), np.sin(eps) * np.sin(lam)], axis=-1)


def sun_direction(t: datetime) -> np.ndarray:
    return sun_directions(t, [0.0])[0]


def _sunlit(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    along = np.sum(r * s, axis=-1)
    perp = np.linalg.norm(r - along[..., None] * s, axis=-1)
    return ~((along < 0.0) & (perp < R_EARTH))


def sun_visible(state: StateVector, t: datetime | None = None) -> int:
    s = sun_direction(state.time if t is None else t)
    return int(_sunlit(np.asarray(state.position, float), s))


def is_daylight(lat: float, lon: float, t: datetime, frame: EarthFrame = DEFAULT_FRAME) -> bool:
    """True when the Sun is above the local horizon of a ground point."""
    p = ecef_to_eci(geodetic_to_ecef(lat, lon), frame.greenwich_angle(t))
    return float(np.dot(p, sun_direction(t))) > 0.0


# ---------------------------------------------------------------------------
# Targets and stations
# ---------------------------------------------------------------------------

def _cone_mask(r: np.ndarray, p: np.ndarray, half_angle: float) -> np.ndarray:
    """r: (..., 3) satellite, p: (..., 3) ground point (broadcast)."""
    los = p - r
    los_n = np.linalg.norm(los, axis=-1)
    r_n = np.linalg.norm(r, axis=-1)
    cos_off = np.sum(-r * los, axis=-1) / np.where(los_n > 0, los_n * r_n, 1.0)
    cos_off = np.where(los_n > 0, cos_off, 1.0)
    in_cone = cos_off >= math.cos(math.radians(half_angle)) - _EPS
    above = np.sum((r - p) * p, axis=-1) >= 0.0
    return in_cone & above


def _elevation_mask(r: np.ndarray, p: np.ndarray, min_elevation: float) -> np.ndarray:
    rel = r - p
    sin_el = np.sum(rel * p, axis=-1) / (np.linalg.norm(rel, axis=-1) * np.linalg.norm(p, axis=-1))
    return sin_el >= math.sin(math.radians(min_elevation)) - _EPS


def _point_eci(point: GroundPoint, t: datetime, frame: EarthFrame) -> np.ndarray:
    return ecef_to_eci(geodetic_to_ecef(point.lat, point.lon), frame.greenwich_angle(t))


def target_visible(state: StateVector, point: GroundPoint, sensor_half_angle: float = DEFAULT_HALF_ANGLE,
                   frame: EarthFrame = DEFAULT_FRAME) -> int:
    p = _point_eci(point, state.time, frame)
    return int(_cone_mask(np.asarray(state.position, float), p, sensor_half_angle))


def station_visible(state: StateVector, station: GroundPoint, min_elevation: float = DEFAULT_MIN_ELEVATION,
                    frame: EarthFrame = DEFAULT_FRAME) -> int:
    p = _point_eci(station, state.time, frame)
    return int(_elevation_mask(np.asarray(state.position, float), p, min_elevation))


def elevation_angle(state: StateVector, station: GroundPoint, frame: EarthFrame = DEFAULT_FRAME) -> float:
    p = _point_eci(station, state.time, frame)
    rel = state.position - p
    return math.degrees(math.asin(float(np.dot(rel, p) / (np.linalg.norm(rel) * np.linalg.norm(p)))))


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

@dataclass
class VisibilityTensors:
    """Boolean access tensors.

    Shapes: V (S, K, Ts, J, P), U (S, K, Ts, J, P'), W (S, K, Ts, J, G),
    H (S, K, Ts, J).  The slot axis is uniform across stages and satellites.
    """

    V: np.ndarray
    U: np.ndarray
    W: np.ndarray
    H: np.ndarray

    def __post_init__(self) -> None:
        for name in ("V", "U", "W", "H"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        if self.H.ndim != 4:
            raise ValueError("H must be 4-D (S, K, Ts, J)")
        base = self.H.shape
        for name in ("V", "U", "W"):
            arr = getattr(self, name)
            if arr.ndim != 5 or arr.shape[:4] != base:
                raise ValueError(f"{name} shape {arr.shape} inconsistent with H {base}")

    @property
    def shape(self) -> dict:
        S, K, Ts, J = self.H.shape
        return {"S": S, "K": K, "Ts": Ts, "J": J, "P": self.V.shape[4], "P_aux": self.U.shape[4], "G": self.W.shape[4]}

    def copy(self) -> "VisibilityTensors":
        return VisibilityTensors(self.V.copy(), self.U.copy(), self.W.copy(), self.H.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VisibilityTensors):
            return NotImplemented
        return all(
            getattr(self, n).shape == getattr(other, n).shape and np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("V", "U", "W", "H")
        )


def _slot_positions(slot: OrbitalElements, start: datetime, offsets: np.ndarray) -> np.ndarray:
    base = seconds_between(slot.epoch, start)
    r, _ = propagate_offsets(slot, base + offsets)
    return r


def _points_eci(points: Sequence[GroundPoint], thetas: np.ndarray) -> np.ndarray:
    if not points:
        return np.zeros((len(thetas), 0, 3))
    ecef = geodetic_to_ecef(np.array([p.lat for p in points]), np.array([p.lon for p in points]))
    return ecef_to_eci(ecef[None, :, :], thetas[:, None])


def compute_tensors(
    grids: Sequence[SlotGrid | Sequence[OrbitalElements]],
    horizon: ScheduleHorizon,
    start: datetime,
    priority: Sequence[GroundPoint] = (),
    auxiliary: Sequence[GroundPoint] = (),
    stations: Sequence[GroundPoint] = (),
    sensor_half_angle: float = DEFAULT_HALF_ANGLE,
    min_elevation: float = DEFAULT_MIN_ELEVATION,
    frame: EarthFrame = DEFAULT_FRAME,
) -> VisibilityTensors:
    """Evaluate every predicate for each (stage, satellite, step, slot, object).

    ``grids[k]`` lists satellite k's slot options; the same options are
    offered at every stage.  Step ``tau`` is sampled at ``start + tau*dt``.
    """
    K = len(grids)
    slot_lists = [list(g.slots) if isinstance(g, SlotGrid) else list(g) for g in grids]
    J = len(slot_lists[0]) if K else 0
    if any(len(s) != J for s in slot_lists):
        raise ValueError("all satellites must offer the same number of slots")
    S, Ts, T = horizon.stages, horizon.steps_per_stage, horizon.steps
    offsets = np.arange(T, dtype=float) * horizon.dt
    thetas = frame.greenwich_angles(start, offsets)
    sun = sun_directions(start, offsets)
    P_eci = _points_eci(priority, thetas)
    A_eci = _points_eci(auxiliary, thetas)
    G_eci = _points_eci(stations, thetas)

    V = np.zeros((K, J, T, len(priority)), bool)
    U = np.zeros((K, J, T, len(auxiliary)), bool)
    W = np.zeros((K, J, T, len(stations)), bool)
    H = np.zeros((K, J, T), bool)
    for k, slots in enumerate(slot_lists):
        for j, slot in enumerate(slots):
            r = _slot_positions(slot, start, offsets)
            H[k, j] = _sunlit(r, sun)
            if len(priority):
                V[k, j] = _cone_mask(r[:, None, :], P_eci, sensor_half_angle)
            if len(auxiliary):
                U[k, j] = _cone_mask(r[:, None, :], A_eci, sensor_half_angle)
            if len(stations):
                W[k, j] = _elevation_mask(r[:, None, :], G_eci, min_elevation)

    def stage_major(a: np.ndarray) -> np.ndarray:
        # (K, J, T, ...) -> (S, K, Ts, J, ...)
        a = a.reshape((K, J, S, Ts) + a.shape[3:])
        return np.moveaxis(np.moveaxis(a, 2, 0), 2, 3).copy()

    return VisibilityTensors(stage_major(V), stage_major(U), stage_major(W), stage_major(H))


def path_visibility(slots: Sequence[OrbitalElements], horizon: ScheduleHorizon, start: datetime,
                    points: Sequence[GroundPoint], sensor_half_angle: float = DEFAULT_HALF_ANGLE,
                    frame: EarthFrame = DEFAULT_FRAME) -> np.ndarray:
    """Target visibility (T, P) for a satellite that occupies ``slots[s]`` during stage s."""
    T, Ts = horizon.steps, horizon.steps_per_stage
    out = np.zeros((T, len(points)), bool)
    if not len(points):
        return out
    offsets = np.arange(T, dtype=float) * horizon.dt
    pts = _points_eci(points, frame.greenwich_angles(start, offsets))
    for s, slot in enumerate(slots):
        sl = slice(s * Ts, (s + 1) * Ts)
        r = _slot_positions(slot, start, offsets[sl])
        out[sl] = _cone_mask(r[:, None, :], pts[sl], sensor_half_angle)
    return out


# ---------------------------------------------------------------------------
# Cache file
# ---------------------------------------------------------------------------

_MAGIC = b"FWVT"
_VERSION = 1


def save_tensors(path: str | Path, tensors: VisibilityTensors) -> None:
    """Binary cache: magic, version, JSON header with shapes, packed bit payloads."""
    header = json.dumps({"version": _VERSION, **{n: list(getattr(tensors, n).shape) for n in "VUWH"}}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(header)))
        fh.write(header)
        for name in "VUWH":
            payload = np.packbits(getattr(tensors, name).ravel()).tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_tensors(path: str | Path) -> VisibilityTensors:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a visibility cache file")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        header = json.loads(fh.read(hlen))
        arrays = {}
        for name in "VUWH":
            (n,) = struct.unpack("<Q", fh.read(8))
            shape = tuple(header[name])
            bits = np.unpackbits(np.frombuffer(fh.read(n), np.uint8), count=int(np.prod(shape)))
            arrays[name] = bits.astype(bool).reshape(shape)
    return VisibilityTensors(**arrays)
