"""
Two-body orbit propagation, Earth-fixed conversions, slot grids and
impulsive maneuver costs.

Spherical Earth, no perturbations.  Every slot in a grid shares the
semi-major axis of the orbit it was built around, so maneuvers reduce to
a plane change plus a coplanar phasing transfer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

MU_EARTH = 398600.4418  # km^3/s^2
R_EARTH = 6378.137  # km
OMEGA_EARTH = 7.2921159e-5  # rad/s
K_REV_MAX = 15
KEPLER_MAX_ITER = 50

J2000 = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)
# GMST at J2000 (deg), IAU 1982 low-order term
GMST_J2000_DEG = 280.46061837


class OrbitError(ValueError):
    """Invalid orbital input or a solver that failed to converge."""


def as_utc(t: datetime) -> datetime:
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def seconds_between(t0: datetime, t1: datetime) -> float:
    return (as_utc(t1) - as_utc(t0)).total_seconds()


def wrap360(angle: float) -> float:
    a = math.fmod(angle, 360.0)
    if a < 0.0:
        a += 360.0
    # fmod can land exactly on 360 after the shift for tiny negatives
    return 0.0 if a >= 360.0 else a


def wrap180(angle: float) -> float:
    """Wrap to (-180, 180]."""
    a = wrap360(angle)
    return a - 360.0 if a > 180.0 else a


@dataclass(frozen=True)
class OrbitalElements:
    semi_major_axis: float  # km
    eccentricity: float
    inclination: float  # deg
    raan: float  # deg
    arg_perigee: float  # deg
    true_anomaly: float  # deg, at epoch
    epoch: datetime

    def __post_init__(self) -> None:
        if not self.semi_major_axis > R_EARTH:
            raise OrbitError(f"semi_major_axis {self.semi_major_axis} km is inside the Earth")
        if not 0.0 <= self.eccentricity < 1.0:
            raise OrbitError(f"eccentricity {self.eccentricity} outside [0, 1)")
        if not 0.0 <= self.inclination <= 180.0:
            raise OrbitError(f"inclination {self.inclination} outside [0, 180]")
        object.__setattr__(self, "raan", wrap360(self.raan))
        object.__setattr__(self, "arg_perigee", wrap360(self.arg_perigee))
        object.__setattr__(self, "true_anomaly", wrap360(self.true_anomaly))
        object.__setattr__(self, "epoch", as_utc(self.epoch))

    @property
    def mean_motion(self) -> float:
        """rad/s"""
        return math.sqrt(MU_EARTH / self.semi_major_axis**3)

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.mean_motion

    @property
    def circular_speed(self) -> float:
        return math.sqrt(MU_EARTH / self.semi_major_axis)

    @property
    def arg_latitude(self) -> float:
        return wrap360(self.arg_perigee + self.true_anomaly)

    def to_dict(self) -> dict:
        return {
            "semi_major_axis": self.semi_major_axis,
            "eccentricity": self.eccentricity,
            "inclination": self.inclination,
            "raan": self.raan,
            "arg_perigee": self.arg_perigee,
            "true_anomaly": self.true_anomaly,
            "epoch": self.epoch.isoformat(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OrbitalElements":
        return cls(
            semi_major_axis=float(data["semi_major_axis"]),
            eccentricity=float(data.get("eccentricity", 0.0)),
            inclination=float(data["inclination"]),
            raan=float(data["raan"]),
            arg_perigee=float(data.get("arg_perigee", 0.0)),
            true_anomaly=float(data["true_anomaly"]),
            epoch=datetime.fromisoformat(data["epoch"]),
        )


@dataclass(frozen=True)
class StateVector:
    position: np.ndarray  # km, ECI
    velocity: np.ndarray  # km/s, ECI
    time: datetime

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.position))


# ---------------------------------------------------------------------------
# Kepler
# ---------------------------------------------------------------------------

def _true_to_mean(nu: np.ndarray, e: float) -> np.ndarray:
    if e == 0.0:
        return nu
    E = 2.0 * np.arctan2(np.sqrt(1.0 - e) * np.sin(nu / 2.0), np.sqrt(1.0 + e) * np.cos(nu / 2.0))
    return E - e * np.sin(E)


def _mean_to_true(M: np.ndarray, e: float) -> np.ndarray:
    if e == 0.0:
        return M
    M = np.mod(M, 2.0 * np.pi)
    E = M + e * np.sin(M) if e < 0.8 else np.full_like(M, np.pi)
    for _ in range(KEPLER_MAX_ITER):
        f = E - e * np.sin(E) - M
        dE = f / (1.0 - e * np.cos(E))
        E = E - dE
        if np.all(np.abs(dE) < 1e-14):
            break
    else:
        raise OrbitError(f"Kepler solver did not converge in {KEPLER_MAX_ITER} iterations (e={e})")
    return 2.0 * np.arctan2(np.sqrt(1.0 + e) * np.sin(E / 2.0), np.sqrt(1.0 - e) * np.cos(E / 2.0))


def _perifocal_to_eci(el: OrbitalElements) -> np.ndarray:
    O, i, w = np.radians([el.raan, el.inclination, el.arg_perigee])
    cO, sO, ci, si, cw, sw = np.cos(O), np.sin(O), np.cos(i), np.sin(i), np.cos(w), np.sin(w)
    return np.array(
        [
            [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
            [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
            [sw * si, cw * si, ci],
        ]
    )


def propagate_offsets(el: OrbitalElements, dt: np.ndarray | Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized propagation to ``epoch + dt`` seconds; returns (N,3) r, v."""
    dt = np.atleast_1d(np.asarray(dt, dtype=float))
    e, a = el.eccentricity, el.semi_major_axis
    M0 = _true_to_mean(np.radians(el.true_anomaly), e)
    nu = _mean_to_true(M0 + el.mean_motion * dt, e)
    p = a * (1.0 - e * e)
    r = p / (1.0 + e * np.cos(nu))
    r_pf = np.stack([r * np.cos(nu), r * np.sin(nu), np.zeros_like(nu)], axis=-1)
    k = math.sqrt(MU_EARTH / p)
    v_pf = np.stack([-k * np.sin(nu), k * (e + np.cos(nu)), np.zeros_like(nu)], axis=-1)
    rot = _perifocal_to_eci(el)
    return r_pf @ rot.T, v_pf @ rot.T


def propagate(el: OrbitalElements, t: datetime) -> StateVector:
    dt = seconds_between(el.epoch, t)
    if dt < 0.0:
        raise OrbitError("propagation time precedes the element epoch")
    r, v = propagate_offsets(el, [dt])
    return StateVector(r[0], v[0], as_utc(t))


def elements_at(el: OrbitalElements, t: datetime) -> OrbitalElements:
    """Same orbit re-anchored at ``t`` (true anomaly advanced)."""
    dt = seconds_between(el.epoch, t)
    M0 = _true_to_mean(np.radians([el.true_anomaly]), el.eccentricity)
    nu = _mean_to_true(M0 + el.mean_motion * dt, el.eccentricity)
    return replace(el, true_anomaly=math.degrees(float(nu[0])), epoch=as_utc(t))


# ---------------------------------------------------------------------------
# Earth-fixed frame
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EarthFrame:
    """Greenwich angle model: ``theta(t) = greenwich_deg + rate * (t - reference)``."""

    reference: datetime = J2000
    greenwich_deg: float = GMST_J2000_DEG
    rotation_rate: float = OMEGA_EARTH  # rad/s

    def greenwich_angle(self, t: datetime) -> float:
        """Radians in [0, 2pi)."""
        dt = seconds_between(self.reference, t)
        return math.fmod(math.radians(self.greenwich_deg) + self.rotation_rate * dt, 2.0 * math.pi) % (2.0 * math.pi)

    def greenwich_angles(self, t0: datetime, offsets: np.ndarray) -> np.ndarray:
        base = seconds_between(self.reference, t0)
        return np.mod(math.radians(self.greenwich_deg) + self.rotation_rate * (base + np.asarray(offsets, float)), 2.0 * math.pi)


DEFAULT_FRAME = EarthFrame()


def subpoint(state: StateVector, frame: EarthFrame = DEFAULT_FRAME) -> tuple[float, float, float]:
    """Spherical-Earth (lat deg, lon deg, altitude km) below the satellite."""
    r = state.position
    rn = float(np.linalg.norm(r))
    if rn <= R_EARTH:
        raise OrbitError("position is inside the Earth")
    lat = math.degrees(math.asin(max(-1.0, min(1.0, r[2] / rn))))
    lon = math.degrees(math.atan2(r[1], r[0]) - frame.greenwich_angle(state.time))
    lon = wrap180(lon)
    if lon == -180.0:
        lon = 180.0
    return lat, lon, rn - R_EARTH


def geodetic_to_ecef(lat: np.ndarray | float, lon: np.ndarray | float, radius: float = R_EARTH) -> np.ndarray:
    la, lo = np.radians(lat), np.radians(lon)
    return np.stack([radius * np.cos(la) * np.cos(lo), radius * np.cos(la) * np.sin(lo), radius * np.sin(la)], axis=-1)


def ecef_to_eci(vec: np.ndarray, theta: np.ndarray | float) -> np.ndarray:
    """Rotate Earth-fixed vectors by Greenwich angle ``theta`` (broadcasts over leading dims)."""
    c, s = np.cos(theta), np.sin(theta)
    x, y, z = vec[..., 0], vec[..., 1], vec[..., 2]
    return np.stack([c * x - s * y, s * x + c * y, np.broadcast_to(z, np.broadcast(x, c).shape)], axis=-1)


# ---------------------------------------------------------------------------
# Maneuvers
# ---------------------------------------------------------------------------

def plane_angle(a: OrbitalElements, b: OrbitalElements) -> float:
    """Angle between orbit normals, radians."""
    i1, i2 = math.radians(a.inclination), math.radians(b.inclination)
    dO = math.radians(b.raan - a.raan)
    c = math.cos(i1) * math.cos(i2) + math.sin(i1) * math.sin(i2) * math.cos(dO)
    return math.acos(max(-1.0, min(1.0, c)))


def plane_change_cost(a: OrbitalElements, b: OrbitalElements) -> float:
    """Single-impulse circular plane change, km/s."""
    return 2.0 * a.circular_speed * math.sin(plane_angle(a, b) / 2.0)


def phasing_cost(semi_major_axis: float, phase_deg: float, k_rev: int) -> float | None:
    """Two-impulse phasing cost for a signed phase shift over ``k_rev`` revolutions.

    Positive ``phase_deg`` means the target slot leads, so the phasing orbit
    is shorter.  Returns None when the phasing ellipse dips below the surface.
    """
    if phase_deg == 0.0:
        return 0.0
    r = semi_major_axis
    period = 2.0 * math.pi * math.sqrt(r**3 / MU_EARTH)
    t_phase = period * (1.0 - phase_deg / (360.0 * k_rev))
    if t_phase <= 0.0:
        return None
    a_ph = (MU_EARTH * (t_phase / (2.0 * math.pi)) ** 2) ** (1.0 / 3.0)
    if 2.0 * a_ph - r <= R_EARTH:
        return None
    v_ph = math.sqrt(MU_EARTH * (2.0 / r - 1.0 / a_ph))
    return 2.0 * abs(v_ph - math.sqrt(MU_EARTH / r))


def best_phasing_cost(semi_major_axis: float, phase_deg: float, k_rev_max: int = K_REV_MAX) -> float:
    """Cheapest phasing over 1..k_rev_max revolutions, catching up or falling back."""
    lead = wrap360(phase_deg)
    if lead == 0.0:
        return 0.0
    best = math.inf
    for k in range(1, k_rev_max + 1):
        for shift in (lead, lead - 360.0):
            c = phasing_cost(semi_major_axis, shift, k)
            if c is not None and c < best:
                best = c
    if not math.isfinite(best):
        raise OrbitError(f"no feasible phasing transfer for {phase_deg} deg")
    return best


def maneuver_cost(a: OrbitalElements, b: OrbitalElements, k_rev_max: int = K_REV_MAX) -> float:
    """Plane change plus phasing, km/s (components applied sequentially)."""
    if a.eccentricity != 0.0 or b.eccentricity != 0.0:
        raise OrbitError("maneuver_cost requires circular orbits")
    if not math.isclose(a.semi_major_axis, b.semi_major_axis, rel_tol=1e-12, abs_tol=1e-9):
        raise OrbitError("maneuver_cost requires equal semi-major axes")
    if a.epoch != b.epoch:
        t = max(a.epoch, b.epoch)
        a, b = elements_at(a, t), elements_at(b, t)
    cost = plane_change_cost(a, b) if plane_angle(a, b) > 0.0 else 0.0
    return cost + best_phasing_cost(a.semi_major_axis, b.arg_latitude - a.arg_latitude, k_rev_max)


# ---------------------------------------------------------------------------
# Slot grid
# ---------------------------------------------------------------------------

def max_plane_offset(budget: float, speed: float) -> float:
    """Largest plane change (deg) that a full-budget single impulse can buy."""
    return math.degrees(2.0 * math.asin(min(1.0, budget / (2.0 * speed))))


@dataclass
class SlotGrid:
    """Candidate slots around one satellite's current orbit.

    ``slots[0]`` is always the current orbit (zero-cost stay-put option).
    Plane order: nominal, inclination offsets, RAAN offsets; within each
    plane, anomaly offsets ascend from 0.
    """

    slots: list[OrbitalElements]
    plane_counts: tuple[int, int]
    anomaly_count: int
    plane_offsets: list[tuple[float, float]] = field(default_factory=list)  # (d_inc, d_raan) per plane

    current_index: int = 0

    def __len__(self) -> int:
        return len(self.slots)

    def __getitem__(self, j: int) -> OrbitalElements:
        return self.slots[j]

    def cost_matrix(self, k_rev_max: int = K_REV_MAX) -> np.ndarray:
        n = len(self.slots)
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    out[i, j] = maneuver_cost(self.slots[i], self.slots[j], k_rev_max)
        return out

    def costs_from(self, origin: OrbitalElements, k_rev_max: int = K_REV_MAX) -> np.ndarray:
        return np.array([maneuver_cost(origin, s, k_rev_max) for s in self.slots])


def _raan_offset_for(angle_deg: float, inclination: float) -> float:
    """RAAN shift whose pure-node plane change equals ``angle_deg``."""
    si2 = math.sin(math.radians(inclination)) ** 2
    if si2 < 1e-12:
        return 0.0
    ci2 = 1.0 - si2
    c = (math.cos(math.radians(angle_deg)) - ci2) / si2
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def build_slot_grid(current: OrbitalElements, budget: float, n_planes: int = 5, n_anomaly: int = 15) -> SlotGrid:
    if budget < 0:
        raise OrbitError("budget must be non-negative")
    if n_planes < 1 or n_planes % 2 == 0:
        raise OrbitError("n_planes must be odd and >= 1")
    if n_anomaly < 1:
        raise OrbitError("n_anomaly must be >= 1")
    if current.eccentricity != 0.0:
        raise OrbitError("slot grids are built around circular orbits")

    di_max = max_plane_offset(budget, current.circular_speed)
    dO_max = _raan_offset_for(di_max, current.inclination)
    half = n_planes // 2
    steps = [k / half for k in range(-half, half + 1) if k != 0] if half else []

    offsets: list[tuple[float, float]] = [(0.0, 0.0)]
    offsets += [(f * di_max, 0.0) for f in steps]
    offsets += [(0.0, f * dO_max) for f in steps]

    planes: list[tuple[float, float]] = []
    for d_inc, d_raan in offsets:
        inc = current.inclination + d_inc
        if inc < 0.0 or inc > 180.0:
            inc = min(180.0, max(0.0, inc))
        key = (round(inc - current.inclination, 12), round(d_raan, 12))
        if key not in [(round(p[0], 12), round(p[1], 12)) for p in planes]:
            planes.append((inc - current.inclination, d_raan))

    slots = []
    for d_inc, d_raan in planes:
        for m in range(n_anomaly):
            slots.append(
                replace(
                    current,
                    inclination=current.inclination + d_inc,
                    raan=current.raan + d_raan,
                    true_anomaly=current.true_anomaly + 360.0 * m / n_anomaly,
                )
            )
    n_inc = 1 + sum(1 for d, _ in planes if d != 0.0)
    n_raan = 1 + sum(1 for _, d in planes if d != 0.0)
    return SlotGrid(slots, (n_inc, n_raan), n_anomaly, planes)


# ---------------------------------------------------------------------------
# TLE
# ---------------------------------------------------------------------------

def _tle_epoch(field_: str) -> datetime:
    yy = int(field_[:2])
    year = 2000 + yy if yy < 57 else 1900 + yy
    day = float(field_[2:])
    return datetime(year, 1, 1, tzinfo=timezone.utc) + timedelta(days=day - 1.0)


def parse_tle(line1: str, line2: str) -> OrbitalElements:
    """Mean TLE elements taken directly as osculating Keplerian elements."""
    if not (line1.startswith("1 ") and line2.startswith("2 ")):
        raise OrbitError("not a two-line element set")
    epoch = _tle_epoch(line1[18:32].strip())
    inc = float(line2[8:16])
    raan = float(line2[17:25])
    ecc = float("0." + line2[26:33].strip())
    argp = float(line2[34:42])
    mean_anom = float(line2[43:51])
    n_rev_day = float(line2[52:63])
    n = n_rev_day * 2.0 * math.pi / 86400.0
    a = (MU_EARTH / n**2) ** (1.0 / 3.0)
    nu = _mean_to_true(np.radians([mean_anom]), ecc)
    return OrbitalElements(a, ecc, inc, raan, argp, math.degrees(float(nu[0])), epoch)


def passive_cadence(el: OrbitalElements, dt: float) -> int:
    """Passive observations per orbital period at one per time step."""
    if dt <= 0:
        raise OrbitError("dt must be positive")
    # guard exact multiples against rounding in the period
    return int(math.floor(el.period / dt + 1e-9))


def elements_over(lat: float, lon: float, altitude: float, t: datetime, inclination: float,
                  ascending: bool = True, frame: EarthFrame = DEFAULT_FRAME) -> OrbitalElements:
    """Circular orbit whose subpoint at ``t`` is (lat, lon)."""
    i = math.radians(inclination)
    si = math.sin(i)
    if si < 1e-12 or abs(math.sin(math.radians(lat))) > si + 1e-12:
        raise OrbitError(f"latitude {lat} unreachable at inclination {inclination}")
    u = math.asin(max(-1.0, min(1.0, math.sin(math.radians(lat)) / si)))
    if not ascending:
        u = math.pi - u
    alpha = math.radians(lon) + frame.greenwich_angle(t)
    raan = alpha - math.atan2(math.cos(i) * math.sin(u), math.cos(u))
    return OrbitalElements(R_EARTH + altitude, 0.0, inclination, math.degrees(raan), 0.0, math.degrees(u), t)


def inclination_of(state: StateVector) -> float:
    h = np.cross(state.position, state.velocity)
    return math.degrees(math.acos(max(-1.0, min(1.0, h[2] / np.linalg.norm(h)))))
