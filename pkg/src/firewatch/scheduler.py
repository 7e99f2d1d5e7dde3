"""
Reconfigurable scheduling: instance assembly, exact solution, validation.

The formulation has no coupling between satellites, so every satellite is
solved on its own.  For one satellite the solver runs a depth-first
branch-and-bound over slot paths (one slot per stage).  Each path prefix
carries a forward dynamic program over the integer (data, battery) lattice:
``R[d, b]`` is the best reward that reaches that resource state.  The
bound on a prefix adds the best-case reward of every remaining stage while
ignoring resources.  For the winning path a backward value-to-go pass
picks the canonical event sequence: at each step the first action in the
order observe, downlink, charge, idle that keeps the optimum.

Conventions: global steps are 0-based (``tau``); ``d[k, tau]`` and
``b[k, tau]`` are levels at the start of step ``tau`` and index ``T`` holds
the level after the last step.  Battery recon energy is drawn before the
first stage and at each stage boundary, because exactly one slot is taken
per stage.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .horizon import ScheduleHorizon
from .orbit import SlotGrid
from .visibility import VisibilityTensors, load_tensors, save_tensors

logger = logging.getLogger(__name__)

TOL = 1e-9
DEFAULT_LATTICE_CAP = 5_000_000
BRUTEFORCE_LIMIT = 2**24
NEG = -np.inf


class SchedulerError(ValueError):
    pass


class LatticeError(SchedulerError):
    pass


class SolverStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    FEASIBLE_TIMEOUT = "feasible_timeout"
    INFEASIBLE = "infeasible"


# ---------------------------------------------------------------------------
# Parameters and instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResourceParams:
    D_obs: float = 100.0  # MB per observation step
    D_comm: float = 50.0  # MB per downlink step
    D_min: float = 0.0
    D_max: float = 1500.0
    B_charge: float = 4.0  # kJ
    B_obs: float = 3.0
    B_comm: float = 3.0
    B_recon: float = 20.0
    B_time: float = 2.0
    B_min: float = 0.0
    B_max: float = 100.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise SchedulerError(f"resource parameter {name}={value} must be finite and >= 0")
        if self.D_min > self.D_max:
            raise SchedulerError("D_min exceeds D_max")
        if self.B_min > self.B_max:
            raise SchedulerError("B_min exceeds B_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchedulerError(f"unknown resource keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class ScheduleInstance:
    """All data of one Block's scheduling problem.

    ``initial_cost[k, j]`` prices the move from the initial slot into stage-1
    slot ``j``; ``cost[s-1, k, i, j]`` prices stage s -> s+1 moves.
    """

    horizon: ScheduleHorizon
    tensors: VisibilityTensors
    initial_cost: np.ndarray
    cost: np.ndarray
    resources: ResourceParams = field(default_factory=ResourceParams)
    C: float = 5.0
    O: np.ndarray = field(default_factory=lambda: np.zeros(0))
    d0: np.ndarray | None = None
    b0: np.ndarray | None = None
    c_max: np.ndarray | None = None
    eossp: bool = False
    satellites: list[str] = field(default_factory=list)
    priority_ids: list[str] = field(default_factory=list)
    auxiliary_ids: list[str] = field(default_factory=list)
    station_ids: list[str] = field(default_factory=list)
    grids: list[SlotGrid] | None = None
    b_end_min: float | None = None  # optional floor on the end-of-horizon battery

    def __post_init__(self) -> None:
        sh = self.tensors.shape
        S, K, Ts, J = sh["S"], sh["K"], sh["Ts"], sh["J"]
        if K == 0:
            raise SchedulerError("instance needs at least one satellite (K = 0)")
        if S != self.horizon.stages or Ts != self.horizon.steps_per_stage:
            raise SchedulerError(
                f"tensor stages/steps ({S}, {Ts}) disagree with horizon ({self.horizon.stages}, "
                f"{self.horizon.steps_per_stage})")
        self.initial_cost = np.asarray(self.initial_cost, float)
        self.cost = np.asarray(self.cost, float)
        if self.initial_cost.shape != (K, J):
            raise SchedulerError(f"initial_cost shape {self.initial_cost.shape} != {(K, J)}")
        if self.cost.shape != (S - 1, K, J, J):
            raise SchedulerError(f"cost shape {self.cost.shape} != {(S - 1, K, J, J)}")
        if (self.initial_cost < 0).any() or (self.cost < 0).any() or not (
                np.isfinite(self.initial_cost).all() and np.isfinite(self.cost).all()):
            raise SchedulerError("maneuver costs must be finite and >= 0")
        self.O = np.asarray(self.O, float).reshape(-1)
        if self.O.shape != (sh["P_aux"],):
            raise SchedulerError(f"O has {self.O.size} weights but U has {sh['P_aux']} auxiliary targets")
        if ((self.O < 0) | (self.O >= 1)).any():
            raise SchedulerError("auxiliary weights must lie in [0, 1)")
        if not self.C > 0:
            raise SchedulerError("C must be positive")
        r = self.resources
        self.d0 = np.full(K, r.D_min) if self.d0 is None else np.asarray(self.d0, float).reshape(K)
        self.b0 = np.full(K, r.B_max) if self.b0 is None else np.asarray(self.b0, float).reshape(K)
        self.c_max = np.zeros(K) if self.c_max is None else np.asarray(self.c_max, float).reshape(K)
        if (self.c_max < 0).any():
            raise SchedulerError("c_max must be >= 0")
        if self.b_end_min is not None and not r.B_min <= self.b_end_min <= r.B_max:
            raise SchedulerError(f"b_end_min={self.b_end_min} outside [{r.B_min}, {r.B_max}]")
        if not self.satellites:
            self.satellites = [f"sat{k + 1}" for k in range(K)]
        if len(self.satellites) != K:
            raise SchedulerError("satellite names disagree with K")
        for ids, n, label in ((self.priority_ids, sh["P"], "priority"), (self.auxiliary_ids, sh["P_aux"], "auxiliary"),
                              (self.station_ids, sh["G"], "station")):
            if ids and len(ids) != n:
                raise SchedulerError(f"{len(ids)} {label} ids for {n} tensor entries")
        if self.grids is not None and (len(self.grids) != K or any(len(g) != J for g in self.grids)):
            raise SchedulerError("slot grids disagree with tensor extents")

    @property
    def K(self) -> int:
        return self.tensors.shape["K"]

    @property
    def J(self) -> int:
        return self.tensors.shape["J"]

    @property
    def P(self) -> int:
        return self.tensors.shape["P"]

    @property
    def P_aux(self) -> int:
        return self.tensors.shape["P_aux"]

    @property
    def G(self) -> int:
        return self.tensors.shape["G"]

    @property
    def terminal_floor(self) -> float:
        r = self.resources
        return r.B_min if self.b_end_min is None else float(self.b_end_min)

    def path_cost(self, k: int, path: Sequence[int]) -> float:
        total = self.initial_cost[k, path[0]]
        for s in range(1, len(path)):
            total += self.cost[s - 1, k, path[s - 1], path[s]]
        return float(total)

    def path_slice(self, name: str, k: int, path: Sequence[int]) -> np.ndarray:
        """(T, ...) view of tensor ``name`` along a slot path."""
        arr = getattr(self.tensors, name)
        return np.concatenate([arr[s, k, :, path[s]] for s in range(len(path))], axis=0)


def build_instance(horizon: ScheduleHorizon, tensors: VisibilityTensors, initial_cost: np.ndarray,
                   cost: np.ndarray, resources: ResourceParams | None = None, C: float = 5.0,
                   O: Sequence[float] | None = None, d0: Sequence[float] | None = None,
                   b0: Sequence[float] | None = None, c_max: Sequence[float] | float | None = None,
                   eossp: bool = False, b_end_min: float | None = None, **names) -> ScheduleInstance:
    """Assemble and cross-check an instance.

    With ``eossp`` the maneuver budget is zeroed and auxiliary targets are
    dropped, which yields the fixed-orbit baseline.  ``b_end_min`` adds a
    floor on the battery level left at the end of the horizon.
    """
    K = tensors.shape["K"] if tensors.H.ndim == 4 else 0
    if K == 0:
        raise SchedulerError("instance needs at least one satellite (K = 0)")
    O = np.zeros(tensors.shape["P_aux"]) if O is None else np.asarray(O, float)
    if c_max is not None and np.ndim(c_max) == 0:
        c_max = np.full(K, float(c_max))
    if eossp:
        tensors = VisibilityTensors(tensors.V, tensors.U[..., :0], tensors.W, tensors.H)
        O = np.zeros(0)
        c_max = np.zeros(K)
        names = dict(names, auxiliary_ids=[])
    return ScheduleInstance(horizon, tensors, initial_cost, cost, resources or ResourceParams(), C, O, d0, b0,
                            c_max, eossp, b_end_min=b_end_min, **names)


def grid_costs(grids: Sequence[SlotGrid], stages: int) -> tuple[np.ndarray, np.ndarray]:
    """(initial_cost, cost) for grids offered unchanged at every stage."""
    K = len(grids)
    J = len(grids[0]) if K else 0
    initial = np.zeros((K, J))
    cost = np.zeros((max(stages - 1, 0), K, J, J))
    for k, g in enumerate(grids):
        m = g.cost_matrix()
        initial[k] = m[g.current_index]
        cost[:, k] = m
    return initial, cost


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    constraint: str
    satellite: int
    step: int | None
    lhs: float
    rhs: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Schedule:
    path: np.ndarray  # (K, S) slot index per stage
    y: np.ndarray  # (K, T, P)
    q: np.ndarray  # (K, T, G)
    h: np.ndarray  # (K, T)
    alpha: np.ndarray  # (K, T, P')
    d: np.ndarray  # (K, T+1)
    b: np.ndarray  # (K, T+1)
    z: float = 0.0
    status: SolverStatus = SolverStatus.OPTIMAL
    nodes: int = 0

    def __post_init__(self) -> None:
        self.path = np.asarray(self.path, dtype=int)
        for name in ("y", "q", "h", "alpha"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        self.d = np.asarray(self.d, float)
        self.b = np.asarray(self.b, float)
        self.status = SolverStatus(self.status)

    def copy(self) -> "Schedule":
        return Schedule(self.path.copy(), self.y.copy(), self.q.copy(), self.h.copy(), self.alpha.copy(),
                        self.d.copy(), self.b.copy(), self.z, self.status, self.nodes)

    def n_observations(self, k: int | None = None) -> int:
        return int(self.y.sum() if k is None else self.y[k].sum())

    def n_downlinks(self, k: int | None = None) -> int:
        return int(self.q.sum() if k is None else self.q[k].sum())


def objective(schedule: Schedule, instance: ScheduleInstance) -> float:
    terms = [instance.C] * int(schedule.q.sum()) + [1.0] * int(schedule.y.sum())
    if instance.P_aux:
        counts = schedule.alpha.sum(axis=(0, 1))
        for p, n in enumerate(counts):
            terms.extend([float(instance.O[p])] * int(n))
    return math.fsum(terms)


def empty_schedule(instance: ScheduleInstance, status: SolverStatus = SolverStatus.INFEASIBLE) -> Schedule:
    K, T = instance.K, instance.horizon.steps
    return Schedule(np.zeros((K, instance.horizon.stages), int), np.zeros((K, T, instance.P)),
                    np.zeros((K, T, instance.G)), np.zeros((K, T)), np.zeros((K, T, instance.P_aux)),
                    np.zeros((K, T + 1)), np.zeros((K, T + 1)), 0.0, status)


# ---------------------------------------------------------------------------
# Resource lattice
# ---------------------------------------------------------------------------

def _frac(x: float) -> Fraction:
    return Fraction(repr(float(x)))


def _quantum(values: Sequence[float]) -> Fraction:
    fr = [abs(_frac(v)) for v in values if v != 0]
    if not fr:
        return Fraction(1)
    num = 0
    den = 1
    for f in fr:
        den = den * f.denominator // math.gcd(den, f.denominator)
    for f in fr:
        num = math.gcd(num, f.numerator * (den // f.denominator))
    return Fraction(num, den)


@dataclass(frozen=True)
class Lattice:
    qd: Fraction
    qb: Fraction
    d_min: Fraction
    b_min: Fraction
    nd: int
    nb: int
    Do: int
    Dc: int
    Bc: int
    Bo: int
    Bm: int
    Br: int
    Bt: int
    Be: int = 0  # terminal battery floor index

    @classmethod
    def for_instance(cls, inst: ScheduleInstance, cap: int = DEFAULT_LATTICE_CAP,
                     extra_d: Sequence[float] = (), extra_b: Sequence[float] = ()) -> "Lattice":
        r = inst.resources
        dvals = [r.D_obs, r.D_comm, r.D_max - r.D_min] + [x - r.D_min for x in list(inst.d0) + list(extra_d)]
        bvals = [r.B_charge, r.B_obs, r.B_comm, r.B_recon, r.B_time, r.B_max - r.B_min, inst.terminal_floor - r.B_min]
        bvals += [x - r.B_min for x in list(inst.b0) + list(extra_b)]
        qd, qb = _quantum(dvals), _quantum(bvals)
        nd = int((_frac(r.D_max) - _frac(r.D_min)) / qd) + 1
        nb = int((_frac(r.B_max) - _frac(r.B_min)) / qb) + 1
        if nd * nb > cap:
            raise LatticeError(
                f"resource lattice has {nd}x{nb} = {nd * nb} states (cap {cap}); "
                f"choose resource values sharing a coarser quantum (data {qd}, battery {qb})")

        def n(v: float, q: Fraction) -> int:
            return int(_frac(v) / q)

        return cls(qd, qb, _frac(r.D_min), _frac(r.B_min), nd, nb, n(r.D_obs, qd), n(r.D_comm, qd),
                   n(r.B_charge, qb), n(r.B_obs, qb), n(r.B_comm, qb), n(r.B_recon, qb), n(r.B_time, qb),
                   int((_frac(inst.terminal_floor) - _frac(r.B_min)) / qb))

    def d_index(self, value: float) -> int:
        x = (_frac(value) - self.d_min) / self.qd
        if x.denominator != 1:
            raise LatticeError(f"data level {value} is off the lattice")
        return int(x)

    def b_index(self, value: float) -> int:
        x = (_frac(value) - self.b_min) / self.qb
        if x.denominator != 1:
            raise LatticeError(f"battery level {value} is off the lattice")
        return int(x)

    def d_value(self, i: int) -> float:
        return float(self.d_min + i * self.qd)

    def b_value(self, i: int) -> float:
        return float(self.b_min + i * self.qb)


# Actions in canonical preference order.
OBSERVE, DOWNLINK, CHARGE, IDLE = 0, 1, 2, 3


def _moves(lat: Lattice, extra: int, C: float) -> list[tuple[int, int, int, int, int, int, int, float]]:
    """Per action: (action, d_lo, d_hi, dd, b_lo, b_hi, db, reward) over source indices."""
    s = lat.Bt + extra
    top_d, top_b = lat.nd - 1, lat.nb - 1
    return [
        (OBSERVE, 0, top_d - lat.Do, lat.Do, lat.Bo + s, top_b, -(lat.Bo + s), 1.0),
        (DOWNLINK, lat.Dc, top_d, -lat.Dc, lat.Bm + s, top_b, -(lat.Bm + s), float(C)),
        # the lower-bound check ignores the incoming charge
        (CHARGE, 0, top_d, 0, s, top_b - lat.Bc, lat.Bc - s, 0.0),
        (IDLE, 0, top_d, 0, s, top_b, -s, 0.0),
    ]


def _forward(R: np.ndarray, flags: np.ndarray, extra: int, lat: Lattice, C: float) -> np.ndarray:
    """One step of the forward DP on a batch ``R`` (B, nd, nb); ``flags`` (B, 3) = obs, down, sun."""
    out = np.full_like(R, NEG)
    for act, d_lo, d_hi, dd, b_lo, b_hi, db, rew in _moves(lat, extra, C):
        if d_lo > d_hi or b_lo > b_hi:
            continue
        src = R[:, d_lo:d_hi + 1, b_lo:b_hi + 1]
        if act != IDLE:
            mask = flags[:, act]
            if not mask.any():
                continue
            src = np.where(mask[:, None, None], src + rew, NEG)
        dst = out[:, d_lo + dd:d_hi + 1 + dd, b_lo + db:b_hi + 1 + db]
        np.maximum(dst, src, out=dst)
    return out


def _backward(G: np.ndarray, flags: np.ndarray, extra: int, lat: Lattice, C: float) -> np.ndarray:
    """Value-to-go one step earlier; ``G`` (nd, nb), ``flags`` (3,)."""
    out = np.full_like(G, NEG)
    for act, d_lo, d_hi, dd, b_lo, b_hi, db, rew in _moves(lat, extra, C):
        if d_lo > d_hi or b_lo > b_hi or (act != IDLE and not flags[act]):
            continue
        cand = G[d_lo + dd:d_hi + 1 + dd, b_lo + db:b_hi + 1 + db] + rew
        dst = out[d_lo:d_hi + 1, b_lo:b_hi + 1]
        np.maximum(dst, cand, out=dst)
    return out


def _boundary_extra(horizon: ScheduleHorizon, tau: int, lat: Lattice) -> int:
    last_stage = horizon.stage_of(tau) == horizon.stages - 1
    return lat.Br if horizon.is_stage_end(tau) and not last_stage else 0


def _path_flags(inst: ScheduleInstance, k: int, path: Sequence[int]) -> np.ndarray:
    """(T, 3) bool: any priority visible, any station visible, sunlit."""
    V = inst.path_slice("V", k, path)
    W = inst.path_slice("W", k, path)
    H = inst.path_slice("H", k, path)
    return np.stack([V.any(axis=1), W.any(axis=1), H], axis=1)


def _extract(inst: ScheduleInstance, k: int, path: Sequence[int], lat: Lattice, tau0: int,
             di: int, bi: int, sched: Schedule) -> bool:
    """Canonical optimal events for steps >= tau0 from state (di, bi); writes into ``sched``."""
    hz = inst.horizon
    T = hz.steps
    flags = _path_flags(inst, k, path)
    V = inst.path_slice("V", k, path)
    W = inst.path_slice("W", k, path)
    G = np.empty((T - tau0 + 1, lat.nd, lat.nb))
    G[-1] = 0.0
    G[-1, :, :lat.Be] = NEG
    for tau in range(T - 1, tau0 - 1, -1):
        G[tau - tau0] = _backward(G[tau - tau0 + 1], flags[tau], _boundary_extra(hz, tau, lat), lat, inst.C)
    if not np.isfinite(G[0, di, bi]):
        return False
    sched.d[k, tau0] = lat.d_value(di)
    sched.b[k, tau0] = lat.b_value(bi)
    for tau in range(tau0, T):
        cur = G[tau - tau0, di, bi]
        nxt = G[tau - tau0 + 1]
        for act, d_lo, d_hi, dd, b_lo, b_hi, db, rew in _moves(lat, _boundary_extra(hz, tau, lat), inst.C):
            if act != IDLE and not flags[tau, act]:
                continue
            if not (d_lo <= di <= d_hi and b_lo <= bi <= b_hi):
                continue
            if nxt[di + dd, bi + db] + rew == cur:
                break
        else:  # pragma: no cover - the maximum is always attained by some move
            raise RuntimeError("value-to-go extraction lost the optimum")
        if act == OBSERVE:
            sched.y[k, tau, int(np.argmax(V[tau]))] = True
        elif act == DOWNLINK:
            sched.q[k, tau, int(np.argmax(W[tau]))] = True
        elif act == CHARGE:
            sched.h[k, tau] = True
        di, bi = di + dd, bi + db
        sched.d[k, tau + 1] = lat.d_value(di)
        sched.b[k, tau + 1] = lat.b_value(bi)
    return True


def _initial_state(inst: ScheduleInstance, k: int, lat: Lattice) -> tuple[int, int] | None:
    r = inst.resources
    d0, b0 = inst.d0[k], inst.b0[k]
    if not (r.D_min - TOL <= d0 <= r.D_max + TOL) or not (r.B_min - TOL <= b0 <= r.B_max + TOL):
        return None
    bi = lat.b_index(b0) - lat.Br
    if bi < 0:
        return None
    return lat.d_index(d0), bi


# ---------------------------------------------------------------------------
# Exact solver
# ---------------------------------------------------------------------------

@dataclass
class _Incumbent:
    z: float = NEG
    cost: float = math.inf
    path: tuple[int, ...] | None = None

    def could_lose_to(self, ub: float, cost_lb: float, prefix: tuple[int, ...]) -> bool:
        """True if some completion of ``prefix`` might beat the incumbent."""
        if self.path is None or ub > self.z + TOL:
            return True
        if ub < self.z - TOL:
            return False
        if cost_lb < self.cost - TOL:
            return True
        if cost_lb > self.cost + TOL:
            return False
        return prefix <= self.path[:len(prefix)]

    def beaten_by(self, z: float, cost: float, path: tuple[int, ...]) -> bool:
        if self.path is None or z > self.z + TOL:
            return True
        if z < self.z - TOL:
            return False
        if cost < self.cost - TOL:
            return True
        if cost > self.cost + TOL:
            return False
        return path < self.path


class _Timeout(Exception):
    pass


def _solve_satellite(inst: ScheduleInstance, k: int, lat: Lattice, deadline: float | None) -> tuple[_Incumbent, bool, int]:
    hz = inst.horizon
    S, Ts, J = hz.stages, hz.steps_per_stage, inst.J
    tv = inst.tensors
    # per stage: (J, Ts, 3) flags and per-slot auxiliary reward
    flags = [np.stack([tv.V[s, k].any(axis=2).T, tv.W[s, k].any(axis=2).T, tv.H[s, k].T], axis=2) for s in range(S)]
    aux = [np.einsum("tjp,p->j", tv.U[s, k].astype(float), inst.O) if inst.P_aux else np.zeros(J) for s in range(S)]
    step_best = [np.maximum(inst.C * f[:, :, 1], f[:, :, 0].astype(float)).sum(axis=1) for f in flags]
    stage_ub = [float(np.max(step_best[s] + aux[s])) for s in range(S)]
    suffix_ub = [sum(stage_ub[s:]) for s in range(S)] + [0.0]
    extras = [[_boundary_extra(hz, s * Ts + t, lat) for t in range(Ts)] for s in range(S)]
    cmax = float(inst.c_max[k])

    inc = _Incumbent()
    start = _initial_state(inst, k, lat)
    if start is None:
        return inc, False, 0
    root = np.full((lat.nd, lat.nb), NEG)
    root[start] = 0.0
    nodes = 0

    def expand(s: int, R: np.ndarray, prefix: tuple[int, ...], spent: float, acc_aux: float) -> None:
        nonlocal nodes
        # the deadline only cuts the search once there is an incumbent to return
        if deadline is not None and inc.path is not None and time.monotonic() > deadline:
            raise _Timeout
        step_cost = inst.initial_cost[k] if s == 0 else inst.cost[s - 1, k, prefix[-1]]
        cand = [j for j in range(J) if spent + step_cost[j] <= cmax + TOL]
        if not cand:
            return
        batch = np.broadcast_to(R, (len(cand),) + R.shape).copy()
        f = flags[s][cand]
        for t in range(Ts):
            batch = _forward(batch, f[:, t], extras[s][t], lat, inst.C)
        nodes += len(cand)
        ends = batch[:, :, lat.Be:] if s == S - 1 else batch
        best = ends.reshape(len(cand), -1).max(axis=1)
        vals = [best[i] + acc_aux + aux[s][j] for i, j in enumerate(cand)]
        order = sorted(range(len(cand)), key=lambda i: (-vals[i], cand[i]))
        for i in order:
            if not np.isfinite(vals[i]):
                continue
            j = cand[i]
            path = prefix + (j,)
            cost = spent + float(step_cost[j])
            if s == S - 1:
                if inc.beaten_by(vals[i], cost, path):
                    inc.z, inc.cost, inc.path = float(vals[i]), cost, path
                continue
            if inc.could_lose_to(vals[i] + suffix_ub[s + 1], cost, path):
                expand(s + 1, batch[i], path, cost, acc_aux + float(aux[s][j]))

    timed_out = False
    try:
        expand(0, root, (), 0.0, 0.0)
    except _Timeout:
        timed_out = True
    return inc, timed_out, nodes


def solve_exact(instance: ScheduleInstance, timeout: float | None = None,
                lattice_cap: int = DEFAULT_LATTICE_CAP) -> Schedule:
    """Optimal schedule by per-satellite branch-and-bound with a resource-lattice DP.

    ``timeout`` (s) caps the wall-clock search; on expiry the best path
    found so far is returned with status ``feasible_timeout``.
    """
    lat = Lattice.for_instance(instance, lattice_cap)
    deadline = None if timeout is None else time.monotonic() + timeout
    sched = empty_schedule(instance, SolverStatus.OPTIMAL)
    status = SolverStatus.OPTIMAL
    for k in range(instance.K):
        inc, timed_out, nodes = _solve_satellite(instance, k, lat, deadline)
        sched.nodes += nodes
        if inc.path is None:
            logger.warning("satellite %s: no feasible schedule", instance.satellites[k])
            return empty_schedule(instance, SolverStatus.INFEASIBLE)
        if timed_out:
            logger.warning("satellite %s: search timed out; returning incumbent", instance.satellites[k])
            status = SolverStatus.FEASIBLE_TIMEOUT
        _fill_satellite(instance, k, inc.path, lat, sched)
    sched.status = status
    sched.z = objective(sched, instance)
    return sched


def _fill_satellite(inst: ScheduleInstance, k: int, path: Sequence[int], lat: Lattice, sched: Schedule) -> None:
    sched.path[k] = path
    if inst.P_aux:
        sched.alpha[k] = inst.path_slice("U", k, path)
    di, bi = _initial_state(inst, k, lat)
    if not _extract(inst, k, path, lat, 0, di, bi, sched):
        raise RuntimeError("optimal path has no feasible event sequence")


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

def _options(inst: ScheduleInstance, k: int, path: Sequence[int]) -> list[list[tuple[str, int]]]:
    V = inst.path_slice("V", k, path)
    W = inst.path_slice("W", k, path)
    H = inst.path_slice("H", k, path)
    out = []
    for tau in range(inst.horizon.steps):
        opts = [("idle", -1)]
        if H[tau]:
            opts.append(("charge", -1))
        opts += [("obs", int(p)) for p in np.flatnonzero(V[tau])]
        opts += [("down", int(g)) for g in np.flatnonzero(W[tau])]
        out.append(opts)
    return out


def bruteforce_space(instance: ScheduleInstance) -> int:
    total = 0
    J, S = instance.J, instance.horizon.stages
    for k in range(instance.K):
        for path in itertools.product(range(J), repeat=S):
            total += math.prod(len(o) for o in _options(instance, k, path))
            if total > BRUTEFORCE_LIMIT:
                return total
    return total


def solve_bruteforce(instance: ScheduleInstance, chunk: int = 1 << 16) -> Schedule:
    """Exhaustive enumeration of every slot path and every per-step task choice."""
    space = bruteforce_space(instance)
    if space > BRUTEFORCE_LIMIT:
        raise SchedulerError(f"brute-force space {space} exceeds 2^24")
    r = instance.resources
    hz = instance.horizon
    T, S, Ts = hz.steps, hz.stages, hz.steps_per_stage
    sched = empty_schedule(instance, SolverStatus.OPTIMAL)
    for k in range(instance.K):
        best = None  # (z, cost, path, options, choice)
        for path in itertools.product(range(instance.J), repeat=S):
            cost = instance.path_cost(k, path)
            if cost > instance.c_max[k] + TOL:
                continue
            b_start = instance.b0[k] - r.B_recon
            if b_start < r.B_min - TOL:
                continue
            aux = float(np.einsum("tp,p->", instance.path_slice("U", k, path).astype(float), instance.O)) \
                if instance.P_aux else 0.0
            opts = _options(instance, k, path)
            radix = np.array([len(o) for o in opts], dtype=np.int64)
            n_total = int(np.prod(radix)) if T else 1
            kind = [np.array([{"idle": 0, "charge": 1, "obs": 2, "down": 3}[a] for a, _ in o]) for o in opts]
            for lo in range(0, n_total, chunk):
                idx = np.arange(lo, min(lo + chunk, n_total), dtype=np.int64)
                d = np.full(idx.size, instance.d0[k])
                b = np.full(idx.size, b_start)
                ok = np.ones(idx.size, bool)
                ok &= (r.D_min - TOL <= d) & (d <= r.D_max + TOL) & (b <= r.B_max + TOL)
                reward = np.full(idx.size, aux)
                rem = idx.copy()
                choice = np.empty((idx.size, T), dtype=np.int64)
                for tau in range(T):
                    c = rem % radix[tau]
                    rem //= radix[tau]
                    choice[:, tau] = c
                    a = kind[tau][c]
                    y, q, h = (a == 2), (a == 3), (a == 1)
                    recon = r.B_recon if (tau % Ts == Ts - 1 and tau // Ts < S - 1) else 0.0
                    ok &= d + r.D_obs * y <= r.D_max + TOL
                    ok &= d - r.D_comm * q >= r.D_min - TOL
                    ok &= b + r.B_charge * h <= r.B_max + TOL
                    ok &= b - r.B_obs * y - r.B_comm * q - r.B_time - recon >= r.B_min - TOL
                    d = d + r.D_obs * y - r.D_comm * q
                    b = b + r.B_charge * h - r.B_obs * y - r.B_comm * q - r.B_time - recon
                    ok &= (r.D_min - TOL <= d) & (d <= r.D_max + TOL)
                    ok &= (r.B_min - TOL <= b) & (b <= r.B_max + TOL)
                    reward = reward + instance.C * q + y
                ok &= b >= instance.terminal_floor - TOL
                if not ok.any():
                    continue
                cand = np.flatnonzero(ok)
                i = cand[np.argmax(reward[cand])]
                z = float(reward[i])
                if (best is None or z > best[0] + TOL
                        or (abs(z - best[0]) <= TOL and (cost < best[1] - TOL
                                                         or (abs(cost - best[1]) <= TOL and path < best[2])))):
                    best = (z, cost, path, opts, choice[i].copy())
        if best is None:
            return empty_schedule(instance, SolverStatus.INFEASIBLE)
        _, _, path, opts, choice = best
        sched.path[k] = path
        if instance.P_aux:
            sched.alpha[k] = instance.path_slice("U", k, path)
        for tau in range(T):
            a, idx_ = opts[tau][choice[tau]]
            if a == "obs":
                sched.y[k, tau, idx_] = True
            elif a == "down":
                sched.q[k, tau, idx_] = True
            elif a == "charge":
                sched.h[k, tau] = True
        sched.d[k], sched.b[k] = resource_trajectory(instance, sched, k)
    sched.z = objective(sched, instance)
    return sched


def resource_trajectory(instance: ScheduleInstance, sched: Schedule, k: int, tau0: int = 0,
                        d_start: float | None = None, b_start: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replay the recursions for satellite k from step ``tau0``."""
    r = instance.resources
    hz = instance.horizon
    T = hz.steps
    d = sched.d[k].copy()
    b = sched.b[k].copy()
    d[tau0] = instance.d0[k] if d_start is None and tau0 == 0 else (d[tau0] if d_start is None else d_start)
    b[tau0] = instance.b0[k] - r.B_recon if b_start is None and tau0 == 0 else (b[tau0] if b_start is None else b_start)
    for tau in range(tau0, T):
        ny, nq, hh = int(sched.y[k, tau].sum()), int(sched.q[k, tau].sum()), int(sched.h[k, tau])
        recon = r.B_recon if hz.is_stage_end(tau) and hz.stage_of(tau) < hz.stages - 1 else 0.0
        d[tau + 1] = d[tau] + r.D_obs * ny - r.D_comm * nq
        b[tau + 1] = b[tau] + r.B_charge * hh - r.B_obs * ny - r.B_comm * nq - r.B_time - recon
    return d, b


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_schedule(schedule: Schedule, instance: ScheduleInstance, upto: int | None = None) -> list[Violation]:
    """Every violated constraint as a record; empty iff the schedule is feasible.

    ``upto`` restricts step checks to ``tau < upto`` (executed prefix).
    """
    out: list[Violation] = []
    hz = instance.horizon
    r = instance.resources
    K, T, S, J = instance.K, hz.steps, hz.stages, instance.J
    expect = {"path": (K, S), "y": (K, T, instance.P), "q": (K, T, instance.G), "h": (K, T),
              "alpha": (K, T, instance.P_aux), "d": (K, T + 1), "b": (K, T + 1)}
    for name, shape in expect.items():
        if getattr(schedule, name).shape != shape:
            out.append(Violation("domain", -1, None, float(np.prod(getattr(schedule, name).shape)),
                                 float(np.prod(shape)), f"{name} shape {getattr(schedule, name).shape} != {shape}"))
    if out:
        return out
    last = T if upto is None else min(upto, T)

    def add(name: str, k: int, tau: int | None, lhs: float, rhs: float, detail: str = "") -> None:
        out.append(Violation(name, k, tau, float(lhs), float(rhs), detail))

    for k in range(K):
        path = schedule.path[k]
        bad = [s for s in range(S) if not 0 <= path[s] < J]
        for s in bad:
            add("flow_initial" if s == 0 else "flow_continuity", k, None, float(path[s]), float(J - 1),
                f"stage {s + 1} slot index out of range")
        if bad:
            continue
        spent = instance.path_cost(k, path)
        if spent > instance.c_max[k] + TOL:
            add("maneuver_budget", k, None, spent, instance.c_max[k])
        V = instance.path_slice("V", k, path)
        W = instance.path_slice("W", k, path)
        U = instance.path_slice("U", k, path)
        H = instance.path_slice("H", k, path)
        y, q, h, al = schedule.y[k], schedule.q[k], schedule.h[k], schedule.alpha[k]
        d, b = schedule.d[k], schedule.b[k]
        if abs(d[0] - instance.d0[k]) > TOL:
            add("data_initial", k, 0, d[0], instance.d0[k])
        b_init = instance.b0[k] - r.B_recon
        if abs(b[0] - b_init) > TOL:
            add("battery_initial", k, 0, b[0], b_init)
        if b_init < r.B_min - TOL:
            add("battery_floor_initial", k, 0, b_init, r.B_min)
        for tau in range(last):
            for p in np.flatnonzero(y[tau] & ~V[tau]):
                add("target_visibility", k, tau, 1, 0, f"priority {p}")
            for g in np.flatnonzero(q[tau] & ~W[tau]):
                add("station_visibility", k, tau, 1, 0, f"station {g}")
            for p in np.flatnonzero(al[tau] & ~U[tau]):
                add("aux_visibility", k, tau, 1, 0, f"auxiliary {p}")
            if h[tau] and not H[tau]:
                add("sun_visibility", k, tau, 1, 0)
            ny, nq, nh = int(y[tau].sum()), int(q[tau].sum()), int(h[tau])
            if ny + nq + nh > 1:
                add("task_exclusion", k, tau, ny + nq + nh, 1)
            boundary = hz.is_stage_end(tau) and hz.stage_of(tau) < S - 1
            recon = r.B_recon if boundary else 0.0
            d_next = d[tau] + r.D_obs * ny - r.D_comm * nq
            if abs(d[tau + 1] - d_next) > TOL:
                add("data_stage_carry" if boundary else "data_recursion", k, tau, d[tau + 1], d_next)
            b_next = b[tau] + r.B_charge * nh - r.B_obs * ny - r.B_comm * nq - r.B_time - recon
            if abs(b[tau + 1] - b_next) > TOL:
                add("battery_stage_carry" if boundary else "battery_recursion", k, tau, b[tau + 1], b_next)
            if d[tau] + r.D_obs * ny > r.D_max + TOL:
                add("data_capacity", k, tau, d[tau] + r.D_obs * ny, r.D_max)
            if d[tau] - r.D_comm * nq < r.D_min - TOL:
                add("data_floor", k, tau, d[tau] - r.D_comm * nq, r.D_min)
            if b[tau] + r.B_charge * nh > r.B_max + TOL:
                add("battery_capacity", k, tau, b[tau] + r.B_charge * nh, r.B_max)
            floor = b[tau] - r.B_obs * ny - r.B_comm * nq - r.B_time - recon
            if floor < r.B_min - TOL:
                add("battery_floor_boundary" if boundary else "battery_floor", k, tau, floor, r.B_min)
        for tau in range(last + 1):
            if not r.D_min - TOL <= d[tau] <= r.D_max + TOL:
                add("data_capacity" if d[tau] > r.D_max else "data_floor", k, tau, d[tau],
                    r.D_max if d[tau] > r.D_max else r.D_min, "level out of bounds")
            if not r.B_min - TOL <= b[tau] <= r.B_max + TOL:
                add("battery_capacity" if b[tau] > r.B_max else "battery_floor", k, tau, b[tau],
                    r.B_max if b[tau] > r.B_max else r.B_min, "level out of bounds")
        if last == T and b[T] < instance.terminal_floor - TOL:
            add("battery_terminal", k, T, b[T], instance.terminal_floor)
    if upto is None:
        z = objective(schedule, instance)
        if abs(z - schedule.z) > TOL:
            add("objective", -1, None, schedule.z, z)
    return out


# ---------------------------------------------------------------------------
# Rescheduling
# ---------------------------------------------------------------------------

def _pad_targets(arr: np.ndarray, n: int) -> np.ndarray:
    if arr.shape[-1] == n:
        return arr.copy()
    if arr.shape[-1] > n:
        raise SchedulerError("rescheduling cannot drop priority targets")
    pad = np.zeros(arr.shape[:-1] + (n - arr.shape[-1],), bool)
    return np.concatenate([arr, pad], axis=-1)


def reschedule_remainder(schedule: Schedule, instance: ScheduleInstance, t_now: int,
                         lattice_cap: int = DEFAULT_LATTICE_CAP) -> Schedule:
    """Re-plan tasks from step ``t_now`` on with the slot path frozen.

    ``instance`` may carry more priority targets than the schedule was
    built with (new targets are appended); events before ``t_now`` are
    kept verbatim and the resource state at ``t_now`` seeds the re-solve.
    """
    T = instance.horizon.steps
    if not 0 <= t_now <= T:
        raise SchedulerError(f"t_now={t_now} outside [0, {T}]")
    new = schedule.copy()
    new.y = _pad_targets(schedule.y, instance.P)
    if t_now == T:
        new.z = objective(new, instance)
        return new
    prefix = validate_schedule(new, instance, upto=t_now)
    if prefix:
        raise SchedulerError(f"executed schedule violates {prefix[0].constraint} before step {t_now}")
    lat = Lattice.for_instance(instance, lattice_cap, extra_d=new.d[:, t_now], extra_b=new.b[:, t_now])
    for k in range(instance.K):
        new.y[k, t_now:] = False
        new.q[k, t_now:] = False
        new.h[k, t_now:] = False
        di, bi = lat.d_index(new.d[k, t_now]), lat.b_index(new.b[k, t_now])
        if not _extract(instance, k, new.path[k], lat, t_now, di, bi, new):
            raise SchedulerError(f"satellite {instance.satellites[k]}: no feasible remainder from step {t_now}")
    new.z = objective(new, instance)
    return new


# ---------------------------------------------------------------------------
# Summaries, random instances, JSON
# ---------------------------------------------------------------------------

def satellite_summary(schedule: Schedule, instance: ScheduleInstance, k: int) -> dict:
    r = instance.resources
    hz = instance.horizon
    n_obs, n_down, n_charge = schedule.n_observations(k), schedule.n_downlinks(k), int(schedule.h[k].sum())
    n_recon = hz.stages  # one slot per stage, including the first
    used = r.B_obs * n_obs + r.B_comm * n_down + r.B_time * hz.steps + r.B_recon * n_recon
    return {
        "satellite": instance.satellites[k],
        "observations": n_obs,
        "downlinks": n_down,
        "charges": n_charge,
        "data_gathered": r.D_obs * n_obs,
        "data_downlinked": r.D_comm * n_down,
        "battery_used": used,
        "battery_charged": r.B_charge * n_charge,
        "maneuver_cost": instance.path_cost(k, schedule.path[k]),
        "provided_budget": float(instance.c_max[k]),
    }


def random_instance(seed: int, K: int = 1, S: int = 2, J: int = 3, T: int = 8, P: int = 2, G: int = 1,
                    P_aux: int = 1, density: float = 0.3, resources: ResourceParams | None = None,
                    eossp: bool = False) -> ScheduleInstance:
    """Small seeded instance with tight resources; auxiliary weights are multiples of 1/64."""
    rng = np.random.default_rng(seed)
    hz = ScheduleHorizon(dt=100.0, steps=T, stages=S)
    Ts = T // S
    tv = VisibilityTensors(
        rng.random((S, K, Ts, J, P)) < density,
        rng.random((S, K, Ts, J, P_aux)) < density,
        rng.random((S, K, Ts, J, G)) < density,
        rng.random((S, K, Ts, J)) < 0.6,
    )
    res = resources or ResourceParams(D_obs=2, D_comm=1, D_min=0, D_max=4, B_charge=3, B_obs=2, B_comm=2,
                                      B_recon=2, B_time=1, B_min=0, B_max=8)
    initial = rng.integers(0, 4, size=(K, J)).astype(float)
    initial[:, 0] = 0.0
    cost = rng.integers(0, 4, size=(S - 1, K, J, J)).astype(float)
    for j in range(J):
        cost[:, :, j, j] = 0.0
    O = rng.integers(1, 64, size=P_aux) / 64.0
    d0 = rng.integers(0, int(res.D_max) + 1, size=K).astype(float) if res.D_max == int(res.D_max) else None
    b0 = np.full(K, res.B_max) - rng.integers(0, 3, size=K)
    c_max = rng.integers(0, 6, size=K).astype(float)
    return build_instance(hz, tv, initial, cost, res, C=5.0, O=O, d0=d0, b0=b0, c_max=c_max, eossp=eossp)


def instance_to_dict(instance: ScheduleInstance, tensor_file: str) -> dict:
    return {
        "format": "firewatch-instance/1",
        "horizon": instance.horizon.to_dict(),
        "tensor_file": tensor_file,
        "initial_cost": instance.initial_cost.tolist(),
        "cost": instance.cost.tolist(),
        "resources": instance.resources.to_dict(),
        "C": instance.C,
        "O": instance.O.tolist(),
        "d0": instance.d0.tolist(),
        "b0": instance.b0.tolist(),
        "c_max": instance.c_max.tolist(),
        "eossp": instance.eossp,
        "satellites": list(instance.satellites),
        "priority_ids": list(instance.priority_ids),
        "auxiliary_ids": list(instance.auxiliary_ids),
        "station_ids": list(instance.station_ids),
        "b_end_min": instance.b_end_min,
    }


def save_instance(path: str | Path, instance: ScheduleInstance) -> None:
    """Instance JSON plus a ``.fwvt`` tensor cache next to it."""
    path = Path(path)
    tensor_path = path.with_suffix(".fwvt")
    save_tensors(tensor_path, instance.tensors)
    path.write_text(json.dumps(instance_to_dict(instance, tensor_path.name), indent=2) + "\n")


def load_instance(path: str | Path) -> ScheduleInstance:
    path = Path(path)
    d = json.loads(path.read_text())
    if d.get("format") != "firewatch-instance/1":
        raise SchedulerError(f"{path}: unrecognized instance format {d.get('format')!r}")
    tensors = load_tensors(path.parent / d["tensor_file"])
    S, K, _, J = tensors.H.shape
    return ScheduleInstance(
        ScheduleHorizon.from_dict(d["horizon"]), tensors, np.array(d["initial_cost"], float).reshape(K, J),
        np.array(d["cost"], float).reshape(S - 1, K, J, J), ResourceParams.from_dict(d["resources"]),
        float(d["C"]), np.array(d["O"], float), np.array(d["d0"], float), np.array(d["b0"], float),
        np.array(d["c_max"], float), bool(d["eossp"]), list(d["satellites"]), list(d["priority_ids"]),
        list(d["auxiliary_ids"]), list(d["station_ids"]), b_end_min=d.get("b_end_min"),
    )


def schedule_to_dict(schedule: Schedule, instance: ScheduleInstance) -> dict:
    def events(arr: np.ndarray) -> list[list[int]]:
        return [[int(i) for i in idx] for idx in np.argwhere(arr)]

    return {
        "format": "firewatch-schedule/1",
        "status": schedule.status.value,
        "z": schedule.z,
        "path": schedule.path.tolist(),
        "observations": events(schedule.y),
        "downlinks": events(schedule.q),
        "charges": events(schedule.h),
        "auxiliary_visibility": events(schedule.alpha),
        "d": schedule.d.tolist(),
        "b": schedule.b.tolist(),
        "violations": [v.to_dict() for v in validate_schedule(schedule, instance)],
        "summary": [satellite_summary(schedule, instance, k) for k in range(instance.K)],
    }


def schedule_from_dict(d: dict, instance: ScheduleInstance) -> Schedule:
    s = empty_schedule(instance, SolverStatus(d["status"]))
    s.path = np.array(d["path"], int).reshape(instance.K, instance.horizon.stages)
    for key, arr in (("observations", s.y), ("downlinks", s.q), ("charges", s.h), ("auxiliary_visibility", s.alpha)):
        for idx in d[key]:
            arr[tuple(idx)] = True
    s.d = np.array(d["d"], float).reshape(s.d.shape)
    s.b = np.array(d["b"], float).reshape(s.b.shape)
    s.z = float(d["z"])
    return s
