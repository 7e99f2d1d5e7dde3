"""Shared constructors for scheduler tests."""

from __future__ import annotations

import numpy as np

from firewatch.horizon import ScheduleHorizon
from firewatch.scheduler import ResourceParams, Schedule, ScheduleInstance, build_instance, random_instance
from firewatch.visibility import VisibilityTensors

SMALL = ResourceParams(D_obs=2, D_comm=1, D_min=0, D_max=4, B_charge=3, B_obs=2, B_comm=2, B_recon=2, B_time=1,
                       B_min=0, B_max=8)


def stage_major(a: np.ndarray, S: int) -> np.ndarray:
    """(T, J, ...) for one satellite -> (S, 1, Ts, J, ...)."""
    T = a.shape[0]
    return a.reshape((S, T // S) + a.shape[1:])[:, None]


def hand_instance(V, W=None, H=None, U=None, S=1, initial_cost=None, cost=None, c_max=0.0, O=None,
                  resources=None, d0=None, b0=None, C=5.0, dt=100.0) -> ScheduleInstance:
    """Single-satellite instance from (T, J, ...) visibility arrays."""
    V = np.asarray(V, bool)
    T, J = V.shape[:2]
    W = np.zeros((T, J, 0), bool) if W is None else np.asarray(W, bool)
    H = np.ones((T, J), bool) if H is None else np.asarray(H, bool)
    U = np.zeros((T, J, 0), bool) if U is None else np.asarray(U, bool)
    tv = VisibilityTensors(stage_major(V, S), stage_major(U, S), stage_major(W, S), stage_major(H, S))
    initial = np.zeros((1, J)) if initial_cost is None else np.asarray(initial_cost, float).reshape(1, J)
    costs = np.zeros((S - 1, 1, J, J)) if cost is None else np.asarray(cost, float).reshape(S - 1, 1, J, J)
    return build_instance(ScheduleHorizon(dt, T, S), tv, initial, costs, resources, C, O, d0, b0, c_max)


def tiny_params(seed: int) -> dict:
    """Parameters of one acceptance-sized random instance (K<=2, S=2, J<=3, T<=8, P<=2, G=1)."""
    rng = np.random.default_rng(10_000 + seed)
    return {"K": int(rng.integers(1, 3)), "S": 2, "J": int(rng.integers(1, 4)), "T": int(rng.choice([2, 4, 6, 8])),
            "P": int(rng.integers(0, 3)), "G": 1, "P_aux": int(rng.integers(0, 3))}


def tiny_instance(seed: int, **overrides) -> ScheduleInstance:
    return random_instance(seed, **{**tiny_params(seed), **overrides})


def telescoping_errors(sched: Schedule, inst: ScheduleInstance) -> list[str]:
    """Closed-form end states versus the stored trajectories (exact comparison)."""
    r = inst.resources
    hz = inst.horizon
    out = []
    for k in range(inst.K):
        n_obs, n_down, n_ch = int(sched.y[k].sum()), int(sched.q[k].sum()), int(sched.h[k].sum())
        d_end = inst.d0[k] + r.D_obs * n_obs - r.D_comm * n_down
        b_end = (inst.b0[k] - r.B_recon * hz.stages + r.B_charge * n_ch - r.B_obs * n_obs - r.B_comm * n_down
                 - r.B_time * hz.steps)
        if sched.d[k, -1] != d_end:
            out.append(f"sat {k}: d_end {sched.d[k, -1]} != {d_end}")
        if sched.b[k, -1] != b_end:
            out.append(f"sat {k}: b_end {sched.b[k, -1]} != {b_end}")
        if not ((r.D_min <= sched.d[k]).all() and (sched.d[k] <= r.D_max).all()):
            out.append(f"sat {k}: data out of bounds")
        if not ((r.B_min <= sched.b[k]).all() and (sched.b[k] <= r.B_max).all()):
            out.append(f"sat {k}: battery out of bounds")
    return out


# ---------------------------------------------------------------------------
# Single-event mutations with the constraint family each must trip
# ---------------------------------------------------------------------------

def _replay(inst, s, k):
    from firewatch.scheduler import resource_trajectory
    s.d[k], s.b[k] = resource_trajectory(inst, s, k)


def _steps(inst, s, boundary=None, idle=False):
    hz = inst.horizon
    for k in range(inst.K):
        for tau in range(hz.steps):
            is_b = hz.is_stage_end(tau) and hz.stage_of(tau) < hz.stages - 1
            if boundary is not None and is_b != boundary:
                continue
            if idle and (s.y[k, tau].any() or s.q[k, tau].any() or s.h[k, tau]):
                continue
            yield k, tau


def _slices(inst, s, k):
    return {n: inst.path_slice(n, k, s.path[k]) for n in "VWUH"}


def _flip_on(name, family_pred, replay=False, boundary=None):
    """Turn on one event of ``name`` at the first idle step satisfying ``family_pred``."""
    def mutate(inst, sched):
        for k, tau in _steps(inst, sched, boundary, idle=True):
            sl = _slices(inst, sched, k)
            for idx in family_pred(inst, sched, sl, k, tau):
                s = sched.copy()
                arr = getattr(s, name)
                if idx is None:
                    arr[k, tau] = True
                else:
                    arr[k, tau, idx] = True
                if replay:
                    _replay(inst, s, k)
                return s
        return None
    return mutate


def _invisible(key):
    def pred(inst, s, sl, k, tau):
        arr = sl[key][tau]
        return [int(i) for i in np.flatnonzero(~arr)][:1]
    return pred


def _visible(key, cond=lambda inst, s, k, tau: True):
    def pred(inst, s, sl, k, tau):
        if not cond(inst, s, k, tau):
            return []
        return [int(i) for i in np.flatnonzero(sl[key][tau])][:1]
    return pred


def _sun(cond=lambda inst, s, k, tau: True, lit=True):
    def pred(inst, s, sl, k, tau):
        return [None] if sl["H"][tau] == lit and cond(inst, s, k, tau) else []
    return pred


def _second_event(inst, sched):
    for k, tau in _steps(inst, sched):
        sl = _slices(inst, sched, k)
        busy = sched.y[k, tau].any() or sched.q[k, tau].any()
        if busy and sl["H"][tau] and not sched.h[k, tau]:
            s = sched.copy()
            s.h[k, tau] = True
            return s
    return None


def _flip_off(name, boundary=False):
    def mutate(inst, sched):
        for k, tau in _steps(inst, sched, boundary):
            arr = getattr(sched, name)[k, tau]
            if arr.any():
                s = sched.copy()
                getattr(s, name)[k, tau] = False
                return s
        return None
    return mutate


def _path(kind):
    def mutate(inst, sched):
        for k in range(inst.K):
            s = sched.copy()
            if kind == "flow_initial":
                s.path[k, 0] = inst.J
                return s
            if kind == "flow_continuity":
                s.path[k, 1] = -1
                return s
            for stage in range(inst.horizon.stages):
                for j in range(inst.J):
                    s.path[k, stage] = j
                    if inst.path_cost(k, s.path[k]) > inst.c_max[k] + 1e-9:
                        return s
                s.path[k, stage] = sched.path[k, stage]
        return None
    return mutate


def _alpha_off(inst, sched):
    for k, tau in _steps(inst, sched):
        if sched.alpha[k, tau].any():
            s = sched.copy()
            s.alpha[k, tau, int(np.argmax(sched.alpha[k, tau]))] = False
            return s
    return None


def _res(cond):
    return lambda inst, s, k, tau: cond(inst.resources, s.d[k, tau], s.b[k, tau])


MUTATIONS = [
    ("target_visibility", _flip_on("y", _invisible("V"))),
    ("station_visibility", _flip_on("q", _invisible("W"))),
    ("aux_visibility", _flip_on("alpha", _invisible("U"))),
    ("sun_visibility", _flip_on("h", _sun(lit=False))),
    ("task_exclusion", _second_event),
    ("data_recursion", _flip_on("y", _visible("V"), boundary=False)),
    ("data_stage_carry", _flip_on("y", _visible("V"), boundary=True)),
    ("battery_recursion", _flip_on("h", _sun(), boundary=False)),
    ("battery_stage_carry", _flip_on("h", _sun(), boundary=True)),
    ("data_capacity", _flip_on("y", _visible("V", _res(lambda r, d, b: d + r.D_obs > r.D_max)), replay=True)),
    ("data_floor", _flip_on("q", _visible("W", _res(lambda r, d, b: d - r.D_comm < r.D_min)), replay=True)),
    ("battery_capacity", _flip_on("h", _sun(_res(lambda r, d, b: b + r.B_charge > r.B_max)), replay=True)),
    ("battery_floor", _flip_on("y", _visible("V", _res(lambda r, d, b: b - r.B_obs - r.B_time < r.B_min)),
                               replay=True, boundary=False)),
    ("battery_floor_boundary", _flip_on("y", _visible(
        "V", _res(lambda r, d, b: b - r.B_obs - r.B_time - r.B_recon < r.B_min)), replay=True, boundary=True)),
    ("maneuver_budget", _path("maneuver_budget")),
    ("flow_initial", _path("flow_initial")),
    ("flow_continuity", _path("flow_continuity")),
    ("objective", _alpha_off),
    ("data_recursion", _flip_off("y")),
    ("battery_recursion", _flip_off("h")),
]
