import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from firewatch.horizon import ScheduleHorizon
from firewatch.orbit import R_EARTH, OrbitalElements, build_slot_grid, elements_over, propagate, propagate_offsets
from firewatch.visibility import (
    GroundPoint,
    PointKind,
    VisibilityTensors,
    compute_tensors,
    elevation_angle,
    is_daylight,
    load_tensors,
    path_visibility,
    save_tensors,
    station_visible,
    sun_direction,
    target_visible,
)

START = datetime(2024, 8, 7, tzinfo=timezone.utc)
J2000 = datetime(2000, 1, 1, 12, tzinfo=timezone.utc)


def point_eci(lat, lon, t):
    # independent Earth-rotation model: GMST(J2000) + sidereal rate
    theta = math.radians(280.46061837) + 7.2921159e-5 * (t - J2000).total_seconds()
    la, lo = math.radians(lat), math.radians(lon) + theta
    return R_EARTH * np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])


def nadir_angle(r, p):
    """Off-nadir angle (deg) of ground point p from satellite r via the central angle."""
    rn = np.linalg.norm(r)
    lam = math.atan2(float(np.linalg.norm(np.cross(r, p))), float(np.dot(r, p)))
    return math.degrees(math.atan2(R_EARTH * math.sin(lam), rn - R_EARTH * math.cos(lam))), lam


@pytest.mark.parametrize("half_angle", [22.5, 70.0])
def test_footprint_sweep_matches_spherical_oracle(half_angle):
    target = GroundPoint("f", 35.0, -120.0, PointKind.PRIORITY)
    slot = elements_over(30.0, -118.0, 833.0, START + timedelta(seconds=1500), 98.7)
    hz = ScheduleHorizon(dt=1.0, steps=6000, stages=1)
    V = compute_tensors([[slot]], hz, START, [target], sensor_half_angle=half_angle).V[0, 0, :, 0, 0]
    r, _ = propagate_offsets(slot, (START - slot.epoch).total_seconds() + np.arange(6000.0))
    expected = np.zeros(6000, bool)
    for tau in range(6000):
        eta, lam = nadir_angle(r[tau], point_eci(35.0, -120.0, START + timedelta(seconds=tau)))
        horizon = math.acos(R_EARTH / np.linalg.norm(r[tau]))
        expected[tau] = eta <= half_angle and lam <= horizon
    assert expected.sum() > 0
    assert np.array_equal(V, expected)


def test_single_state_predicates_agree_with_tensor():
    t = START + timedelta(seconds=777)
    slot = elements_over(10.0, 20.0, 833.0, t, 98.7)
    state = propagate(slot, t)
    near = GroundPoint("near", 11.0, 20.0)
    far = GroundPoint("far", 40.0, 20.0)
    assert target_visible(state, near) == 1
    assert target_visible(state, far) == 0


def test_station_elevation_oracle():
    t = START + timedelta(seconds=300)
    slot = elements_over(45.0, 5.0, 833.0, t, 98.7)
    state = propagate(slot, t)
    for lat, lon in ((45.0, 5.0), (50.0, 9.0), (30.0, -10.0), (60.0, 30.0)):
        st = GroundPoint("gs", lat, lon, PointKind.STATION)
        p = point_eci(lat, lon, t)
        _, lam = nadir_angle(state.position, p)
        r = np.linalg.norm(state.position)
        sin_el = (r * math.cos(lam) - R_EARTH) / math.sqrt(r * r + R_EARTH**2 - 2 * r * R_EARTH * math.cos(lam))
        assert elevation_angle(state, st) == pytest.approx(math.degrees(math.asin(sin_el)), abs=1e-7)
        assert station_visible(state, st) == int(math.degrees(math.asin(sin_el)) >= 10.0)


@pytest.mark.parametrize("raan", [0.0, 60.0, 135.0, 250.0])
def test_eclipse_fraction_cylindrical_oracle(raan):
    a = 7211.0
    el = OrbitalElements(a, 0.0, 98.7, raan, 0.0, 0.0, START)
    hz = ScheduleHorizon(dt=1.0, steps=int(el.period), stages=1)
    H = compute_tensors([[el]], hz, START).H[0, 0, :, 0]
    frac = 1.0 - H.mean()
    s = sun_direction(START + timedelta(seconds=hz.steps / 2))
    i, O = math.radians(98.7), math.radians(raan)
    normal = np.array([math.sin(O) * math.sin(i), -math.cos(O) * math.sin(i), math.cos(i)])
    cos_beta = math.sqrt(max(0.0, 1 - float(np.dot(normal, s)) ** 2))
    ratio = math.sqrt(1 - (R_EARTH / a) ** 2) / cos_beta if cos_beta > 0 else math.inf
    expected = math.acos(ratio) / math.pi if ratio < 1 else 0.0
    assert frac == pytest.approx(expected, abs=2e-3)
    assert frac <= 0.45


def test_daylight_at_solstice_noon():
    t = datetime(2024, 6, 21, 12, 0, tzinfo=timezone.utc)
    assert is_daylight(23.4, 0.0, t)
    assert not is_daylight(-23.4, 180.0, t)
    assert is_daylight(85.0, 180.0, t)  # midnight sun
    assert not is_daylight(-85.0, 0.0, t)


def test_tensor_layout_is_stage_major():
    el = elements_over(40.0, -100.0, 833.0, START + timedelta(seconds=900), 98.7)
    grid = build_slot_grid(el, 0.5, n_planes=3, n_anomaly=3)
    hz = ScheduleHorizon(dt=60.0, steps=60, stages=3)
    pts = [GroundPoint("a", 40.0, -100.0), GroundPoint("b", 42.0, -98.0)]
    stations = [GroundPoint("g", 39.0, -105.0, PointKind.STATION)]
    tv = compute_tensors([grid, grid], hz, START, pts, pts[:1], stations)
    assert tv.shape == {"S": 3, "K": 2, "Ts": 20, "J": len(grid), "P": 2, "P_aux": 1, "G": 1}
    assert tv.V.any()
    for j in (0, 4, len(grid) - 1):
        flat = path_visibility([grid[j]] * 3, hz, START, pts)
        for s in range(3):
            assert np.array_equal(tv.V[s, 0, :, j], flat[s * 20:(s + 1) * 20])
            assert np.array_equal(tv.V[s, 1, :, j], flat[s * 20:(s + 1) * 20])
        assert np.array_equal(tv.U[:, 0, :, j, 0], tv.V[:, 0, :, j, 0])


def test_path_visibility_switches_slots_per_stage():
    el = elements_over(40.0, -100.0, 833.0, START + timedelta(seconds=900), 98.7)
    other = elements_over(-40.0, 60.0, 833.0, START + timedelta(seconds=900), 98.7)
    hz = ScheduleHorizon(dt=60.0, steps=40, stages=2)
    pts = [GroundPoint("a", 40.0, -100.0)]
    mixed = path_visibility([other, el], hz, START, pts)
    only = path_visibility([el, el], hz, START, pts)
    assert not mixed[:20].any()
    assert np.array_equal(mixed[20:], only[20:])


def test_tensor_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tv = VisibilityTensors(rng.random((2, 2, 5, 3, 4)) < 0.5, rng.random((2, 2, 5, 3, 0)) < 0.5,
                           rng.random((2, 2, 5, 3, 1)) < 0.5, rng.random((2, 2, 5, 3)) < 0.5)
    save_tensors(tmp_path / "t.fwvt", tv)
    back = load_tensors(tmp_path / "t.fwvt")
    assert back == tv
    assert back.shape == tv.shape
    (tmp_path / "bad.fwvt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "bad.fwvt")


def test_ground_point_validation():
    with pytest.raises(ValueError):
        GroundPoint("x", 91.0, 0.0)
    d = GroundPoint("x", 1.0, 2.0, PointKind.STATION).to_dict()
    assert GroundPoint.from_dict(d) == GroundPoint("x", 1.0, 2.0, PointKind.STATION)


def test_inconsistent_tensor_shapes_rejected():
    with pytest.raises(ValueError):
        VisibilityTensors(np.zeros((1, 1, 2, 3, 1)), np.zeros((1, 1, 2, 2, 0)), np.zeros((1, 1, 2, 3, 1)),
                          np.zeros((1, 1, 2, 3)))
