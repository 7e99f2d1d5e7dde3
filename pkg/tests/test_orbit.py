import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from firewatch.orbit import (
    J2000,
    MU_EARTH,
    R_EARTH,
    OrbitalElements,
    OrbitError,
    StateVector,
    best_phasing_cost,
    build_slot_grid,
    elements_at,
    elements_over,
    max_plane_offset,
    maneuver_cost,
    parse_tle,
    passive_cadence,
    phasing_cost,
    plane_angle,
    plane_change_cost,
    propagate,
    propagate_offsets,
    subpoint,
)

EPOCH = datetime(2024, 8, 7, tzinfo=timezone.utc)


def circular(a=7211.0, inc=98.7, raan=100.0, nu=0.0, epoch=EPOCH):
    return OrbitalElements(a, 0.0, inc, raan, 0.0, nu, epoch)


def test_period_matches_closed_form():
    el = circular()
    assert el.period == pytest.approx(6094.024892024077, rel=1e-12)
    assert el.circular_speed == pytest.approx(7.434831667552201, rel=1e-12)


def test_propagation_returns_after_one_period():
    el = OrbitalElements(7600.0, 0.12, 40.0, 33.0, 71.0, 15.0, EPOCH)
    s0 = propagate(el, EPOCH)
    s1 = propagate(el, EPOCH + timedelta(seconds=el.period))
    np.testing.assert_allclose(s1.position, s0.position, atol=1e-6)
    np.testing.assert_allclose(s1.velocity, s0.velocity, atol=1e-9)


def test_quarter_period_equatorial():
    el = OrbitalElements(7000.0, 0.0, 0.0, 0.0, 0.0, 0.0, EPOCH)
    r, v = propagate_offsets(el, [0.0, el.period / 4])
    np.testing.assert_allclose(r[0], [7000.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(r[1], [0.0, 7000.0, 0.0], atol=1e-7)
    np.testing.assert_allclose(v[1], [-math.sqrt(MU_EARTH / 7000.0), 0.0, 0.0], atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(e=st.floats(0.0, 0.6), nu=st.floats(0.0, 359.9), dt=st.floats(0.0, 50000.0))
def test_energy_and_momentum_conserved(e, nu, dt):
    el = OrbitalElements(9000.0, e, 63.4, 10.0, 270.0, nu, EPOCH)
    r, v = propagate_offsets(el, [0.0, dt])
    energy = 0.5 * np.sum(v**2, axis=1) - MU_EARTH / np.linalg.norm(r, axis=1)
    assert energy[1] == pytest.approx(-MU_EARTH / (2 * 9000.0), rel=1e-9)
    assert energy[0] == pytest.approx(energy[1], rel=1e-9)
    h = np.cross(r, v)
    np.testing.assert_allclose(h[1], h[0], rtol=1e-9, atol=1e-6)


def test_kepler_solution_against_root_finder():
    a, e = 8000.0, 0.3
    el = OrbitalElements(a, e, 0.0, 0.0, 0.0, 0.0, EPOCH)
    n = math.sqrt(MU_EARTH / a**3)
    for dt in (100.0, 1234.5, 4000.0):
        M = n * dt
        E = brentq(lambda x: x - e * math.sin(x) - M, 0.0, 2 * math.pi)
        expected = [a * (math.cos(E) - e), a * math.sqrt(1 - e * e) * math.sin(E), 0.0]
        r, _ = propagate_offsets(el, [dt])
        np.testing.assert_allclose(r[0], expected, atol=1e-7)


def test_elements_at_is_consistent_with_propagation():
    el = OrbitalElements(7300.0, 0.05, 51.6, 20.0, 40.0, 10.0, EPOCH)
    t = EPOCH + timedelta(seconds=3333)
    moved = elements_at(el, t)
    np.testing.assert_allclose(propagate(moved, t).position, propagate(el, t).position, atol=1e-7)


def test_subpoint_at_reference_epoch():
    # satellite on the inertial x axis when Greenwich sits at 280.46061837 deg
    lat, lon, alt = subpoint(StateVector(np.array([7000.0, 0.0, 0.0]), np.zeros(3), J2000))
    assert lat == 0.0
    assert lon == pytest.approx(79.53938163, abs=1e-9)
    assert alt == pytest.approx(7000.0 - R_EARTH)
    lat, _, _ = subpoint(StateVector(np.array([0.0, 0.0, 7000.0]), np.zeros(3), J2000))
    assert lat == 90.0


def test_subpoint_inside_earth_rejected():
    with pytest.raises(OrbitError):
        subpoint(StateVector(np.array([100.0, 0.0, 0.0]), np.zeros(3), J2000))


def test_elements_over_places_subpoint():
    t = EPOCH + timedelta(hours=5)
    for lat, lon, asc in ((20.0, -150.0, True), (-60.0, 10.0, False), (75.0, 179.5, True)):
        el = elements_over(lat, lon, 833.0, t, 98.7, asc)
        st_ = propagate(el, t)
        plat, plon, _ = subpoint(st_)
        assert plat == pytest.approx(lat, abs=1e-9)
        assert (plon - lon + 180) % 360 - 180 == pytest.approx(0.0, abs=1e-9)
        assert (st_.velocity[2] >= 0) == asc


def test_plane_change_equals_velocity_difference_at_node():
    a = circular(inc=98.7, raan=100.0)
    b = circular(inc=95.0, raan=100.0)
    va = propagate(a, EPOCH).velocity
    vb = propagate(b, EPOCH).velocity
    assert plane_change_cost(a, b) == pytest.approx(float(np.linalg.norm(va - vb)), rel=1e-12)
    assert math.degrees(plane_angle(a, b)) == pytest.approx(3.7, abs=1e-12)


@pytest.mark.parametrize("phase,k", [(24.0, 1), (24.0, 3), (-48.0, 2), (120.0, 5)])
def test_phasing_orbit_rendezvous(phase, k):
    """Fly the phasing ellipse and check the chaser meets the target slot."""
    a = 7211.0
    cost = phasing_cost(a, phase, k)
    v_circ = math.sqrt(MU_EARTH / a)
    t_ph = 2 * math.pi * math.sqrt(a**3 / MU_EARTH) * (1 - phase / (360 * k))
    a_ph = (MU_EARTH * (t_ph / (2 * math.pi)) ** 2) ** (1 / 3)
    v_burn = math.sqrt(MU_EARTH * (2 / a - 1 / a_ph))
    assert cost == pytest.approx(2 * abs(v_burn - v_circ), rel=1e-12)
    # chaser: apse at the burn point, same plane as the target
    e = abs(a - a_ph) / a_ph
    nu0 = 180.0 if a_ph < a else 0.0
    chaser = OrbitalElements(a_ph, e, 30.0, 0.0, 0.0 - nu0, nu0, EPOCH)
    target = OrbitalElements(a, 0.0, 30.0, 0.0, 0.0, phase, EPOCH)
    rc, vc = propagate_offsets(chaser, [0.0, k * t_ph])
    rt, _ = propagate_offsets(target, [k * t_ph])
    assert float(np.linalg.norm(vc[0])) == pytest.approx(v_burn, rel=1e-12)
    np.testing.assert_allclose(rc[0], [a, 0.0, 0.0], atol=1e-6)
    np.testing.assert_allclose(rc[1], rt[0], atol=1e-4)


def test_phasing_rejects_sub_surface_ellipse():
    assert phasing_cost(6500.0, 300.0, 1) is None
    assert phasing_cost(7211.0, 0.0, 1) == 0.0


def test_best_phasing_prefers_many_revolutions():
    c1 = phasing_cost(7211.0, 24.0, 1)
    best = best_phasing_cost(7211.0, 24.0)
    assert best <= c1
    assert best == pytest.approx(min(phasing_cost(7211.0, s, k) for k in range(1, 16) for s in (24.0, -336.0)
                                     if phasing_cost(7211.0, s, k) is not None))


def test_maneuver_cost_symmetry_and_identity():
    a = circular(nu=0.0)
    b = circular(inc=100.0, raan=103.0, nu=72.0)
    assert maneuver_cost(a, a) == 0.0
    assert maneuver_cost(a, b) > 0.0
    with pytest.raises(OrbitError):
        maneuver_cost(a, OrbitalElements(7300.0, 0.0, 98.7, 100.0, 0.0, 0.0, EPOCH))


def test_max_inclination_offset_for_unit_budget():
    el = circular()
    assert max_plane_offset(1.0, el.circular_speed) == pytest.approx(7.712219833732198, abs=1e-9)


def test_slot_grid_has_135_slots():
    el = circular()
    grid = build_slot_grid(el, 1.0, n_planes=5, n_anomaly=15)
    assert len(grid) == 135
    assert grid.plane_counts == (5, 5)
    assert grid[0] == el
    costs = grid.costs_from(el)
    assert costs[0] == 0.0
    # the outermost planes use the whole budget on the plane change
    di_max = max_plane_offset(1.0, el.circular_speed)
    for d_inc, d_raan in grid.plane_offsets:
        angle = plane_angle(el, OrbitalElements(7211.0, 0.0, 98.7 + d_inc, 100.0 + d_raan, 0.0, 0.0, EPOCH))
        assert math.degrees(angle) <= di_max + 1e-9
    outer = [j for j, s in enumerate(grid.slots) if s.true_anomaly == el.true_anomaly and
             math.isclose(math.degrees(plane_angle(el, s)), di_max, abs_tol=1e-9)]
    assert len(outer) == 4
    for j in outer:
        assert costs[j] == pytest.approx(1.0, rel=1e-9)


def test_slot_grid_zero_budget_collapses_planes():
    grid = build_slot_grid(circular(), 0.0, n_planes=5, n_anomaly=15)
    assert len(grid) == 15
    with pytest.raises(OrbitError):
        build_slot_grid(circular(), 1.0, n_planes=4)


def test_passive_cadence():
    assert passive_cadence(circular(), 100.0) in (60, 61)
    assert passive_cadence(circular(), 100.0) == 60
    with pytest.raises(OrbitError):
        passive_cadence(circular(), 0.0)


def test_parse_tle():
    el = parse_tle(
        "1 25544U 98067A   08264.51782528 -.00002182  00000-0 -11606-4 0  2927",
        "2 25544  51.6416 247.4627 0006703 130.5360 325.0288 15.72125391563537",
    )
    assert el.inclination == 51.6416
    assert el.raan == 247.4627
    assert el.eccentricity == pytest.approx(0.0006703)
    assert el.semi_major_axis == pytest.approx(6730.960676936836, rel=1e-9)
    assert abs(el.epoch - datetime(2008, 9, 20, 12, 25, 40, 104192, tzinfo=timezone.utc)) < timedelta(milliseconds=1)
    with pytest.raises(OrbitError):
        parse_tle("x", "y")


def test_invalid_elements():
    with pytest.raises(OrbitError):
        OrbitalElements(6000.0, 0.0, 0.0, 0.0, 0.0, 0.0, EPOCH)
    with pytest.raises(OrbitError):
        OrbitalElements(7000.0, 1.0, 0.0, 0.0, 0.0, 0.0, EPOCH)
