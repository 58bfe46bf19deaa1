import math

import numpy as np
import pytest

from rfray import em
from rfray.tracer import (
    Mechanisms,
    TraceConfig,
    TraceError,
    fibonacci_directions,
    reception_sphere_radius,
    trace,
)
from conftest import empty_scene, right_angle_wedge_scene, wall_scene

C_NS = 0.299792458  # m per ns


def cfg(freq=6.75e9, **kw):
    kw.setdefault("ray_count", 20000)
    kw.setdefault("max_depth", 3)
    return TraceConfig(frequency_hz=freq, **kw)


def test_fibonacci_unit_and_spread():
    n = 10000
    d = fibonacci_directions(n)
    assert d.shape == (n, 3)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    # near-uniform: the mean direction nearly cancels
    assert np.linalg.norm(d.mean(axis=0)) < 3.0 / math.sqrt(n)
    # nearest-neighbour separation stays within a factor ~2 of the
    # equal-area estimate sqrt(4 pi / n)
    nominal = math.sqrt(4.0 * math.pi / n)
    idx = np.arange(0, n, 37)
    dots = np.clip(d[idx] @ d.T, -1.0, 1.0)
    ang = np.arccos(dots)
    ang[np.arange(len(idx)), idx] = np.inf  # self
    nearest = ang.min(axis=1)
    assert nearest.min() > 0.5 * nominal
    assert nearest.max() < 2.0 * nominal


def test_fibonacci_deterministic():
    assert np.array_equal(fibonacci_directions(512), fibonacci_directions(512))


def test_reception_sphere_radius():
    # 1e6 launches at 100 m: r = 100 * sqrt(4 pi / 1e6) / sqrt(3)
    assert reception_sphere_radius(1_000_000, 100.0) == pytest.approx(0.2046653415, abs=1e-9)
    r1 = reception_sphere_radius(1_000_000, 100.0)
    assert reception_sphere_radius(250_000, 100.0) == pytest.approx(2 * r1, rel=1e-12)
    assert reception_sphere_radius(1_000_000, 200.0) == pytest.approx(2 * r1, rel=1e-12)


def test_free_space_los_budget():
    c = cfg(ray_count=2000)
    paths = trace(empty_scene(), [0, 0, 10], [100, 0, 10], c)
    assert len(paths) == 1
    p = paths[0]
    assert p.signature == "LOS"
    assert p.length_m == pytest.approx(100.0, abs=1e-9)
    assert p.delay_ns == pytest.approx(100.0 / C_NS, abs=1e-9)
    # 0 dBm through lambda/(4 pi d) at 6.75 GHz, 100 m
    assert p.power_dbm == pytest.approx(-89.03385867850388, abs=1e-9)


def test_los_angle_conventions():
    c = cfg(ray_count=2000)
    paths = trace(empty_scene(), [0, 0, 10], [100, 0, 10], c)
    p = paths[0]
    # departure toward +x: azimuth 0, zenith 90
    assert p.aod_az_deg == pytest.approx(0.0, abs=1e-9)
    assert p.aod_zen_deg == pytest.approx(90.0, abs=1e-9)
    # arrival direction points back toward the transmitter
    assert p.aoa_az_deg == pytest.approx(180.0, abs=1e-9)
    assert p.aoa_zen_deg == pytest.approx(90.0, abs=1e-9)


def test_blocked_los_is_absent():
    scene = wall_scene()
    c = cfg(ray_count=5000, max_depth=1)
    # receiver beyond the +y wall: direct ray is blocked
    paths = trace(scene, [40.0, 0.0, 5.0], [40.0, 12.0, 5.0], c)
    assert all(p.signature != "LOS" for p in paths)


def test_single_bounce_image_oracle():
    scene = wall_scene()
    tx = np.array([0.0, 0.0, 5.0])
    rx = np.array([60.0, 0.0, 5.0])
    c = cfg(ray_count=60000, max_depth=1)
    paths = trace(scene, tx, rx, c)
    bounce = [p for p in paths if p.signature != "LOS"]
    assert len(bounce) == 2  # one per wall, symmetric
    length = math.sqrt(60.0**2 + 12.0**2)
    lam = em.C_LIGHT / c.frequency_hz
    theta = math.acos(12.0 / length)
    eta = em.permittivity(scene.materials[0], c.frequency_hz).eta
    gamma = abs(em.fresnel(eta, theta).te)
    want_power = 20.0 * math.log10(lam / (4 * math.pi * length) * gamma)
    for p in bounce:
        assert p.delay_ns == pytest.approx(length / C_NS, abs=0.01)
        assert p.power_dbm == pytest.approx(want_power, abs=0.05)
        # the image method puts the bounce point on the wall mid-span
        hit = p.interactions[0].point
        assert abs(abs(hit[1]) - 6.0) < 1e-6
        assert hit[0] == pytest.approx(30.0, abs=1e-6)


def test_reflection_angles_match_image_method():
    scene = wall_scene()
    c = cfg(ray_count=60000, max_depth=2)
    paths = trace(scene, [0, 0, 5], [60, 0, 5], c)
    for p in paths:
        pts = [np.array([0, 0, 5.0])] + [i.point for i in p.interactions] + [np.array([60, 0, 5.0])]
        for k, inter in enumerate(p.interactions):
            if inter.kind != "R":
                continue
            n = scene.normals[inter.index]
            d_in = pts[k + 1] - pts[k]
            d_out = pts[k + 2] - pts[k + 1]
            d_in = d_in / np.linalg.norm(d_in)
            d_out = d_out / np.linalg.norm(d_out)
            assert abs(abs(d_in @ n) - abs(d_out @ n)) < 1e-6
            # angle of incidence equals angle of reflection
            mirrored = d_in - 2 * (d_in @ n) * n
            assert np.allclose(mirrored, d_out, atol=1e-6)


def test_determinism_across_workers():
    scene = wall_scene()
    c = cfg(ray_count=30000, max_depth=3)
    a = trace(scene, [0, 0, 5], [60, 1, 5], c, workers=1)
    b = trace(scene, [0, 0, 5], [60, 1, 5], c, workers=4)
    assert len(a) == len(b)
    for pa, pb in zip(a, b):
        assert pa.signature == pb.signature
        assert pa.delay_ns == pb.delay_ns
        assert pa.field_amp == pb.field_amp


def test_reciprocity():
    scene = wall_scene()
    c = cfg(ray_count=30000, max_depth=3)
    fwd = trace(scene, [0, 0, 5], [60, 1, 5], c)
    rev = trace(scene, [60, 1, 5], [0, 0, 5], c)
    assert len(fwd) == len(rev)
    for pf, pr in zip(fwd, rev):
        assert pf.delay_ns == pytest.approx(pr.delay_ns, abs=1e-9)
        assert pf.power_dbm == pytest.approx(pr.power_dbm, abs=1e-6)


def test_no_duplicate_paths():
    scene = wall_scene()
    c = cfg(ray_count=80000, max_depth=4)
    paths = trace(scene, [0, 0, 5], [60, 1, 5], c)
    seen = set()
    for p in paths:
        key = (p.signature, round(p.delay_ns, 6))
        assert key not in seen
        seen.add(key)


def test_cutoff_monotonicity():
    scene = wall_scene()
    lo = trace(scene, [0, 0, 5], [60, 1, 5], cfg(ray_count=30000, cutoff_dbm=-160.0))
    hi = trace(scene, [0, 0, 5], [60, 1, 5], cfg(ray_count=30000, cutoff_dbm=-95.0))
    assert all(p.power_dbm >= -95.0 for p in hi)
    lo_keys = {(p.signature, round(p.delay_ns, 9)) for p in lo}
    hi_keys = {(p.signature, round(p.delay_ns, 9)) for p in hi}
    assert hi_keys <= lo_keys
    assert len(hi) <= len(lo)


def test_paths_sorted_by_delay():
    scene = wall_scene()
    paths = trace(scene, [0, 0, 5], [60, 1, 5], cfg(ray_count=30000))
    delays = [p.delay_ns for p in paths]
    assert delays == sorted(delays)


def test_diffraction_into_shadow():
    scene = right_angle_wedge_scene()
    tx = np.array([10.0, 8.0, 0.0])
    rx = np.array([-7.5, -13.0, 0.0])  # deep shadow: no LOS, no reflection
    c = cfg(ray_count=20000, max_depth=2)
    paths = trace(scene, tx, rx, c)
    assert len(paths) == 1
    p = paths[0]
    assert p.interactions[0].kind == "D"
    # stationary point at z=0 by symmetry
    q = p.interactions[0].point
    assert q[2] == pytest.approx(0.0, abs=1e-9)
    s_p = np.linalg.norm(tx - q)
    s = np.linalg.norm(rx - q)
    assert p.delay_ns == pytest.approx((s_p + s) / C_NS, abs=1e-6)
    assert math.isfinite(p.power_dbm)


def test_diffraction_off_when_disabled():
    scene = right_angle_wedge_scene()
    c = cfg(ray_count=20000, mechanisms=Mechanisms(diffraction=False))
    paths = trace(scene, [10.0, 8.0, 0.0], [-7.5, -13.0, 0.0], c)
    assert paths == []


def test_keller_point_outside_edge_is_rejected():
    # push both endpoints beyond the +z end of the edge: the stationary
    # point would fall outside the physical span
    scene = right_angle_wedge_scene(size=2.0)
    c = cfg(ray_count=5000, max_depth=2)
    paths = trace(scene, [10.0, 8.0, 50.0], [-7.5, -13.0, 80.0], c)
    assert all(i.kind != "D" for p in paths for i in p.interactions)


def test_config_validation():
    with pytest.raises(ValueError):
        TraceConfig(frequency_hz=0.0)
    with pytest.raises(ValueError):
        TraceConfig(frequency_hz=6.75e9, ray_count=0)
    with pytest.raises(ValueError):
        TraceConfig(frequency_hz=6.75e9, max_depth=-1)
    with pytest.raises(ValueError):
        TraceConfig(frequency_hz=6.75e9, cutoff_dbm=10.0)


def test_coincident_endpoints_rejected():
    with pytest.raises(TraceError):
        trace(empty_scene(), [0, 0, 1], [0, 0, 1], cfg(ray_count=100))
