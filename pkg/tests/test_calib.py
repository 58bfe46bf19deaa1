import math

import numpy as np
import pytest

from rfray import calib, channel
from rfray.calib import (
    CalibConfig,
    CalibrationInfeasibleError,
    GeoOrigin,
    align_correlation,
    align_max_peak,
    calibrate,
    combined_loss,
    extract_peaks,
    gps_to_local,
    peak_matching_loss,
    powell_minimize,
    shape_loss,
    unmatched_penalty,
)
from rfray.channel import OutageError, PowerDelayProfile
from conftest import RX_TRUE, TX_TRUE, pdp_simulator, scatterer_link


def test_gps_to_local_one_degree_north():
    origin = GeoOrigin(40.0, -75.0)
    xy = gps_to_local(41.0, -75.0, origin)
    assert xy[0] == pytest.approx(0.0, abs=1e-6)
    assert xy[1] == pytest.approx(111195.08023353, abs=1e-4)


def test_gps_to_local_origin_and_symmetry():
    origin = GeoOrigin(0.0, 0.0)
    assert np.allclose(gps_to_local(0.0, 0.0, origin), [0.0, 0.0])
    east = gps_to_local(0.0, 1.0, origin)
    north = gps_to_local(1.0, 0.0, origin)
    # on the equator through the origin, 1 degree east = 1 degree north
    assert east[0] == pytest.approx(north[1], abs=1e-6)
    assert east[1] == pytest.approx(0.0, abs=1e-6)


def test_gps_to_local_antipode_rejected():
    origin = GeoOrigin(10.0, 20.0)
    with pytest.raises(ValueError):
        gps_to_local(-10.0, -160.0, origin)


def test_calib_config_invariants():
    with pytest.raises(ValueError):
        CalibConfig(d_max_m=1.0, fine_range_m=1.5)  # fine range beyond ball
    with pytest.raises(ValueError):
        CalibConfig(fine_step_m=0.0)
    with pytest.raises(ValueError):
        CalibConfig(alpha=1.2)


def _profile(delays, powers, width=1.0):
    delays = np.asarray(delays, float)
    first = math.floor(delays.min() / width) * width
    n = int((delays.max() - first) / width) + 1
    power = np.zeros(n)
    for d, p in zip(delays, powers):
        power[int((d - first) / width)] += p
    return PowerDelayProfile(width, first, power)


def test_extract_peaks_strict_maxima():
    prof = _profile([10.5, 11.5, 12.5, 30.5], [0.5, 1.0, 0.5, 0.3])
    peaks = extract_peaks(prof)
    assert [round(t, 1) for t, _ in peaks] == [11.5, 30.5]
    assert peaks[0][1] == pytest.approx(1.0)
    assert peaks[1][1] == pytest.approx(0.3)


def test_extract_peaks_threshold():
    prof = _profile([10.5, 50.5], [1.0, 10 ** (-30 / 10)])
    assert len(extract_peaks(prof, threshold_db=-25.0)) == 1
    assert len(extract_peaks(prof, threshold_db=-35.0)) == 2


def test_peak_matching_loss_reference():
    cfg = CalibConfig()
    # one sim peak at 100 ns vs measured at 150 ns, equal unit power:
    # weight e^(-100/500), delay cost 50/100
    loss, n = peak_matching_loss([(100.0, 1.0)], [(150.0, 1.0)], cfg)
    assert loss == pytest.approx(math.exp(-0.2) * 0.5, abs=1e-12)
    assert n == 1


def test_peak_matching_loss_empty_sides():
    cfg = CalibConfig()
    assert peak_matching_loss([], [(10.0, 1.0)], cfg) == (0.0, 0)
    assert peak_matching_loss([(10.0, 1.0)], [], cfg) == (0.0, 0)


def test_unmatched_penalty():
    assert unmatched_penalty(3, 2) == pytest.approx(0.5 / 3.0, abs=1e-12)
    assert unmatched_penalty(2, 3) == pytest.approx(0.5 / 3.0, abs=1e-12)
    assert unmatched_penalty(4, 4) == 0.0
    assert unmatched_penalty(0, 0) == 0.5


def test_shape_loss_identity_and_offset():
    prof = _profile([10.5, 12.5, 20.5], [1.0, 0.4, 0.1])
    assert shape_loss(prof, prof) == pytest.approx(0.0, abs=1e-12)
    shifted = PowerDelayProfile(prof.bin_width_ns, prof.first_bin_delay_ns,
                                prof.power_mw * 10 ** (3.0 / 10.0))
    # uniform 3 dB offset -> mean squared dB difference of 9
    assert shape_loss(shifted, prof) == pytest.approx(9.0, abs=1e-9)


def test_align_max_peak():
    sim = [(120.0, 0.3), (140.0, 1.0)]
    meas = [(100.0, 1.0), (260.0, 0.6)]
    assert align_max_peak(sim, meas) == pytest.approx(40.0)


def test_align_correlation_brute_force():
    rng = np.random.default_rng(23)
    for _ in range(25):
        n = int(rng.integers(20, 80))
        base = rng.uniform(0.0, 1.0, n) ** 3
        shift = int(rng.integers(-15, 16))
        sim_first = 100.0
        meas_first = sim_first - shift
        sim = PowerDelayProfile(1.0, sim_first, base)
        meas = PowerDelayProfile(1.0, meas_first, base.copy())
        est = align_correlation(sim, meas)
        # brute force over integer lags
        best, best_val = None, -np.inf
        for lag in range(-40, 41):
            acc = 0.0
            for i in range(n):
                j = i + lag - shift
                if 0 <= j < n:
                    acc += base[i] * base[j]
            if acc > best_val or (acc == best_val and abs(lag) < abs(best)):
                best, best_val = lag, acc
        assert est == pytest.approx(best, abs=1e-9)


def test_align_correlation_tie_prefers_small_shift():
    # two identical unit spikes: every overlap of one spike ties; the
    # zero-lag alignment (both spikes) wins outright, and a symmetric
    # two-spike comb ties at several lags resolved toward zero
    power = np.zeros(21)
    power[5] = 1.0
    power[15] = 1.0
    sim = PowerDelayProfile(1.0, 0.0, power.copy())
    meas = PowerDelayProfile(1.0, 0.0, power.copy())
    assert align_correlation(sim, meas) == 0.0


def test_combined_loss_identity_and_blend():
    cfg = CalibConfig()
    prof = _profile([10.5, 12.5, 14.5, 30.5], [1.0, 0.5, 0.7, 0.2])
    zero = np.zeros(3)
    lb = combined_loss(prof, prof, zero, zero, cfg)
    assert lb.total == pytest.approx(0.0, abs=1e-12)
    # displacement-only loss: beta * |disp|^2 / d_max^2
    disp = np.array([10.0, 0.0, 0.0])
    lb = combined_loss(prof, prof, disp, zero, cfg)
    assert lb.l_distance == pytest.approx(1.0, abs=1e-12)
    assert lb.total == pytest.approx(cfg.beta, abs=1e-12)
    # blend identity holds on every evaluation
    other = _profile([10.5, 13.5, 22.5], [0.8, 1.0, 0.3])
    lb = combined_loss(other, prof, disp, np.array([1.0, 2.0, 0.0]), cfg)
    want = (cfg.alpha * (lb.l_peak + lb.l_unmatched)
            + (1 - cfg.alpha) * lb.l_shape + cfg.beta * lb.l_distance)
    assert lb.total == pytest.approx(want, abs=1e-12)


def test_combined_loss_outage_signal():
    prof = _profile([10.5], [1.0])
    empty = PowerDelayProfile(1.0, 0.0, np.array([]))
    with pytest.raises(OutageError):
        combined_loss(empty, prof, np.zeros(3), np.zeros(3), CalibConfig())


def test_powell_quadratic_bowl():
    target = np.array([2.0, -1.0])
    x, fx = powell_minimize(lambda p: float(np.sum((p - target) ** 2)),
                            np.zeros(2), np.zeros(2), 10.0)
    assert np.linalg.norm(x - target) < 0.15
    assert fx < 0.02


def test_powell_respects_ball():
    center = np.array([0.0, 0.0])
    # optimum far outside the ball: the result must stay within radius
    x, _ = powell_minimize(lambda p: float(np.sum((p - [50.0, 0]) ** 2)),
                           np.zeros(2), center, 3.0)
    assert np.linalg.norm(x - center) <= 3.0 + 1e-9


def test_calibrate_self_consistency(synthetic_link):
    tx0, rx0, simulate = synthetic_link
    meas = simulate(tx0, rx0)
    res = calibrate(None, tx0, rx0, meas, None, simulate=simulate)
    assert res.converged
    assert res.iterations == 1
    assert np.linalg.norm(res.displacement_tx) < 1e-9
    assert np.linalg.norm(res.displacement_rx) < 1e-9
    assert res.loss_trace[-1].total < 1e-6


def test_calibrate_recovers_single_side_offset():
    points, refl = scatterer_link(63)
    simulate = pdp_simulator(points, refl)
    rx_gt = RX_TRUE + np.array([3.2, -2.4, 0.0])
    meas = simulate(TX_TRUE, rx_gt)
    res = calibrate(None, TX_TRUE, RX_TRUE, meas, None, simulate=simulate)
    assert np.linalg.norm(res.rx_star - rx_gt) <= 0.5
    # the transmitter was already correct and stays put
    assert np.linalg.norm(res.tx_star - TX_TRUE) <= 0.5


def test_calibrate_trace_monotone_and_bounded(synthetic_link):
    tx0, rx0, simulate = synthetic_link
    meas = simulate(tx0, rx0)
    start_tx = tx0 + np.array([2.0, -1.5, 0.0])
    start_rx = rx0 + np.array([2.0, -1.5, 0.0])
    res = calibrate(None, start_tx, start_rx, meas, None, simulate=simulate)
    totals = [lb.total for lb in res.loss_trace]
    assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))
    cfg = CalibConfig()
    assert np.linalg.norm(res.displacement_tx) <= cfg.d_max_m + 1e-9
    assert np.linalg.norm(res.displacement_rx) <= cfg.d_max_m + 1e-9
    # heights never move
    assert res.tx_star[2] == start_tx[2]
    assert res.rx_star[2] == start_rx[2]


def test_calibrate_all_outage_infeasible(synthetic_link):
    tx0, rx0, _ = synthetic_link

    def dead(tx, rx):
        raise OutageError("nothing received")

    meas = PowerDelayProfile(1.0, 0.0, np.array([1.0]))
    with pytest.raises(CalibrationInfeasibleError):
        calibrate(None, tx0, rx0, meas, None, simulate=dead)


def test_calibrate_loss_trace_records_components(synthetic_link):
    tx0, rx0, simulate = synthetic_link
    meas = simulate(tx0, rx0)
    start = np.array([1.0, 1.0, 0.0])
    res = calibrate(None, tx0 + start, rx0 + start, meas, None, simulate=simulate)
    for lb in res.loss_trace:
        want = (CalibConfig().alpha * (lb.l_peak + lb.l_unmatched)
                + (1 - CalibConfig().alpha) * lb.l_shape
                + CalibConfig().beta * lb.l_distance)
        assert lb.total == pytest.approx(want, abs=1e-12)


def test_calibration_report_file(tmp_path, synthetic_link):
    tx0, rx0, simulate = synthetic_link
    meas = simulate(tx0, rx0)
    res = calibrate(None, tx0, rx0, meas, None, simulate=simulate)
    path = tmp_path / "report.txt"
    calib.write_calibration_report(path, tx0, rx0, res)
    text = path.read_text()
    assert "initial_tx" in text
    assert "loss_reduction_pct" in text
    assert "step 0" in text
