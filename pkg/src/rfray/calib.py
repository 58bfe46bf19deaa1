"""Position calibration against measured power delay profiles.

GPS fixes project into the local scene frame through an azimuthal
equidistant mapping; endpoint positions then descend a composite
PDP-mismatch loss (peak matching + count penalty + shape + displacement
regularizer) by alternating coarse/fine grid sweeps with a
ball-constrained direction-set refinement.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .channel import OutageError, PowerDelayProfile, pdp, synthesize_cir

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371008.8

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class GeoOrigin:
    lat0_deg: float
    lon0_deg: float
    radius_m: float = EARTH_RADIUS_M

    def __post_init__(self):
        if abs(self.lat0_deg) > 90.0 or abs(self.lon0_deg) > 180.0:
            raise ValueError("origin latitude/longitude out of range")


def gps_to_local(lat_deg: float, lon_deg: float, origin: GeoOrigin) -> np.ndarray:
    """Project (lat, lon) to local (x=east, y=north) meters about the origin.

    Azimuthal equidistant: range = great-circle arc, bearing preserved.
    The antipode of the origin has no defined bearing and is rejected.
    """
    lat0 = math.radians(origin.lat0_deg)
    lat = math.radians(lat_deg)
    dlon = math.radians(lon_deg - origin.lon0_deg)
    cos_c = math.sin(lat0) * math.sin(lat) + math.cos(lat0) * math.cos(lat) * math.cos(dlon)
    cos_c = max(-1.0, min(1.0, cos_c))
    c = math.acos(cos_c)
    # acos loses ~1e-8 rad of resolution at the antipode, so the guard
    # band must sit wider than that; 1e-7 rad is ~0.6 m on Earth
    if c > math.pi - 1e-7:
        raise ValueError("point is antipodal to the origin; projection undefined")
    if c < 1e-12:
        return np.zeros(2)
    k = origin.radius_m * c / math.sin(c)
    x = k * math.cos(lat) * math.sin(dlon)
    y = k * (math.cos(lat0) * math.sin(lat) - math.sin(lat0) * math.cos(lat) * math.cos(dlon))
    return np.array([x, y])


@dataclass(frozen=True)
class CalibConfig:
    d_max_m: float = 10.0
    epsilon_m: float = 0.1
    max_iters: int = 10
    coarse_offsets_m: tuple = (-5.0, -2.5, 0.0, 2.5, 5.0)
    fine_range_m: float = 1.5
    fine_step_m: float = 0.5
    alpha: float = 0.7
    beta: float = 0.05
    w_unmatched: float = 0.5
    tau_ref_ns: float = 500.0
    t_norm_ns: float = 100.0
    peak_threshold_db: float = -25.0
    align_window_ns: float = 500.0

    def __post_init__(self):
        if not self.d_max_m > self.fine_range_m > self.fine_step_m > 0.0:
            raise ValueError("need d_max > fine_range > fine_step > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must sit in [0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the calibration objective.

    ``l_distance`` is the unweighted quadratic displacement term;
    ``total`` applies alpha and beta.
    """

    l_peak: float
    l_unmatched: float
    l_shape: float
    l_distance: float
    total: float


@dataclass(frozen=True)
class CalibrationResult:
    tx_star: np.ndarray
    rx_star: np.ndarray
    loss_trace: list
    displacement_tx: np.ndarray
    displacement_rx: np.ndarray
    converged: bool
    iterations: int


class CalibrationInfeasibleError(RuntimeError):
    """Every candidate position left the link in outage."""


def extract_peaks(profile: PowerDelayProfile, threshold_db: float = -25.0):
    """Strict local maxima within ``threshold_db`` of the global peak.

    Returns (delay_ns, power) pairs at bin centers with power normalized
    so the global peak is 1.0.
    """
    p = profile.power_mw
    if len(p) == 0:
        return []
    top = float(p.max())
    if top <= 0.0:
        return []
    floor = top * 10.0 ** (threshold_db / 10.0)
    centers = profile.bin_centers_ns
    peaks = []
    for i in range(len(p)):
        left = p[i - 1] if i > 0 else 0.0
        right = p[i + 1] if i < len(p) - 1 else 0.0
        if p[i] > 0.0 and p[i] >= floor and p[i] > left and p[i] > right:
            peaks.append((float(centers[i]), float(p[i] / top)))
    return peaks


def align_max_peak(sim_peaks, meas_peaks) -> float:
    """Delay offset (sim minus measured) of the strongest peak in each set."""
    if not sim_peaks or not meas_peaks:
        raise ValueError("both profiles need at least one peak to align")
    sim_tau = max(sim_peaks, key=lambda pk: pk[1])[0]
    meas_tau = max(meas_peaks, key=lambda pk: pk[1])[0]
    return sim_tau - meas_tau


def align_correlation(
    sim: PowerDelayProfile, meas: PowerDelayProfile, window_ns: float = 500.0
) -> float:
    """Integer-bin shift maximizing linear-power correlation within the window.

    Ties resolve toward the smallest |offset|. Both profiles must share a
    bin width; the returned offset is sim-minus-measured in ns.
    """
    if not math.isclose(sim.bin_width_ns, meas.bin_width_ns):
        raise ValueError("profiles must share a bin width to correlate")
    w = sim.bin_width_ns
    sim_base = int(round(sim.first_bin_delay_ns / w))
    meas_base = int(round(meas.first_bin_delay_ns / w))
    # full cross-correlation of the two power sequences; lag k means the sim
    # sequence sits k bins later than the measured one
    corr = np.correlate(sim.power_mw, meas.power_mw, mode="full")
    lags = np.arange(-(len(meas.power_mw) - 1), len(sim.power_mw)) + (sim_base - meas_base)
    max_shift = int(math.floor(window_ns / w + 1e-9))
    inside = np.abs(lags) <= max_shift
    if not np.any(inside):
        return 0.0
    corr, lags = corr[inside], lags[inside]
    ties = lags[corr == corr.max()]
    best_shift = int(ties[np.argmin(np.abs(ties))])
    return best_shift * w


def peak_matching_loss(sim_peaks, meas_peaks, cfg: CalibConfig):
    """Weighted nearest-peak mismatch, averaged over sim peaks.

    Peak lists arrive already aligned. Each sim peak pays its cheapest
    measured counterpart (delay term over ``t_norm_ns`` plus
    normalized-power difference), weighted down exponentially in delay
    over ``tau_ref_ns``. Returns (loss, matched_count); either side empty
    gives (0, 0) and leaves the count mismatch to the unmatched penalty.
    """
    if not sim_peaks or not meas_peaks:
        return 0.0, 0
    total = 0.0
    for tau, power in sim_peaks:
        weight = math.exp(-tau / cfg.tau_ref_ns)
        cost = min(
            abs(tau - mt) / cfg.t_norm_ns + abs(power - mp) for mt, mp in meas_peaks
        )
        total += weight * cost
    n = len(sim_peaks)
    return total / n, n


def unmatched_penalty(n_sim: int, n_meas: int, w: float = 0.5) -> float:
    """Penalty for a peak-count mismatch; both-empty is fully penalized."""
    if n_sim == 0 and n_meas == 0:
        return w
    return w * abs(n_sim - n_meas) / max(n_sim, n_meas)


def shape_loss(
    sim: PowerDelayProfile,
    meas: PowerDelayProfile,
    delta_tau_ns: float = 0.0,
    threshold_db: float = -25.0,
) -> float:
    """Mean squared dB difference over bins where either profile is significant.

    The sim profile shifts by ``-delta_tau_ns`` onto the measured axis.
    Each profile clamps from below at its own peak + threshold floor, so
    absent power compares at the floor rather than minus infinity.
    """
    if not math.isclose(sim.bin_width_ns, meas.bin_width_ns):
        raise ValueError("profiles must share a bin width")
    w = sim.bin_width_ns
    shift_bins = int(round(delta_tau_ns / w))

    sim_base = int(round(sim.first_bin_delay_ns / w)) - shift_bins
    meas_base = int(round(meas.first_bin_delay_ns / w))
    lo = min(sim_base, meas_base)
    hi = max(sim_base + len(sim.power_mw), meas_base + len(meas.power_mw))

    def as_db(profile, base):
        top = float(profile.power_mw.max()) if len(profile.power_mw) else 0.0
        if top <= 0.0:
            return np.full(hi - lo, -math.inf), -math.inf
        floor_db = 10.0 * math.log10(top) + threshold_db
        out = np.full(hi - lo, floor_db)
        pos = profile.power_mw > 0.0
        with np.errstate(divide="ignore"):
            vals = np.maximum(10.0 * np.log10(profile.power_mw, where=pos, out=np.full_like(profile.power_mw, -math.inf)), floor_db)
        out[base - lo : base - lo + len(profile.power_mw)] = vals
        return out, floor_db

    sim_db, sim_floor = as_db(sim, sim_base)
    meas_db, meas_floor = as_db(meas, meas_base)
    significant = (sim_db > sim_floor) | (meas_db > meas_floor)
    if not np.any(significant):
        logger.warning("shape loss: no significant bins in either profile")
        return 0.0
    diff = sim_db[significant] - meas_db[significant]
    return float(np.mean(diff * diff))


def combined_loss(
    sim: PowerDelayProfile,
    meas: PowerDelayProfile,
    disp_tx,
    disp_rx,
    cfg: CalibConfig,
) -> LossBreakdown:
    """Full calibration objective for one candidate endpoint pair.

    Profiles align by correlation when either offers three or more
    peaks, otherwise by strongest peak. The total blends the peak terms,
    the shape term, and the quadratic displacement regularizer.
    """
    if len(sim.power_mw) == 0 or sim.total_power_mw <= 0.0:
        raise OutageError("simulated profile is empty")
    if len(meas.power_mw) == 0 or meas.total_power_mw <= 0.0:
        raise ValueError("measured profile is empty")
    sim_peaks = extract_peaks(sim, cfg.peak_threshold_db)
    meas_peaks = extract_peaks(meas, cfg.peak_threshold_db)
    if len(sim_peaks) >= 3 or len(meas_peaks) >= 3:
        delta = align_correlation(sim, meas, cfg.align_window_ns)
    else:
        delta = align_max_peak(sim_peaks, meas_peaks)
    aligned = [(tau - delta, power) for tau, power in sim_peaks]
    l_peak, _ = peak_matching_loss(aligned, meas_peaks, cfg)
    l_unmatched = unmatched_penalty(len(sim_peaks), len(meas_peaks), cfg.w_unmatched)
    l_shape = shape_loss(sim, meas, delta, cfg.peak_threshold_db)
    d2 = float(np.dot(disp_tx, disp_tx) + np.dot(disp_rx, disp_rx))
    l_distance = d2 / cfg.d_max_m**2
    total = (
        cfg.alpha * (l_peak + l_unmatched)
        + (1.0 - cfg.alpha) * l_shape
        + cfg.beta * l_distance
    )
    return LossBreakdown(l_peak, l_unmatched, l_shape, l_distance, total)


def _line_bounds(x, u, center, radius):
    """Parameter interval of {x + t u} inside the ball |p - center| <= radius."""
    d = x - center
    b = float(np.dot(d, u))
    disc = b * b - (float(np.dot(d, d)) - radius * radius)
    if disc <= 0.0:
        return 0.0, 0.0
    root = math.sqrt(disc)
    return -b - root, -b + root


def _golden_line(f, x, u, t_lo, t_hi, tol):
    """Golden-section minimum of f(x + t u) over [t_lo, t_hi]."""

    def val(t):
        v = f(x + t * u)
        return v if math.isfinite(v) else math.inf

    a, b = t_lo, t_hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = val(c), val(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = val(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = val(d)
    t = c if fc <= fd else d
    return t, min(fc, fd)


def powell_minimize(f, x0, center, radius, tol_m: float = 0.1, max_iters: int = 20):
    """Derivative-free direction-set descent constrained to a ball.

    Line searches are golden-section over each direction's chord through
    the ball centered on the surveyed point. Returns (x_best, f_best);
    non-finite objective values lose every comparison but propagate with
    their point if nothing finite is seen.
    """
    x = np.asarray(x0, float).copy()
    dirs = [np.eye(len(x))[i] for i in range(len(x))]
    fx = f(x)
    for _ in range(max_iters):
        x_start = x.copy()
        biggest_drop, drop_idx = 0.0, 0
        for i, u in enumerate(dirs):
            t_lo, t_hi = _line_bounds(x, u, center, radius)
            if t_hi - t_lo <= 0.0:
                continue
            t, ft = _golden_line(f, x, u, t_lo, t_hi, tol_m)
            if ft < fx or (not math.isfinite(fx) and math.isfinite(ft)):
                if fx - ft > biggest_drop:
                    biggest_drop, drop_idx = fx - ft, i
                x = x + t * u
                fx = ft
        step = x - x_start
        norm = float(np.linalg.norm(step))
        if norm < tol_m:
            break
        new_dir = step / norm
        dirs[drop_idx] = new_dir
        t_lo, t_hi = _line_bounds(x, new_dir, center, radius)
        if t_hi - t_lo > 0.0:
            t, ft = _golden_line(f, x, new_dir, t_lo, t_hi, tol_m)
            if ft < fx:
                x = x + t * new_dir
                fx = ft
    return x, fx


def _grid_candidates(anchor_xy, offsets, center_xy, radius):
    """Offset grid about ``anchor_xy``, dropping points outside the trust ball."""
    out = []
    for dx, dy in itertools.product(offsets, offsets):
        p = np.array([anchor_xy[0] + dx, anchor_xy[1] + dy])
        if np.linalg.norm(p - center_xy) <= radius + 1e-9:
            out.append((dx, dy, p))
    return out


def calibrate(
    scene,
    tx0,
    rx0,
    meas: PowerDelayProfile,
    trace_cfg,
    calib_cfg: CalibConfig = CalibConfig(),
    simulate=None,
) -> CalibrationResult:
    """Alternating endpoint refinement against a measured PDP.

    Receiver first, then transmitter: coarse grid about the surveyed
    position, fine grid about the coarse optimum, then the
    ball-constrained direction-set descent, all clamped to the trust
    ball about the surveyed points. Only strict loss improvements are
    accepted, so the loss trace is monotone in ``total``. Heights stay
    fixed throughout. ``simulate(tx, rx)`` may replace the built-in
    trace-and-bin pipeline (it must return a PowerDelayProfile on the
    measured profile's bin width, or raise :class:`OutageError`).
    """
    tx0 = np.asarray(tx0, float)
    rx0 = np.asarray(rx0, float)
    if len(meas.power_mw) == 0 or meas.total_power_mw <= 0.0:
        raise ValueError("measured profile is empty")

    if simulate is None:
        from .tracer import trace

        def simulate(tx, rx):
            paths = trace(scene, tx, rx, trace_cfg)
            cir = synthesize_cir(paths, trace_cfg.cutoff_dbm)
            if len(cir) == 0:
                raise OutageError("no paths above cutoff")
            return pdp(cir, meas.bin_width_ns, trace_cfg.frequency_hz)

    cache: dict = {}

    def loss_at(tx, rx):
        key = (tuple(np.round(tx * 100).astype(int)), tuple(np.round(rx * 100).astype(int)))
        if key not in cache:
            try:
                sim = simulate(tx, rx)
                cache[key] = combined_loss(sim, meas, tx - tx0, rx - rx0, calib_cfg)
            except OutageError:
                cache[key] = None
        return cache[key]

    def total_of(breakdown):
        return breakdown.total if breakdown is not None else math.inf

    fine_offsets = np.arange(
        -calib_cfg.fine_range_m,
        calib_cfg.fine_range_m + 0.5 * calib_cfg.fine_step_m,
        calib_cfg.fine_step_m,
    )

    current = {"tx": tx0.copy(), "rx": rx0.copy()}
    anchors = {"tx": tx0, "rx": rx0}

    def eval_side(side, xy):
        pos = np.array([xy[0], xy[1], anchors[side][2]])
        if side == "rx":
            return loss_at(current["tx"], pos)
        return loss_at(pos, current["rx"])

    initial = loss_at(current["tx"], current["rx"])
    best = total_of(initial)
    trace_log = [initial] if initial is not None else []
    converged = False
    iterations = 0
    for iterations in range(1, calib_cfg.max_iters + 1):
        movements = {}
        for side in ("rx", "tx"):
            anchor_xy = anchors[side][:2]
            prev = current[side].copy()
            cands = _grid_candidates(
                anchor_xy, calib_cfg.coarse_offsets_m, anchor_xy, calib_cfg.d_max_m
            )
            scored = sorted(
                ((total_of(eval_side(side, p)), dx, dy, p) for dx, dy, p in cands),
                key=lambda item: (item[0], item[1], item[2]),
            )
            f_best, _, _, xy_best = scored[0]
            cands = _grid_candidates(xy_best, fine_offsets, anchor_xy, calib_cfg.d_max_m)
            scored = sorted(
                ((total_of(eval_side(side, p)), dx, dy, p) for dx, dy, p in cands),
                key=lambda item: (item[0], item[1], item[2]),
            )
            if scored and scored[0][0] <= f_best:
                f_best, _, _, xy_best = scored[0]
            # refine from the better of the fine-grid optimum and the
            # incumbent, so each side's step never loses reachable ground
            if math.isfinite(best) and best < f_best:
                f_best, xy_best = best, prev[:2]
            if math.isfinite(f_best):
                xy_ref, f_ref = powell_minimize(
                    lambda xy: total_of(eval_side(side, xy)),
                    xy_best,
                    anchor_xy,
                    calib_cfg.d_max_m,
                )
                if f_ref < f_best:
                    f_best, xy_best = f_ref, xy_ref
            if math.isfinite(f_best) and f_best < best:
                current[side] = np.array([xy_best[0], xy_best[1], anchors[side][2]])
                best = f_best
                trace_log.append(eval_side(side, xy_best))
            movements[side] = float(np.linalg.norm(current[side] - prev))
        if all(m < calib_cfg.epsilon_m for m in movements.values()):
            converged = True
            break
    if not math.isfinite(best):
        raise CalibrationInfeasibleError(
            "every candidate position is in outage; cannot calibrate"
        )
    return CalibrationResult(
        tx_star=current["tx"],
        rx_star=current["rx"],
        loss_trace=trace_log,
        displacement_tx=current["tx"] - tx0,
        displacement_rx=current["rx"] - rx0,
        converged=converged,
        iterations=iterations,
    )


def write_calibration_report(path, tx0, rx0, result: CalibrationResult) -> None:
    """Structured-text calibration record: positions, displacements, loss trace."""
    t = result.loss_trace
    reduction = 0.0
    if t and t[0].total > 0.0:
        reduction = 100.0 * (t[0].total - t[-1].total) / t[0].total
    lines = [
        "calibration report",
        f"initial_tx = {_fmt_vec(tx0)}",
        f"initial_rx = {_fmt_vec(rx0)}",
        f"final_tx = {_fmt_vec(result.tx_star)}",
        f"final_rx = {_fmt_vec(result.rx_star)}",
        f"displacement_tx_m = {np.linalg.norm(result.displacement_tx):.4f}",
        f"displacement_rx_m = {np.linalg.norm(result.displacement_rx):.4f}",
        f"converged = {str(result.converged).lower()}",
        f"iterations = {result.iterations}",
        f"loss_reduction_pct = {reduction:.2f}",
        "loss_trace (peak, unmatched, shape, distance, total):",
    ]
    for i, lb in enumerate(t):
        lines.append(
            f"  step {i}: {lb.l_peak:.6f} {lb.l_unmatched:.6f} "
            f"{lb.l_shape:.6f} {lb.l_distance:.6f} {lb.total:.6f}"
        )
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_vec(v) -> str:
    return "(" + ", ".join(f"{float(c):.4f}" for c in np.asarray(v, float)) + ")"
