"""Statistical comparison of simulated and measured channel statistics.

Paired samples (one per link) are screened for measurement outages and
outliers, then compared through empirical CDFs and the two-sample
Kolmogorov-Smirnov statistic.  For equal sample sizes the exact KS
p-value is computed with integer arithmetic; the asymptotic Kolmogorov
series is available for the general case.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

RATIO_EPSILON = 1e-6
RATIO_LOW = 0.2
RATIO_HIGH = 5.0


@dataclass(frozen=True)
class PairedSample:
    """One link's simulated and measured value for a single parameter."""

    rt_value: float
    meas_value: float
    link_id: str = ""


@dataclass
class FilterReport:
    kept: list = field(default_factory=list)
    removed_by_ratio: list = field(default_factory=list)
    removed_by_absolute: list = field(default_factory=list)
    p90_threshold: float = math.nan
    ratios: list = field(default_factory=list)


@dataclass(frozen=True)
class KsResult:
    d: float
    p_exact: Optional[float]
    p_asymptotic: float
    n: int
    m: int


def exclude_zeros(pairs: Sequence[PairedSample]) -> list:
    """Drop pairs where either side is non-positive (measurement outage)."""
    kept = [p for p in pairs if p.rt_value > 0.0 and p.meas_value > 0.0]
    dropped = len(pairs) - len(kept)
    if dropped:
        log.info("zero exclusion removed %d of %d pairs", dropped, len(pairs))
    return kept


def ratio(pair: PairedSample, epsilon: float = RATIO_EPSILON) -> float:
    return pair.meas_value / (pair.rt_value + epsilon)


def combined_filter(pairs: Sequence[PairedSample]) -> FilterReport:
    """One-pass outlier screen combining a ratio test and an absolute test.

    A pair is removed when its measured/simulated ratio falls outside
    [0.2, 5.0], or when its absolute difference strictly exceeds the 90th
    percentile (linear interpolation) of all absolute differences.  The
    two criteria are evaluated on the full input; the filter is not
    iterated.
    """
    if len(pairs) < 2:
        raise ValueError("combined filter needs at least 2 pairs, got %d" % len(pairs))
    diffs = np.array([abs(p.meas_value - p.rt_value) for p in pairs])
    p90 = float(np.percentile(diffs, 90.0))
    report = FilterReport(p90_threshold=p90)
    for pair, diff in zip(pairs, diffs):
        r = ratio(pair)
        report.ratios.append(r)
        bad_ratio = r < RATIO_LOW or r > RATIO_HIGH
        bad_abs = diff > p90
        if bad_ratio:
            report.removed_by_ratio.append(pair)
        if bad_abs:
            report.removed_by_absolute.append(pair)
        if not (bad_ratio or bad_abs):
            report.kept.append(pair)
    return report


def ks_statistic(a, b) -> float:
    """Two-sample KS statistic: sup |F_a - F_b| over the pooled points.

    Both empirical CDFs are right-continuous step functions; the supremum
    is attained at a sample point from either side when approached from
    the left or the right, so both one-sided limits are evaluated.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("ks_statistic requires non-empty samples")
    pooled = np.concatenate([a, b])
    fa_hi = np.searchsorted(a, pooled, side="right") / a.size
    fb_hi = np.searchsorted(b, pooled, side="right") / b.size
    fa_lo = np.searchsorted(a, pooled, side="left") / a.size
    fb_lo = np.searchsorted(b, pooled, side="left") / b.size
    return float(max(np.abs(fa_hi - fb_hi).max(), np.abs(fa_lo - fb_lo).max()))


def ks_p_exact_equal_n(d: float, n: int) -> float:
    """Exact two-sided KS p-value for two samples of equal size n.

    Uses the reflection formula p = 2 * sum_j (-1)^(j-1) C(2n, n-j*k) / C(2n, n)
    with k = round-up of d*n; all combinatorics in exact integer arithmetic.
    """
    if n < 1:
        raise ValueError("sample size must be >= 1")
    k = math.ceil(d * n - 1e-9)
    if k <= 0:
        return 1.0
    total = math.comb(2 * n, n)
    acc = 0
    sign = 1
    j = 1
    while n - j * k >= 0:
        acc += sign * math.comb(2 * n, n - j * k)
        sign = -sign
        j += 1
    p = 2.0 * acc / total
    return min(1.0, max(0.0, p))


def ks_p_asymptotic(d: float, n: int, m: int) -> float:
    """Kolmogorov limiting-distribution p-value for unequal sample sizes."""
    lam = d * math.sqrt(n * m / (n + m))
    if lam <= 0.0:
        return 1.0
    acc = 0.0
    for k in range(1, 1000):
        term = math.exp(-2.0 * k * k * lam * lam)
        acc += term if k % 2 else -term
        if term < 1e-12:
            break
    return min(1.0, max(0.0, 2.0 * acc))


def ks_test(a, b) -> KsResult:
    """KS statistic plus p-values; the exact p only when sizes match."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = ks_statistic(a, b)
    p_exact = ks_p_exact_equal_n(d, a.size) if a.size == b.size else None
    return KsResult(d, p_exact, ks_p_asymptotic(d, a.size, b.size), a.size, b.size)


def cdf_export(samples, label: str = ""):
    """Sorted (value, cumulative probability) pairs with ties collapsed."""
    samples = np.sort(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise ValueError("cdf_export requires a non-empty sample")
    values, counts = np.unique(samples, return_counts=True)
    cum = np.cumsum(counts) / samples.size
    return list(zip(values.tolist(), cum.tolist()))


def _fmt_p(result: KsResult) -> str:
    if result.p_exact is None:
        return "p_exact=n/a p_asym=%.4f" % result.p_asymptotic
    return "p_exact=%.4f p_asym=%.4f" % (result.p_exact, result.p_asymptotic)


def write_validation_report(path, per_parameter: dict):
    """Write the structured validation report.

    per_parameter maps a parameter name (e.g. "ds_ns", "asa_deg") to a dict
    with keys: before (KsResult), after (KsResult), filter (FilterReport),
    rt_cdf, meas_cdf (cdf_export lists for the filtered data).
    """
    lines = []
    for name in sorted(per_parameter):
        entry = per_parameter[name]
        before, after = entry["before"], entry["after"]
        rep = entry["filter"]
        lines.append("[parameter %s]" % name)
        lines.append("ks_before d=%.6f %s n=%d m=%d"
                     % (before.d, _fmt_p(before), before.n, before.m))
        lines.append("ks_after d=%.6f %s n=%d m=%d"
                     % (after.d, _fmt_p(after), after.n, after.m))
        lines.append("p90_threshold %.6f" % rep.p90_threshold)
        for pair in rep.removed_by_ratio:
            lines.append("removed ratio %s rt=%.6f meas=%.6f"
                         % (pair.link_id, pair.rt_value, pair.meas_value))
        for pair in rep.removed_by_absolute:
            lines.append("removed absolute %s rt=%.6f meas=%.6f"
                         % (pair.link_id, pair.rt_value, pair.meas_value))
        for tag in ("rt_cdf", "meas_cdf"):
            lines.append("[cdf %s %s]" % (name, tag[:-4].rstrip("_")))
            for value, prob in entry[tag]:
                lines.append("%.10g,%.10g" % (value, prob))
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
