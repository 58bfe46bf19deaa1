import math

import numpy as np
import pytest
from scipy import stats as sps

from rfray import validate as V
from rfray.validate import (
    FilterReport,
    PairedSample,
    cdf_export,
    combined_filter,
    exclude_zeros,
    ks_p_asymptotic,
    ks_p_exact_equal_n,
    ks_statistic,
    ks_test,
    ratio,
)


def test_ratio():
    assert ratio(PairedSample(10.0, 10.0)) == pytest.approx(1.0, abs=1e-6)
    assert ratio(PairedSample(2.0, 12.0)) == pytest.approx(12.0 / 2.000001, abs=1e-12)


def test_exclude_zeros():
    pairs = [PairedSample(1.0, 2.0, "a"), PairedSample(0.0, 2.0, "b"),
             PairedSample(1.0, 0.0, "c"), PairedSample(-1.0, 1.0, "d")]
    kept = exclude_zeros(pairs)
    assert [p.link_id for p in kept] == ["a"]


def test_combined_filter_p90_interpolation():
    # differences 1..9 and 100: the 90th percentile interpolates to 18.1,
    # so only the 100-difference pair is removed
    pairs = [PairedSample(10.0, 10.0 + d, f"l{d}")
             for d in [1, 2, 3, 4, 5, 6, 7, 8, 9, 100]]
    rep = combined_filter(pairs)
    assert rep.p90_threshold == pytest.approx(18.1, abs=1e-9)
    assert [p.link_id for p in rep.removed_by_absolute] == ["l100"]
    assert rep.removed_by_ratio and rep.removed_by_ratio[0].link_id == "l100"
    assert len(rep.kept) == 9


def test_combined_filter_identical_pairs_keep_all():
    pairs = [PairedSample(5.0, 5.0, str(i)) for i in range(6)]
    rep = combined_filter(pairs)
    assert len(rep.kept) == 6
    assert not rep.removed_by_ratio
    assert not rep.removed_by_absolute


def test_combined_filter_ratio_gate():
    base = [PairedSample(5.0, 5.0, str(i)) for i in range(4)]
    rep = combined_filter(base + [PairedSample(1.0, 6.0, "high")])
    assert any(p.link_id == "high" for p in rep.removed_by_ratio)
    rep = combined_filter(base + [PairedSample(10.0, 1.0, "low")])
    assert any(p.link_id == "low" for p in rep.removed_by_ratio)


def test_combined_filter_needs_two_pairs():
    with pytest.raises(ValueError):
        combined_filter([PairedSample(1.0, 1.0)])


def test_combined_filter_brute_force_property():
    rng = np.random.default_rng(31)
    for _ in range(60):
        n = int(rng.integers(2, 25))
        pairs = [PairedSample(float(rng.uniform(0.5, 50)),
                              float(rng.uniform(0.5, 50)), str(i))
                 for i in range(n)]
        rep = combined_filter(pairs)
        diffs = sorted(abs(p.meas_value - p.rt_value) for p in pairs)
        rank = 0.9 * (n - 1)
        lo = int(math.floor(rank))
        frac = rank - lo
        p90 = diffs[lo] if lo + 1 >= n else diffs[lo] + frac * (diffs[lo + 1] - diffs[lo])
        assert rep.p90_threshold == pytest.approx(p90, rel=1e-12)
        removed = set()
        for p in pairs:
            r = p.meas_value / (p.rt_value + 1e-6)
            if r < 0.2 or r > 5.0 or abs(p.meas_value - p.rt_value) > p90:
                removed.add(p.link_id)
        got_removed = {p.link_id for p in rep.removed_by_ratio} | \
                      {p.link_id for p in rep.removed_by_absolute}
        assert got_removed == removed
        assert {p.link_id for p in rep.kept} == {p.link_id for p in pairs} - removed


def test_combined_filter_c2_idempotent():
    rng = np.random.default_rng(8)
    pairs = [PairedSample(float(rng.uniform(1, 20)),
                          float(rng.uniform(1, 20)), str(i)) for i in range(15)]
    kept = combined_filter(pairs).kept
    if len(kept) >= 2:
        again = combined_filter(kept)
        # no pair that survived the ratio gate can fail it on a re-run
        assert not again.removed_by_ratio


def test_ks_statistic_examples():
    assert ks_statistic([1, 2, 3], [1, 2, 3]) == 0.0
    assert ks_statistic([1, 2, 3], [10, 11]) == 1.0
    assert ks_statistic([1, 2, 3], [1.5, 2.5, 3.5]) == pytest.approx(1 / 3, abs=1e-12)


def test_ks_statistic_symmetry_and_scipy_agreement():
    rng = np.random.default_rng(6)
    for _ in range(100):
        a = rng.normal(size=int(rng.integers(2, 30)))
        b = rng.normal(loc=rng.uniform(-1, 1), size=int(rng.integers(2, 30)))
        d = ks_statistic(a, b)
        assert d == ks_statistic(b, a)
        assert d == pytest.approx(sps.ks_2samp(a, b, method="asymp").statistic, abs=1e-12)


def test_ks_statistic_empty_rejected():
    with pytest.raises(ValueError):
        ks_statistic([], [1.0])


@pytest.mark.parametrize("n,k,want", [
    (18, 8, 0.056018),
    (13, 5, 0.299920),
    (11, 3, 0.832588),
])
def test_ks_p_exact_reference(n, k, want):
    assert ks_p_exact_equal_n(k / n, n) == pytest.approx(want, abs=5e-6)


def test_ks_p_exact_limits():
    assert ks_p_exact_equal_n(0.0, 10) == 1.0
    assert ks_p_exact_equal_n(1.0, 10) == pytest.approx(2.0 / math.comb(20, 10), rel=1e-12)


@pytest.mark.filterwarnings("ignore:ks_2samp")
def test_ks_p_exact_matches_scipy():
    rng = np.random.default_rng(44)
    for n in (5, 11, 13, 18, 25):
        for _ in range(20):
            a = rng.normal(size=n)
            b = rng.normal(loc=rng.uniform(-1, 1), size=n)
            d = ks_statistic(a, b)
            want = sps.ks_2samp(a, b, method="exact").pvalue
            assert ks_p_exact_equal_n(d, n) == pytest.approx(want, abs=1e-9)


def test_ks_p_asymptotic():
    assert ks_p_asymptotic(0.0, 10, 10) == 1.0
    # monotone non-increasing in d, up to the series truncation error
    ps = [ks_p_asymptotic(d, 18, 18) for d in np.linspace(0.01, 0.9, 30)]
    assert all(b <= a + 1e-11 for a, b in zip(ps, ps[1:]))
    assert ks_p_asymptotic(8 / 18, 18, 18) == pytest.approx(0.0571, abs=5e-4)


def test_exact_asymptotic_agree_for_large_n():
    rng = np.random.default_rng(12)
    for n in (50, 64):
        a = rng.normal(size=n)
        b = rng.normal(loc=0.3, size=n)
        d = ks_statistic(a, b)
        assert ks_p_exact_equal_n(d, n) == pytest.approx(
            ks_p_asymptotic(d, n, n), abs=0.02)


def test_ks_test_unequal_sizes_fall_back():
    res = ks_test([1.0, 2.0, 3.0], [1.5, 2.5])
    assert res.p_exact is None
    assert 0.0 <= res.p_asymptotic <= 1.0
    assert res.n == 3 and res.m == 2


def test_cdf_export():
    assert cdf_export([5.0]) == [(5.0, 1.0)]
    assert cdf_export([1.0, 1.0, 2.0]) == [(1.0, pytest.approx(2 / 3)), (2.0, 1.0)]
    out = cdf_export(np.random.default_rng(1).normal(size=40))
    values = [v for v, _ in out]
    probs = [p for _, p in out]
    assert values == sorted(values)
    assert probs == sorted(probs)
    assert probs[-1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cdf_export([])


def test_validation_report_file(tmp_path):
    pairs = [PairedSample(float(i + 1), float(i + 1.2), f"l{i}") for i in range(6)]
    rep = combined_filter(pairs)
    entry = {
        "before": ks_test([p.rt_value for p in pairs], [p.meas_value for p in pairs]),
        "after": ks_test([p.rt_value for p in rep.kept], [p.meas_value for p in rep.kept]),
        "filter": rep,
        "rt_cdf": cdf_export([p.rt_value for p in rep.kept]),
        "meas_cdf": cdf_export([p.meas_value for p in rep.kept]),
    }
    path = tmp_path / "validation.txt"
    V.write_validation_report(path, {"ds_ns": entry})
    text = path.read_text()
    assert "[parameter ds_ns]" in text
    assert "ks_before" in text
    assert "p90_threshold" in text
