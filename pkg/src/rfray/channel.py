"""Channel post-processing: CIRs, PDPs, path loss, delay and angular spreads.

Path lists from the tracer turn into complex tap sequences, binned power
delay profiles, coherent omnidirectional path loss, close-in path-loss
fits, and the two angular-spread definitions (circular-phasor and
wrapped-second-moment). Also holds the delimited file formats for PDPs
and per-link point-data records.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import em

logger = logging.getLogger(__name__)

# Path loss reported for a fully cancelled or empty-but-present CIR.
PL_CLAMP_DB = 300.0


class OutageError(RuntimeError):
    """No received power: empty CIR or everything below threshold."""


@dataclass(frozen=True)
class Cir:
    """Complex channel impulse response: tap delays and amplitudes.

    Amplitudes are the dimensionless path field amplitudes (power gain
    ``|a|^2``); with a 0 dBm reference they read directly in sqrt-mW.
    """

    delays_ns: np.ndarray
    amps: np.ndarray
    cutoff_dbm: float = -160.0

    def __len__(self) -> int:
        return len(self.delays_ns)

    @property
    def powers_mw(self) -> np.ndarray:
        return np.abs(self.amps) ** 2


@dataclass(frozen=True)
class PowerDelayProfile:
    bin_width_ns: float
    first_bin_delay_ns: float
    power_mw: np.ndarray
    frequency_hz: float | None = None
    tx_id: str = ""
    rx_id: str = ""

    def __post_init__(self):
        if self.bin_width_ns <= 0:
            raise ValueError("bin width must be positive")

    @property
    def bin_starts_ns(self) -> np.ndarray:
        return self.first_bin_delay_ns + self.bin_width_ns * np.arange(len(self.power_mw))

    @property
    def bin_centers_ns(self) -> np.ndarray:
        return self.bin_starts_ns + 0.5 * self.bin_width_ns

    @property
    def total_power_mw(self) -> float:
        return float(self.power_mw.sum())


@dataclass(frozen=True)
class PathLossFit:
    n: float
    sigma_db: float
    fspl_ref_db: float
    count: int


@dataclass(frozen=True)
class PointDataRecord:
    """One link's channel statistics (the per-row schema of the point-data file)."""

    frequency_ghz: float
    tx_id: str
    rx_id: str
    los_type: str  # "LOS" | "NLOS"
    tr_sep_m: float
    omni_pl_db: float = math.nan
    omni_ds_ns: float = math.nan
    asa_3gpp_deg: float = math.nan
    asa_fleury_deg: float = math.nan
    asd_3gpp_deg: float = math.nan
    asd_fleury_deg: float = math.nan
    zsa_3gpp_deg: float = math.nan
    zsa_fleury_deg: float = math.nan
    zsd_3gpp_deg: float = math.nan
    zsd_fleury_deg: float = math.nan
    outage: bool = False


def synthesize_cir(paths, cutoff_dbm: float = -160.0) -> Cir:
    """Tap sequence from a traced path list, keeping paths at/above cutoff.

    Tap amplitudes are the paths' complex field amplitudes, unchanged.
    """
    kept = [p for p in paths if p.power_dbm >= cutoff_dbm]
    kept.sort(key=lambda p: p.delay_ns)
    return Cir(
        delays_ns=np.array([p.delay_ns for p in kept], float),
        amps=np.array([p.field_amp for p in kept], complex),
        cutoff_dbm=cutoff_dbm,
    )


def pdp(
    cir: Cir,
    bin_width_ns: float = 1.0,
    frequency_hz: float | None = None,
    tx_id: str = "",
    rx_id: str = "",
) -> PowerDelayProfile:
    """Bin tap powers (non-coherently) onto a regular delay grid.

    The grid is anchored at the earliest tap delay floored to a bin
    boundary, so the profile carries absolute delay.
    """
    if bin_width_ns <= 0:
        raise ValueError("bin width must be positive")
    if len(cir) == 0:
        return PowerDelayProfile(bin_width_ns, 0.0, np.zeros(0), frequency_hz, tx_id, rx_id)
    first = math.floor(cir.delays_ns.min() / bin_width_ns) * bin_width_ns
    idx = np.floor((cir.delays_ns - first) / bin_width_ns).astype(int)
    power = np.zeros(int(idx.max()) + 1)
    np.add.at(power, idx, cir.powers_mw)
    return PowerDelayProfile(bin_width_ns, first, power, frequency_hz, tx_id, rx_id)


def omni_path_loss(cir: Cir, tx_power_dbm: float) -> float:
    """Coherent omnidirectional path loss in dB.

    All taps sum as complex amplitudes; deep cancellation clamps at
    ``PL_CLAMP_DB``. An empty CIR is an outage, not a number.
    """
    if len(cir) == 0:
        raise OutageError("no taps: link is in outage")
    h = complex(np.sum(cir.amps))
    if abs(h) <= 0.0:
        return PL_CLAMP_DB
    rx_dbm = tx_power_dbm + 20.0 * math.log10(abs(h))
    return min(tx_power_dbm - rx_dbm, PL_CLAMP_DB)


def fspl_db(frequency_ghz: float, distance_m: float = 1.0) -> float:
    """Close-in free-space anchor: 32.4 + 20 log10(f_GHz) + 20 log10(d_m)."""
    return 32.4 + 20.0 * math.log10(frequency_ghz) + 20.0 * math.log10(distance_m)


def fit_ci(records, frequency_ghz: float) -> PathLossFit:
    """Least-squares close-in path-loss exponent fit.

    ``records`` holds (distance_m, path_loss_db) pairs. The model is
    PL = FSPL(f, 1 m) + 10 n log10(d) + X_sigma with a zero-mean residual,
    so n minimizes sum((y - n x)^2) with x = 10 log10(d) and sigma is the
    population RMS residual.
    """
    records = list(records)
    if len(records) < 2:
        raise ValueError("need at least 2 records to fit")
    d = np.array([r[0] for r in records], float)
    pl = np.array([r[1] for r in records], float)
    if np.any(d < 1.0):
        raise ValueError("distances below the 1 m reference are not fittable")
    ref = fspl_db(frequency_ghz, 1.0)
    x = 10.0 * np.log10(d)
    y = pl - ref
    n = float(np.sum(x * y) / np.sum(x * x))
    sigma = float(np.sqrt(np.mean((y - n * x) ** 2)))
    return PathLossFit(n=n, sigma_db=sigma, fspl_ref_db=ref, count=len(records))


def rms_delay_spread(profile: PowerDelayProfile, threshold_db: float = -25.0) -> float:
    """RMS delay spread (ns) of bins within ``threshold_db`` of the peak.

    Delays count as excess over the first retained bin; the spread is the
    power-weighted second central moment, invariant to uniform power
    scaling and delay shifts.
    """
    if len(profile.power_mw) == 0:
        raise OutageError("empty profile")
    peak = float(profile.power_mw.max())
    if peak <= 0.0:
        raise OutageError("profile has no power")
    keep = profile.power_mw >= peak * 10.0 ** (threshold_db / 10.0)
    keep &= profile.power_mw > 0.0
    p = profile.power_mw[keep]
    t = profile.bin_centers_ns[keep]
    t = t - t[0]
    mean = float(np.sum(p * t) / np.sum(p))
    second = float(np.sum(p * t * t) / np.sum(p))
    return math.sqrt(max(0.0, second - mean * mean))


def angular_spread_3gpp(components) -> float:
    """Circular angular spread: sqrt(-2 ln |sum P e^{j theta} / sum P|), degrees."""
    ang = np.array([c[0] for c in components], float)
    pw = np.array([c[1] for c in components], float)
    total = pw.sum()
    if total <= 0:
        raise ValueError("total power must be positive")
    phasor = np.sum(pw * np.exp(1j * np.radians(ang))) / total
    mag = min(1.0, abs(phasor))
    return math.degrees(math.sqrt(max(0.0, -2.0 * math.log(max(mag, 1e-300)))))


def angular_spread_fleury(components) -> float:
    """Wrapped second-central-moment angular spread, minimized over shifts.

    Sweeps the 1-degree shift grid, wraps deviations into (-180, 180],
    and returns the smallest power-weighted standard deviation.
    """
    ang = np.array([c[0] for c in components], float)
    pw = np.array([c[1] for c in components], float)
    total = pw.sum()
    if total <= 0:
        raise ValueError("total power must be positive")
    best = math.inf
    for shift in range(360):
        shifted = np.mod(ang - shift, 360.0)
        mean = float(np.sum(pw * shifted) / total)
        dev = shifted - mean
        dev = np.mod(dev + 180.0, 360.0) - 180.0
        dev[dev <= -180.0] += 360.0
        var = float(np.sum(pw * dev * dev) / total)
        if var < best:
            best = var
    return math.sqrt(best)


def assemble_point_record(
    paths,
    frequency_hz: float,
    tx_power_dbm: float,
    tx_id: str,
    rx_id: str,
    tr_sep_m: float,
    cutoff_dbm: float = -160.0,
    bin_width_ns: float = 1.0,
    los_type: str | None = None,
) -> PointDataRecord:
    """Pack one link's paths into a point-data row.

    Computes coherent PL, the binned delay spread, and all eight angular
    spreads. With no surviving paths the row is an outage record. When
    ``los_type`` is not forced, it is inferred from the presence of a
    line-of-sight path.
    """
    cir = synthesize_cir(paths, cutoff_dbm)
    if los_type is None:
        los_type = "LOS" if any(p.signature == "LOS" for p in paths) else "NLOS"
    base = PointDataRecord(
        frequency_ghz=frequency_hz / 1e9,
        tx_id=tx_id,
        rx_id=rx_id,
        los_type=los_type,
        tr_sep_m=tr_sep_m,
    )
    if len(cir) == 0:
        return replace(base, outage=True)
    pl = omni_path_loss(cir, tx_power_dbm)
    profile = pdp(cir, bin_width_ns, frequency_hz, tx_id, rx_id)
    ds = rms_delay_spread(profile)
    powers = np.abs(np.array([p.field_amp for p in paths], complex)) ** 2
    spreads = {}
    for prefix, attr in (
        ("asa", "aoa_az_deg"),
        ("asd", "aod_az_deg"),
        ("zsa", "aoa_zen_deg"),
        ("zsd", "aod_zen_deg"),
    ):
        comps = [(getattr(p, attr), pw) for p, pw in zip(paths, powers)]
        spreads[f"{prefix}_3gpp_deg"] = angular_spread_3gpp(comps)
        spreads[f"{prefix}_fleury_deg"] = angular_spread_fleury(comps)
    return replace(base, omni_pl_db=pl, omni_ds_ns=ds, **spreads)


def spatial_average_stats(scene, tx, rx, cfg, workers: int = 1) -> PointDataRecord:
    """Local-area record: the point itself plus 24 offsets (8 directions x 1..3 wavelengths).

    Path loss averages in linear power over the traced points; delay and
    angular spreads pool every point's paths into one weighted ensemble.
    Offset points that fail to trace are skipped with a diagnostic.
    """
    from .tracer import TraceError, trace  # local import to avoid a cycle

    rx = np.asarray(rx, float)
    lam = cfg.wavelength_m
    points = [rx]
    for k in range(8):
        az = math.radians(45.0 * k)
        for mult in (1.0, 2.0, 3.0):
            points.append(rx + mult * lam * np.array([math.cos(az), math.sin(az), 0.0]))

    def run(p):
        try:
            return trace(scene, tx, p, cfg)
        except TraceError as exc:
            logger.warning("spatial average: skipping offset %s (%s)", np.round(p, 3), exc)
            return None

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, points))
    else:
        results = [run(p) for p in points]

    traced = [r for r in results if r is not None]
    if len(traced) < len(points):
        logger.warning("spatial average: %d of %d points traced", len(traced), len(points))
    rx_mw = []
    pooled = []
    for paths in traced:
        cir = synthesize_cir(paths, cfg.cutoff_dbm)
        if len(cir) == 0:
            continue
        h = complex(np.sum(cir.amps))
        rx_mw.append(abs(h) ** 2 * 10.0 ** (cfg.tx_power_dbm / 10.0))
        pooled.extend(paths)

    tr_sep = float(np.linalg.norm(np.asarray(tx, float) - rx))
    center = results[0]
    los_type = (
        "LOS" if center and any(p.signature == "LOS" for p in center) else "NLOS"
    )
    base = PointDataRecord(
        frequency_ghz=cfg.frequency_hz / 1e9,
        tx_id="",
        rx_id="",
        los_type=los_type,
        tr_sep_m=tr_sep,
    )
    if not rx_mw:
        return replace(base, outage=True)
    pl = cfg.tx_power_dbm - 10.0 * math.log10(sum(rx_mw) / len(rx_mw))
    pl = min(pl, PL_CLAMP_DB)

    pooled_cir = synthesize_cir(pooled, cfg.cutoff_dbm)
    ds = rms_delay_spread(pdp(pooled_cir, frequency_hz=cfg.frequency_hz))
    powers = np.abs(np.array([p.field_amp for p in pooled], complex)) ** 2
    spreads = {}
    for prefix, attr in (
        ("asa", "aoa_az_deg"),
        ("asd", "aod_az_deg"),
        ("zsa", "aoa_zen_deg"),
        ("zsd", "aod_zen_deg"),
    ):
        comps = [(getattr(p, attr), pw) for p, pw in zip(pooled, powers)]
        spreads[f"{prefix}_3gpp_deg"] = angular_spread_3gpp(comps)
        spreads[f"{prefix}_fleury_deg"] = angular_spread_fleury(comps)
    return replace(base, omni_pl_db=pl, omni_ds_ns=ds, **spreads)


# ----------------------------------------------------------------------
# file formats

POINT_DATA_COLUMNS = [
    "freq_ghz",
    "tx",
    "rx",
    "loc_type",
    "tr_sep_m",
    "omni_pl_db",
    "omni_ds_ns",
    "asa_3gpp_deg",
    "asa_fleury_deg",
    "asd_3gpp_deg",
    "asd_fleury_deg",
    "zsa_3gpp_deg",
    "zsa_fleury_deg",
    "zsd_3gpp_deg",
    "zsd_fleury_deg",
]

_NUMERIC_FIELDS = POINT_DATA_COLUMNS[7:]
OUTAGE_SENTINEL = "OUT"


def _fmt(value: float) -> str:
    return repr(float(value))


def write_point_data(path, records) -> None:
    lines = [",".join(POINT_DATA_COLUMNS)]
    for r in records:
        if r.outage:
            stats = [OUTAGE_SENTINEL] * (2 + len(_NUMERIC_FIELDS))
        else:
            stats = [_fmt(r.omni_pl_db), _fmt(r.omni_ds_ns)] + [
                _fmt(getattr(r, name)) for name in _NUMERIC_FIELDS
            ]
        row = [
            _fmt(r.frequency_ghz),
            r.tx_id,
            r.rx_id,
            r.los_type,
            _fmt(r.tr_sep_m),
        ] + stats
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_point_data(path) -> list[PointDataRecord]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].split(",") != POINT_DATA_COLUMNS:
        raise ValueError(f"{path}: not a point-data file (bad header)")
    out = []
    for ln, line in enumerate(text[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(POINT_DATA_COLUMNS):
            raise ValueError(f"{path}:{ln}: expected {len(POINT_DATA_COLUMNS)} columns")
        outage = OUTAGE_SENTINEL in cells[5:]

        def num(cell):
            return math.nan if cell == OUTAGE_SENTINEL else float(cell)

        out.append(
            PointDataRecord(
                frequency_ghz=float(cells[0]),
                tx_id=cells[1],
                rx_id=cells[2],
                los_type=cells[3],
                tr_sep_m=float(cells[4]),
                omni_pl_db=num(cells[5]),
                omni_ds_ns=num(cells[6]),
                asa_3gpp_deg=num(cells[7]),
                asa_fleury_deg=num(cells[8]),
                asd_3gpp_deg=num(cells[9]),
                asd_fleury_deg=num(cells[10]),
                zsa_3gpp_deg=num(cells[11]),
                zsa_fleury_deg=num(cells[12]),
                zsd_3gpp_deg=num(cells[13]),
                zsd_fleury_deg=num(cells[14]),
                outage=outage,
            )
        )
    return out


def write_pdp(path, profile: PowerDelayProfile) -> None:
    """Delimited PDP: comment-header metadata then (delay_ns, power_dbm) rows.

    Zero-power bins are omitted; the grid is recoverable from the header.
    """
    lines = [
        f"# bin_width_ns={profile.bin_width_ns!r}",
        f"# first_bin_delay_ns={profile.first_bin_delay_ns!r}",
    ]
    if profile.frequency_hz is not None:
        lines.append(f"# frequency_hz={profile.frequency_hz!r}")
    if profile.tx_id:
        lines.append(f"# tx={profile.tx_id}")
    if profile.rx_id:
        lines.append(f"# rx={profile.rx_id}")
    lines.append("delay_ns,power_dbm")
    starts = profile.bin_starts_ns
    for i, p in enumerate(profile.power_mw):
        if p > 0.0:
            lines.append(f"{_fmt(starts[i])},{_fmt(10.0 * math.log10(p))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pdp(path) -> PowerDelayProfile:
    meta: dict[str, str] = {}
    rows = []
    header_seen = False
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        if not header_seen:
            if line.replace(" ", "") != "delay_ns,power_dbm":
                raise ValueError(f"{path}:{ln}: expected 'delay_ns,power_dbm' header")
            header_seen = True
            continue
        cells = line.split(",")
        if len(cells) != 2:
            raise ValueError(f"{path}:{ln}: expected two columns")
        rows.append((float(cells[0]), float(cells[1])))
    if not rows:
        raise ValueError(f"{path}: no PDP rows")
    width = float(meta.get("bin_width_ns", 1.0))
    first = float(meta.get("first_bin_delay_ns", math.floor(rows[0][0] / width) * width))
    n_bins = int(round((rows[-1][0] - first) / width)) + 1
    power = np.zeros(n_bins)
    for delay, dbm in rows:
        i = int(round((delay - first) / width))
        if not 0 <= i < n_bins:
            raise ValueError(f"{path}: delay {delay} off the bin grid")
        power[i] += 10.0 ** (dbm / 10.0)
    freq = float(meta["frequency_hz"]) if "frequency_hz" in meta else None
    return PowerDelayProfile(
        bin_width_ns=width,
        first_bin_delay_ns=first,
        power_mw=power,
        frequency_hz=freq,
        tx_id=meta.get("tx", ""),
        rx_id=meta.get("rx", ""),
    )
