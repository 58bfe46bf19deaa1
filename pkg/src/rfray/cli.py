"""Command-line driver: tracing, calibration, statistics, and validation.

A run is fully described by a YAML config (scene, frequency, link list)
plus flag overrides; re-running any subcommand with the same inputs
produces byte-identical outputs. Links are traced in parallel up to
--workers; per-link files are written atomically and the point-data
summary last, after every link has finished.

Exit codes: 0 success, 2 input error, 3 infeasible/outage, 4 internal
invariant violation.
"""

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import calib, channel, report, validate
from .scene import Scene, SceneError, load_scene
from .tracer import Mechanisms, TraceConfig, trace

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_OUTAGE = 3
EXIT_INTERNAL = 4

STAT_COLUMNS = [c for c in channel.POINT_DATA_COLUMNS
                if c.endswith("_ns") or c.endswith("_deg")]


class CliInputError(Exception):
    """Bad configuration or unusable input files."""


@dataclass(frozen=True)
class Link:
    tx_id: str
    rx_id: str
    tx: np.ndarray
    rx: np.ndarray
    los: str | None = None


@dataclass
class RunConfig:
    frequency_hz: float
    scene_path: str | None = None
    tx_power_dbm: float = 0.0
    ray_count: int = 1_000_000
    max_depth: int = 5
    cutoff_dbm: float = -160.0
    mechanisms: Mechanisms = field(default_factory=Mechanisms)
    links: list = field(default_factory=list)
    geo_origin: calib.GeoOrigin | None = None
    out_dir: str = "out"

    def trace_config(self) -> TraceConfig:
        return TraceConfig(
            frequency_hz=self.frequency_hz,
            tx_power_dbm=self.tx_power_dbm,
            ray_count=self.ray_count,
            max_depth=self.max_depth,
            cutoff_dbm=self.cutoff_dbm,
            mechanisms=self.mechanisms,
        )


# ----------------------------------------------------------------------
# configuration


def _position(entry: dict, side: str, origin) -> np.ndarray:
    if side in entry:
        pos = np.asarray(entry[side], dtype=float)
        if pos.shape != (3,):
            raise CliInputError(f"{side} position must have 3 components")
        return pos
    gps_key = side + "_gps"
    if gps_key in entry:
        if origin is None:
            raise CliInputError(f"{gps_key} given but config has no geo_origin")
        lat, lon, z = (float(v) for v in entry[gps_key])
        xy = calib.gps_to_local(lat, lon, origin)
        return np.array([xy[0], xy[1], z])
    raise CliInputError(f"link is missing '{side}' or '{gps_key}'")


def load_config(path) -> RunConfig:
    """Parse the run config; every referenced file must exist."""
    path = Path(path)
    if not path.is_file():
        raise CliInputError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise CliInputError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliInputError(f"{path}: top level must be a mapping")
    if "frequency_ghz" not in raw:
        raise CliInputError(f"{path}: frequency_ghz is required")
    freq_hz = float(raw["frequency_ghz"]) * 1e9
    if freq_hz <= 0.0:
        raise CliInputError(f"{path}: frequency must be positive")

    origin = None
    if "geo_origin" in raw:
        g = raw["geo_origin"]
        origin = calib.GeoOrigin(float(g["lat"]), float(g["lon"]))

    mech_raw = raw.get("mechanisms", {})
    mech = Mechanisms(
        reflection=bool(mech_raw.get("reflection", True)),
        diffraction=bool(mech_raw.get("diffraction", True)),
        penetration=bool(mech_raw.get("penetration", False)),
    )

    links = []
    for entry in raw.get("links", []):
        links.append(Link(
            tx_id=str(entry.get("tx_id", f"TX{len(links)}")),
            rx_id=str(entry.get("rx_id", f"RX{len(links)}")),
            tx=_position(entry, "tx", origin),
            rx=_position(entry, "rx", origin),
            los=entry.get("los"),
        ))

    scene_path = raw.get("scene")
    if scene_path is not None:
        scene_path = str((path.parent / scene_path))
        if not Path(scene_path).is_file():
            raise CliInputError(f"scene file not found: {scene_path}")

    return RunConfig(
        frequency_hz=freq_hz,
        scene_path=scene_path,
        tx_power_dbm=float(raw.get("tx_power_dbm", 0.0)),
        ray_count=int(raw.get("rays", 1_000_000)),
        max_depth=int(raw.get("max_depth", 5)),
        cutoff_dbm=float(raw.get("cutoff_dbm", -160.0)),
        mechanisms=mech,
        links=links,
        geo_origin=origin,
        out_dir=str(raw.get("out_dir", "out")),
    )


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.scene is not None:
        if not Path(args.scene).is_file():
            raise CliInputError(f"scene file not found: {args.scene}")
        cfg.scene_path = args.scene
    if args.freq_ghz is not None:
        cfg.frequency_hz = args.freq_ghz * 1e9
    if getattr(args, "rays", None) is not None:
        cfg.ray_count = args.rays
    if getattr(args, "max_depth", None) is not None:
        cfg.max_depth = args.max_depth
    if getattr(args, "cutoff_dbm", None) is not None:
        cfg.cutoff_dbm = args.cutoff_dbm
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def _load_scene(cfg: RunConfig) -> Scene:
    if cfg.scene_path is None:
        return Scene(np.empty((0, 3, 3)), [], np.empty(0, dtype=int))
    try:
        return load_scene(cfg.scene_path)
    except (SceneError, yaml.YAMLError, OSError, KeyError) as exc:
        raise CliInputError(f"cannot load scene {cfg.scene_path}: {exc}") from exc


def _select_links(cfg: RunConfig, link_flag) -> list:
    if not cfg.links:
        raise CliInputError("config defines no links")
    if link_flag is None:
        return cfg.links
    picked = [l for l in cfg.links
              if f"{l.tx_id}_{l.rx_id}" == link_flag or l.rx_id == link_flag]
    if not picked:
        raise CliInputError(f"link '{link_flag}' not found in config")
    return picked


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# trace


PATH_COLUMNS = ("delay_ns,length_m,power_dbm,aod_az_deg,aod_zen_deg,"
                "aoa_az_deg,aoa_zen_deg,signature")


def _paths_csv(paths) -> str:
    lines = [PATH_COLUMNS]
    for p in paths:
        lines.append(",".join([
            repr(float(p.delay_ns)), repr(float(p.length_m)),
            repr(float(p.power_dbm)),
            repr(float(p.aod_az_deg)), repr(float(p.aod_zen_deg)),
            repr(float(p.aoa_az_deg)), repr(float(p.aoa_zen_deg)),
            p.signature,
        ]))
    return "\n".join(lines) + "\n"


def _cir_csv(cir) -> str:
    lines = ["delay_ns,amp_real,amp_imag"]
    for d, a in zip(cir.delays_ns, cir.amps):
        lines.append(f"{d!r},{a.real!r},{a.imag!r}")
    return "\n".join(lines) + "\n"


def _trace_link(scene, link: Link, cfg: RunConfig):
    tcfg = cfg.trace_config()
    paths = trace(scene, link.tx, link.rx, tcfg)
    sep = float(np.linalg.norm(np.asarray(link.rx) - np.asarray(link.tx)))
    record = channel.assemble_point_record(
        paths, cfg.frequency_hz, cfg.tx_power_dbm, link.tx_id, link.rx_id,
        sep, cfg.cutoff_dbm, los_type=link.los)
    cir = channel.synthesize_cir(paths, cfg.cutoff_dbm)
    profile = None
    if len(cir):
        profile = channel.pdp(cir, 1.0, cfg.frequency_hz, link.tx_id, link.rx_id)
    return paths, cir, profile, record


def cmd_trace(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    scene = _load_scene(cfg)
    links = _select_links(cfg, args.link)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(lambda l: _trace_link(scene, l, cfg), links))

    records = []
    for link, (paths, cir, profile, record) in zip(links, results):
        name = f"{link.tx_id}_{link.rx_id}"
        _atomic_write(out / f"{name}_paths.csv", _paths_csv(paths))
        _atomic_write(out / f"{name}_cir.csv", _cir_csv(cir))
        if profile is not None:
            channel.write_pdp(out / f"{name}_pdp.csv", profile)
            report.pdp_figure(profile, out / f"{name}_pdp.png", title=name)
        else:
            log.warning("link %s is in outage", name)
        records.append(record)
    channel.write_point_data(out / "point_data.csv", records)
    outages = sum(1 for r in records if r.outage)
    print(f"traced {len(records)} links ({outages} outage) -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------------
# calibrate


def _pdp_simulator(scene, tcfg: TraceConfig, bin_width_ns: float):
    def simulate(tx, rx):
        paths = trace(scene, tx, rx, tcfg)
        cir = channel.synthesize_cir(paths, tcfg.cutoff_dbm)
        return channel.pdp(cir, bin_width_ns)
    return simulate


def _peak_dbm(profile) -> float:
    return 10.0 * math.log10(float(profile.power_mw.max()))


def cmd_calibrate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    scene = _load_scene(cfg)
    link = _select_links(cfg, args.link)[0]
    if not Path(args.measured_pdp).is_file():
        raise CliInputError(f"measured PDP not found: {args.measured_pdp}")
    meas = channel.read_pdp(args.measured_pdp)

    ccfg = calib.CalibConfig()
    raw = yaml.safe_load(Path(args.config).read_text())
    for key, value in (raw.get("calib") or {}).items():
        if not hasattr(ccfg, key):
            raise CliInputError(f"unknown calib option '{key}'")
        current = getattr(ccfg, key)
        if isinstance(current, tuple):
            value = tuple(float(v) for v in value)
        elif isinstance(current, int):
            value = int(value)
        else:
            value = float(value)
        ccfg = replace(ccfg, **{key: value})

    result = calib.calibrate(scene, link.tx, link.rx, meas,
                             cfg.trace_config(), ccfg)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "calibration_report.txt"
    calib.write_calibration_report(report_path, link.tx, link.rx, result)

    # peak received power error against the measurement, before vs after
    simulate = _pdp_simulator(scene, cfg.trace_config(), meas.bin_width_ns)
    meas_peak = _peak_dbm(meas)
    before = abs(_peak_dbm(simulate(link.tx, link.rx)) - meas_peak)
    after = abs(_peak_dbm(simulate(result.tx_star, result.rx_star)) - meas_peak)
    with open(report_path, "a") as fh:
        fh.write(f"peak_power_improvement_db = {before - after:.4f}\n")

    report.loss_trace_figure(result.loss_trace, out / "loss_trace.png")
    reduction = 0.0
    if result.loss_trace and result.loss_trace[0].total > 0:
        reduction = 100.0 * (result.loss_trace[0].total
                             - result.loss_trace[-1].total) / result.loss_trace[0].total
    print(f"calibrated {link.tx_id}_{link.rx_id}: "
          f"loss reduction {reduction:.1f}%, report -> {report_path}")
    return EXIT_OK


# ----------------------------------------------------------------------
# stats


def _mean_excluding_zero(values) -> float:
    vals = [v for v in values if v > 0.0 and math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


def cmd_stats(args) -> int:
    if not Path(args.point_data).is_file():
        raise CliInputError(f"point data not found: {args.point_data}")
    rows = channel.read_point_data(args.point_data)
    rows = [r for r in rows
            if not r.outage and abs(r.frequency_ghz - args.freq_ghz) < 1e-6]
    if args.scenario is not None:
        rows = [r for r in rows if r.los_type == args.scenario]
    if not rows:
        raise CliInputError("no usable rows after filtering")

    lines = [f"[stats {args.freq_ghz:g} GHz]"]
    scenarios = [args.scenario] if args.scenario else ["LOS", "NLOS"]
    fit_for_figure = None
    for scen in scenarios:
        sel = [r for r in rows if r.los_type == scen]
        if not sel:
            continue
        pairs = [(r.tr_sep_m, r.omni_pl_db) for r in sel]
        if len(pairs) >= 2:
            fit = channel.fit_ci(pairs, args.freq_ghz)
        else:
            log.warning("%s has a single row; sigma is degenerate", scen)
            d, pl = pairs[0]
            x = 10.0 * math.log10(d)
            if x == 0.0:
                raise CliInputError("single row at the 1 m reference is unfittable")
            ref = channel.fspl_db(args.freq_ghz, 1.0)
            fit = channel.PathLossFit((pl - ref) / x, 0.0, ref, 1)
        fit_for_figure = fit_for_figure or (scen, fit, pairs)
        lines.append(f"{scen}: n={fit.n:.4f} sigma_db={fit.sigma_db:.4f} "
                     f"count={fit.count}")
        for col in STAT_COLUMNS:
            mean = _mean_excluding_zero(getattr(r, col) for r in sel)
            lines.append(f"{scen} mean_{col} = {mean:.4f}")

    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(lines) + "\n"
    _atomic_write(out / "stats.txt", text)
    print(text, end="")
    if fit_for_figure is not None:
        scen, fit, pairs = fit_for_figure
        report.ci_fit_figure([p[0] for p in pairs], [p[1] for p in pairs],
                             fit, args.freq_ghz, out / "ci_fit.png")
    return EXIT_OK


# ----------------------------------------------------------------------
# validate


def _paired(rt_rows, meas_rows, column, freq=None):
    def usable(rows):
        table = {}
        for r in rows:
            if r.outage or (freq is not None
                            and abs(r.frequency_ghz - freq) >= 1e-6):
                continue
            value = getattr(r, column)
            if math.isfinite(value) and value > 0.0:
                key = (f"{r.frequency_ghz:g}", r.tx_id, r.rx_id) if freq is None \
                    else (r.tx_id, r.rx_id)
                table[key] = value
        return table

    rt, meas = usable(rt_rows), usable(meas_rows)
    common = sorted(set(rt) & set(meas))
    return [validate.PairedSample(rt[k], meas[k], "_".join(k)) for k in common]


def _ks_section(pairs):
    rt_vals = [p.rt_value for p in pairs]
    meas_vals = [p.meas_value for p in pairs]
    before = validate.ks_test(rt_vals, meas_vals)
    rep = validate.combined_filter(pairs)
    if len(rep.kept) >= 1:
        after = validate.ks_test([p.rt_value for p in rep.kept],
                                 [p.meas_value for p in rep.kept])
    else:
        after = before
    return {
        "before": before,
        "after": after,
        "filter": rep,
        "rt_cdf": validate.cdf_export([p.rt_value for p in rep.kept] or rt_vals),
        "meas_cdf": validate.cdf_export([p.meas_value for p in rep.kept] or meas_vals),
    }


def cmd_validate(args) -> int:
    for p in (args.rt, args.meas):
        if not Path(p).is_file():
            raise CliInputError(f"point data not found: {p}")
    rt_rows = channel.read_point_data(args.rt)
    meas_rows = channel.read_point_data(args.meas)
    columns = [args.parameter] if args.parameter else STAT_COLUMNS
    for col in columns:
        if col not in STAT_COLUMNS:
            raise CliInputError(f"unknown parameter '{col}'")

    freqs = sorted({f"{r.frequency_ghz:g}" for r in rt_rows}
                   & {f"{r.frequency_ghz:g}" for r in meas_rows}, key=float)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)

    wrote = 0
    for mode, freq in [("pooled", None)] + [(f"f{f}", float(f)) for f in freqs]:
        sections = {}
        for col in columns:
            pairs = _paired(rt_rows, meas_rows, col, freq)
            if len(pairs) < 2:
                log.info("%s/%s: fewer than 2 pairs, skipped", mode, col)
                continue
            sections[col] = _ks_section(pairs)
        if not sections:
            continue
        validate.write_validation_report(out / f"validation_{mode}.txt", sections)
        wrote += 1
        if mode == "pooled":
            for col, entry in sections.items():
                report.cdf_figure(entry["rt_cdf"], entry["meas_cdf"], col,
                                  out / f"validate_{col}.png")
            for col, entry in sections.items():
                b, a = entry["before"], entry["after"]
                print(f"{col}: D {b.d:.4f} -> {a.d:.4f} "
                      f"(n {b.n} -> {a.n})")
    if wrote == 0:
        raise CliInputError("no common links with usable data")
    return EXIT_OK


# ----------------------------------------------------------------------
# average


def cmd_average(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    scene = _load_scene(cfg)
    link = _select_links(cfg, args.link)[0]
    tcfg = cfg.trace_config()

    paths, cir, profile, record = _trace_link(scene, link, cfg)
    averaged = channel.spatial_average_stats(scene, link.tx, link.rx, tcfg,
                                             workers=max(1, args.workers))
    averaged = replace(averaged, tx_id=link.tx_id, rx_id=link.rx_id + "_avg",
                       los_type=record.los_type)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{link.tx_id}_{link.rx_id}"
    if profile is not None:
        channel.write_pdp(out / f"{name}_pdp.csv", profile)
        report.pdp_figure(profile, out / f"{name}_pdp.png", title=name)
    channel.write_point_data(out / "average_point_data.csv", [record, averaged])
    print(f"averaged {name}: single PL "
          f"{record.omni_pl_db:.2f} dB, local-area PL {averaged.omni_pl_db:.2f} dB")
    return EXIT_OK


# ----------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfray", description="deterministic radio ray-tracing toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="run config YAML")
            p.add_argument("--scene", help="override scene path")
            p.add_argument("--freq-ghz", type=float, help="override frequency")
            p.add_argument("--rays", type=int, help="override ray count")
            p.add_argument("--max-depth", type=int, help="override bounce depth")
            p.add_argument("--cutoff-dbm", type=float, help="override path cutoff")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out-dir", help="output directory override")

    p = sub.add_parser("trace", help="trace all configured links")
    common(p)
    p.add_argument("--link", help="restrict to one link (txId_rxId or rxId)")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("calibrate", help="refine link endpoints against a measured PDP")
    common(p)
    p.add_argument("--link", required=True)
    p.add_argument("--measured-pdp", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stats", help="CI path-loss fit and spread means")
    p.add_argument("--point-data", required=True)
    p.add_argument("--freq-ghz", type=float, required=True)
    p.add_argument("--scenario", choices=["LOS", "NLOS"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="KS comparison of simulated vs measured stats")
    p.add_argument("--rt", required=True, help="simulated point data")
    p.add_argument("--meas", required=True, help="measured point data")
    p.add_argument("--parameter", help="single column to compare")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("average", help="25-point local-area average for one link")
    common(p)
    p.add_argument("--link", required=True)
    p.set_defaults(func=cmd_average)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliInputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (SceneError, ValueError, OSError, yaml.YAMLError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except calib.CalibrationInfeasibleError as exc:
        log.error("calibration infeasible: %s", exc)
        return EXIT_OUTAGE
    except channel.OutageError as exc:
        log.error("outage: %s", exc)
        return EXIT_OUTAGE
    except Exception:  # pragma: no cover - defensive
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
