"""Figure rendering for the command-line reports.

Every figure is written to a file with a non-interactive backend so runs
are reproducible on headless machines; no timestamps or version strings
are embedded, keeping reruns byte-identical.
"""

import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

log = logging.getLogger(__name__)

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    log.debug("wrote figure %s", path)


def pdp_figure(profile, path, title=""):
    """Power delay profile as a dBm-vs-delay stem plot."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    mask = profile.power_mw > 0.0
    delays = profile.bin_centers_ns[mask]
    powers = 10.0 * np.log10(profile.power_mw[mask])
    if delays.size:
        ax.stem(delays, powers, basefmt=" ")
        ax.set_ylim(powers.min() - 5.0, powers.max() + 5.0)
    ax.set_xlabel("delay [ns]")
    ax.set_ylabel("power [dBm]")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    _finish(fig, path)


def cdf_figure(rt_cdf, meas_cdf, parameter, path):
    """Empirical CDF overlay: simulation as a line, measurement as markers."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    if rt_cdf:
        xs, ys = zip(*rt_cdf)
        ax.step(xs, ys, where="post", label="simulated")
    if meas_cdf:
        xs, ys = zip(*meas_cdf)
        ax.plot(xs, ys, "o", mfc="none", label="measured")
    ax.set_xlabel(parameter)
    ax.set_ylabel("CDF")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    _finish(fig, path)


def ci_fit_figure(distances_m, pl_db, fit, frequency_ghz, path):
    """Path loss vs distance scatter with the fitted one-slope line."""
    distances_m = np.asarray(distances_m, dtype=float)
    pl_db = np.asarray(pl_db, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.semilogx(distances_m, pl_db, "o", mfc="none", label="points")
    if distances_m.size:
        dd = np.geomspace(max(distances_m.min(), 1.0), distances_m.max(), 50)
        model = fit.fspl_ref_db + 10.0 * fit.n * np.log10(dd)
        ax.semilogx(dd, model, "-",
                    label="n=%.2f, sigma=%.2f dB" % (fit.n, fit.sigma_db))
    ax.set_xlabel("distance [m]")
    ax.set_ylabel("path loss [dB]")
    ax.set_title("%.2f GHz" % frequency_ghz)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    _finish(fig, path)


def loss_trace_figure(loss_trace, path):
    """Calibration loss components per accepted iteration."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    it = np.arange(len(loss_trace))
    ax.plot(it, [lb.total for lb in loss_trace], "o-", label="total")
    ax.plot(it, [lb.l_peak for lb in loss_trace], "--", label="peaks")
    ax.plot(it, [lb.l_shape for lb in loss_trace], "--", label="shape")
    ax.plot(it, [lb.l_unmatched for lb in loss_trace], ":", label="unmatched")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _finish(fig, path)
