"""Shared fixtures: scenes, published point data, synthetic calibration links."""

import math

import numpy as np
import pytest

from rfray import channel
from rfray.scene import Scene, load_scene

SPEED_M_PER_NS = 0.299792458

# Published omnidirectional path-loss points (distance m, PL dB) used by the
# statistics tests: one block per (frequency GHz, scenario).
PUBLISHED_POINTS = {
    (6.75, "LOS"): [
        (40, 77.05), (100, 85.29), (193, 91.29), (420, 99.29),
        (58, 82.25), (120, 88.91), (52, 80.53),
    ],
    (6.75, "NLOS"): [
        (561, 103.55), (880, 113.59), (51, 84.39), (101, 102.02),
        (71, 124.76), (45, 100.45), (125, 117.72), (89, 102.15),
        (184, 146.98), (167, 106.99), (141, 115.64),
    ],
    (16.95, "LOS"): [
        (40, 85.50), (100, 93.51), (193, 99.56), (420, 108.19),
        (58, 90.01), (120, 97.30), (52, 88.68),
    ],
    (16.95, "NLOS"): [
        (561, 115.53), (880, 124.40), (51, 94.66), (101, 110.05),
        (71, 136.67), (45, 108.47), (125, 130.89), (89, 110.68),
        (184, 142.97), (167, 114.58), (141, 124.80),
    ],
}


def empty_scene() -> Scene:
    return Scene(np.empty((0, 3, 3)), [], np.empty(0, dtype=int))


def wall_scene(material: str = "metal", half_width: float = 6.0,
               x0: float = -10.0, x1: float = 90.0, height: float = 10.0) -> Scene:
    """Two parallel vertical walls at y = +/- half_width (a street canyon)."""
    doc = {
        "quads": [
            {"material": material,
             "vertices": [[x0, half_width, 0], [x1, half_width, 0],
                          [x1, half_width, height], [x0, half_width, height]]},
            {"material": material,
             "vertices": [[x0, -half_width, 0], [x1, -half_width, 0],
                          [x1, -half_width, height], [x0, -half_width, height]]},
        ]
    }
    return load_scene(doc)


def screen_scene(material: str = "metal") -> Scene:
    """A single large vertical screen in the x=0 plane, spanning y in [0, 40]."""
    doc = {
        "quads": [
            {"material": material,
             "vertices": [[0, 0, -20], [0, 40, -20], [0, 40, 20], [0, 0, 20]]},
        ]
    }
    return load_scene(doc)


def right_angle_wedge_scene(material: str = "concrete", size: float = 30.0) -> Scene:
    """Two faces meeting at a right angle along the z-axis (exterior 270 deg).

    The solid occupies the quadrant x > 0, y < 0: one face in the y=0
    plane (outward normal +y), one in the x=0 plane (outward normal -x),
    sharing the edge along z. Winding is chosen so both normals face the
    exterior.
    """
    doc = {
        "quads": [
            {"material": material,
             "vertices": [[0, 0, -size], [0, 0, size],
                          [size, 0, size], [size, 0, -size]]},
            {"material": material,
             "vertices": [[0, 0, -size], [0, -size, -size],
                          [0, -size, size], [0, 0, size]]},
        ]
    }
    return load_scene(doc)


# ----------------------------------------------------------------------
# synthetic calibration link: a handful of single-bounce scatterers
# clustered around each endpoint, with staggered reflectivities so the
# delay pattern pins each endpoint without permutation ambiguity.

TX_TRUE = np.array([0.0, 0.0, 10.0])
RX_TRUE = np.array([120.0, 15.0, 1.5])
_REFLECTIVITY_LADDER = [0.5, 0.35, 0.25, 0.18, 0.12]


def scatterer_link(ensemble_seed: int = 28, n_near: int = 5):
    """Scatterer positions and reflectivities for the synthetic link."""
    r = np.random.default_rng(ensemble_seed)
    points, refl = [], []
    for anchor in (TX_TRUE, RX_TRUE):
        for k in range(n_near):
            ang = r.uniform(0.0, 2.0 * math.pi)
            rad = r.uniform(6.0, 18.0)
            points.append(anchor + np.array([rad * math.cos(ang),
                                             rad * math.sin(ang),
                                             r.uniform(-2.0, 2.0)]))
            refl.append(_REFLECTIVITY_LADDER[k % 5] * r.uniform(0.85, 1.15))
    return np.array(points), np.array(refl)


def pdp_simulator(points, reflectivities, pulse_sigma_ns: float = 2.0):
    """Band-limited direct-plus-single-bounce PDP model on 1 ns bins.

    Each scatterer contributes an inverse-square-scaled Gaussian pulse at
    its bistatic delay; the direct path likewise. Deterministic in the
    endpoints, so it doubles as a fast stand-in for the full tracer in
    calibration tests.
    """
    points = np.asarray(points, dtype=float)
    reflectivities = np.asarray(reflectivities, dtype=float)

    def simulate(tx, rx):
        tx = np.asarray(tx, dtype=float)
        rx = np.asarray(rx, dtype=float)
        d0 = np.linalg.norm(tx - rx)
        ds = (np.linalg.norm(points - tx, axis=1)
              + np.linalg.norm(points - rx, axis=1))
        delays = np.concatenate([[d0], ds]) / SPEED_M_PER_NS
        powers = np.concatenate([[1.0 / d0 ** 2],
                                 reflectivities ** 2 / ds ** 2])
        first = math.floor(delays.min()) - 10.0
        n_bins = int(delays.max() - first) + 20
        centers = first + np.arange(n_bins) + 0.5
        pulse = np.exp(-0.5 * ((centers[None, :] - delays[:, None])
                               / pulse_sigma_ns) ** 2)
        power = (powers[:, None] * pulse).sum(axis=0)
        keep = power > power.max() * 1e-6
        lo = int(np.argmax(keep))
        hi = len(keep) - int(np.argmax(keep[::-1]))
        return channel.PowerDelayProfile(1.0, first + lo, power[lo:hi])

    return simulate


@pytest.fixture
def synthetic_link():
    points, refl = scatterer_link()
    return TX_TRUE, RX_TRUE, pdp_simulator(points, refl)
