"""Electromagnetic surface interaction coefficients.

All coefficients use the engineering time convention ``exp(+j w t)`` with
propagation phase ``exp(-j k d)``; lossy media therefore have complex
relative permittivity ``eta = eps' - j sigma / (2 pi f eps0)`` with a
negative imaginary part, and decaying waves follow from the principal
square root.

Sign conventions
----------------
``fresnel`` returns the parallel (TM) coefficient in the convention where
TE and TM agree at normal incidence (both ``(1 - sqrt(eta))/(1 + sqrt(eta))``).
Code that tracks the parallel field vector with a fixed-handedness ray basis
(``e_par = e_perp x k_hat`` on both sides of the bounce) must negate ``tm``;
the tracer and the wedge-face terms below do exactly that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .scene import DiffractionEdge

# Vacuum constants
C_LIGHT = 299792458.0  # m/s
EPS0 = 8.8541878128e-12  # F/m

# Power-law material coefficients are fitted for this band.
_F_MIN, _F_MAX = 1e9, 100e9


@dataclass(frozen=True)
class PolarimetricCoefficient:
    """TE (perpendicular) and TM (parallel) complex amplitude coefficients."""

    te: complex
    tm: complex


@dataclass(frozen=True)
class WedgeCoefficient:
    """Soft (field along the edge plane) and hard complex diffraction coefficients."""

    soft: complex
    hard: complex


@dataclass(frozen=True)
class ComplexPermittivity:
    """Relative permittivity and conductivity of a material at one frequency."""

    eps_real: float
    conductivity_s_m: float
    frequency_hz: float

    @property
    def eta(self) -> complex:
        """Complex relative permittivity eps' - j sigma / (2 pi f eps0)."""
        return complex(
            self.eps_real,
            -self.conductivity_s_m / (2.0 * math.pi * self.frequency_hz * EPS0),
        )


def permittivity(material, f_hz: float) -> ComplexPermittivity:
    """Material permittivity at frequency ``f_hz``.

    Uses the power-law model eps' = a * f_GHz**b, sigma = c * f_GHz**d.
    """
    if not (_F_MIN <= f_hz <= _F_MAX):
        raise ValueError(f"frequency {f_hz/1e9:.3f} GHz outside material model validity (1-100 GHz)")
    f_ghz = f_hz / 1e9
    eps_r = material.a * f_ghz**material.b
    sigma = material.c * f_ghz**material.d
    if eps_r < 1.0 or sigma < 0.0:
        raise ValueError(f"material {material.name!r} is unphysical at {f_ghz:g} GHz")
    return ComplexPermittivity(eps_real=eps_r, conductivity_s_m=sigma, frequency_hz=f_hz)


def fresnel(eta: complex, theta_i: float) -> PolarimetricCoefficient:
    """Reflection coefficients at a half-space boundary.

    ``theta_i`` is the incidence angle from the surface normal, in
    [0, pi/2]. At normal incidence both components equal
    (1 - sqrt(eta)) / (1 + sqrt(eta)); toward grazing both magnitudes
    approach 1, and TM passes through a null at the Brewster angle for
    lossless media.
    """
    if not 0.0 <= theta_i <= math.pi / 2 + 1e-12:
        raise ValueError(f"incidence angle {theta_i} outside [0, pi/2]")
    sin_t = math.sin(theta_i)
    cos_t = math.cos(theta_i)
    q = np.sqrt(complex(eta) - sin_t**2)
    te = (cos_t - q) / (cos_t + q)
    tm = (q - eta * cos_t) / (q + eta * cos_t)
    return PolarimetricCoefficient(te=complex(te), tm=complex(tm))


def penetration(eta: complex, theta_i: float, thickness_m: float, f_hz: float) -> PolarimetricCoefficient:
    """Through-transmission coefficient of a homogeneous slab.

    Models the two interface crossings and the propagation phase/attenuation
    along the slab, without internal multiple reflections. For a lossless
    slab with eta = 1 the result has unit magnitude and carries exactly the
    free-space propagation phase through the thickness.
    """
    if thickness_m < 0:
        raise ValueError("slab thickness must be non-negative")
    sin_t = math.sin(theta_i)
    cos_t = math.cos(theta_i)
    q = np.sqrt(complex(eta) - sin_t**2)
    k0 = 2.0 * math.pi * f_hz / C_LIGHT
    phase = np.exp(-1j * k0 * q * thickness_m)
    te = 4.0 * q * cos_t / (q + cos_t) ** 2
    tm = 4.0 * q * cos_t * eta / (eta * cos_t + q) ** 2
    return PolarimetricCoefficient(te=complex(te * phase), tm=complex(tm * phase))


def is_smooth(h_rms_m: float, wavelength_m: float, theta_i: float) -> bool:
    """Rayleigh criterion: surface acts specular when h_rms <= lambda/(8 cos theta_i)."""
    if h_rms_m < 0:
        raise ValueError("RMS roughness height must be non-negative")
    cos_t = math.cos(theta_i)
    if cos_t <= 0:
        return True  # grazing: threshold diverges
    return h_rms_m <= wavelength_m / (8.0 * cos_t)


def transition_function(x) -> complex:
    """Fresnel transition function F(x) = 2j sqrt(x) e^{jx} int_sqrt(x)^inf e^{-j u^2} du.

    Evaluated through the complex complementary error function; F(0) = 0,
    F(x) -> 1 as x -> inf, |F| <= 1 with phase in [0, pi/4].
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(x)
    out = (1 + 1j) * math.sqrt(math.pi / 2.0) * s * np.exp(1j * x) * erfc((1 + 1j) * s / math.sqrt(2.0))
    return complex(out) if out.ndim == 0 else out


def _cot_transition_term(a_angle: float, n: float, k_l: float) -> complex:
    """One cotangent * transition-function term of the wedge coefficient.

    ``a_angle`` is the cotangent argument (pi +/- beta)/(2n). Near a
    singularity (shadow or reflection boundary) the product has a finite
    directional limit which replaces the raw (inf * 0) evaluation.
    """
    m = round(a_angle / math.pi)
    delta = a_angle - m * math.pi
    if abs(delta) < 1e-7:
        eps = 2.0 * n * delta
        root = math.sqrt(2.0 * math.pi * k_l)
        e4 = np.exp(1j * math.pi / 4.0)
        return n * e4 * (root * np.sign(eps) - 2.0 * k_l * eps * e4)
    return 1.0 / math.tan(a_angle) * transition_function(k_l * _a_param(a_angle, n))


def _a_param(a_angle: float, n: float) -> float:
    """Angular distance parameter a(beta) feeding the transition function.

    With a_angle = (pi + s*beta)/(2n), the branch integer N that brings
    2 n pi N - s*beta closest to pi is the multiple of pi nearest the
    cotangent argument; both sign branches reduce to this single form.
    """
    s_beta = a_angle * 2.0 * n - math.pi
    m = round((s_beta + math.pi) / (2.0 * n * math.pi))
    return 2.0 * math.cos((2.0 * n * math.pi * m - s_beta) / 2.0) ** 2


def utd_coefficient(
    edge: DiffractionEdge,
    source_dir: np.ndarray,
    obs_dir: np.ndarray,
    s_prime: float,
    s: float,
    k: float,
    eta0: complex,
    eta1: complex,
) -> WedgeCoefficient:
    """Wedge diffraction coefficients with lossy-face reflection weighting.

    ``source_dir`` is the unit propagation direction from the source to the
    diffraction point; ``obs_dir`` the unit direction from the point to the
    observer; ``s_prime`` and ``s`` the corresponding distances. The result
    is the four-term wedge coefficient, the two face terms weighted by the
    face reflection coefficients (o-face ``eta0``, n-face ``eta1``),
    multiplied by the spherical-wave spreading factor
    sqrt(s' / (s (s + s'))).

    The incident and diffracted rays must satisfy the cone condition
    (equal angles with the edge) within 1e-3 rad.
    """
    src = np.asarray(source_dir, float)
    obs = np.asarray(obs_dir, float)
    e_hat = edge.e_hat
    cos_b_in = float(np.clip(np.dot(src, e_hat), -1.0, 1.0))
    cos_b_out = float(np.clip(np.dot(obs, e_hat), -1.0, 1.0))
    beta_in = math.acos(cos_b_in)
    beta_out = math.acos(cos_b_out)
    if abs(beta_in - beta_out) > 1e-3:
        raise ValueError(f"rays off the Keller cone: {beta_in:.6f} vs {beta_out:.6f} rad")
    sin_b0 = math.sin(beta_in)
    if sin_b0 < 1e-6:
        raise ValueError("propagation along the edge is degenerate")

    def plane_angle(u: np.ndarray) -> float:
        proj = u - np.dot(u, e_hat) * e_hat
        norm = np.linalg.norm(proj)
        if norm < 1e-12:
            raise ValueError("direction parallel to the edge")
        proj = proj / norm
        ang = math.atan2(float(np.dot(proj, edge.n0_hat)), float(np.dot(proj, edge.t0_hat)))
        return ang % (2.0 * math.pi)

    n = edge.n_param
    phi_p = plane_angle(-src)
    phi = plane_angle(obs)
    if phi_p > n * math.pi + 1e-6 or phi > n * math.pi + 1e-6:
        raise ValueError("source or observer lies inside the wedge")

    k_l = k * s * s_prime / (s + s_prime) * sin_b0**2
    beta_minus = phi - phi_p
    beta_plus = phi + phi_p

    t1 = _cot_transition_term((math.pi + beta_minus) / (2.0 * n), n, k_l)
    t2 = _cot_transition_term((math.pi - beta_minus) / (2.0 * n), n, k_l)
    t3 = _cot_transition_term((math.pi + beta_plus) / (2.0 * n), n, k_l)
    t4 = _cot_transition_term((math.pi - beta_plus) / (2.0 * n), n, k_l)

    # Face reflection coefficients. Each face sees the average of the
    # incident- and diffracted-ray angles: symmetric in source/observer
    # (exact reciprocity) and equal to the specular angle on the face's
    # reflection boundary, where the term must cancel the vanishing
    # geometric-optics ray. The hard coefficient needs the fixed-basis
    # TM sign.
    def face_angle(n_hat: np.ndarray) -> float:
        a_in = math.acos(min(1.0, abs(float(np.dot(src, n_hat)))))
        a_out = math.acos(min(1.0, abs(float(np.dot(obs, n_hat)))))
        return 0.5 * (a_in + a_out)

    r0 = fresnel(eta0, face_angle(edge.n0_hat))
    rn = fresnel(eta1, face_angle(edge.n1_hat))

    prefactor = -np.exp(-1j * math.pi / 4.0) / (2.0 * n * math.sqrt(2.0 * math.pi * k) * sin_b0)
    spread = math.sqrt(s_prime / (s * (s + s_prime)))
    d_soft = prefactor * (t1 + t2 + rn.te * t3 + r0.te * t4) * spread
    d_hard = prefactor * (t1 + t2 + (-rn.tm) * t3 + (-r0.tm) * t4) * spread
    return WedgeCoefficient(soft=complex(d_soft), hard=complex(d_hard))
