"""Independent-pixel bi-spectral inversion of the toy forward model.

Each pixel is inverted on its own: the 0.66 um band fixes optical
thickness, the 2.13 / 0.66 ratio fixes effective radius. Pathological
pixels never raise; they are flagged in a status bitmask instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ForwardModelParams, transform_cot
from .errors import LutBuildError

OK = 0
CLEAR = 1
SATURATED = 2
RE_CLAMPED = 4

TAU_MAX = 100.0
X_MAX = 0.995
X_CLEAR = 1e-6  # absorbs float32 storage noise on clear-sky radiance
RATIO_EPS = 1e-6
RE_MIN = 5.0
RE_MAX = 30.0


def ipa_invert_pixel(r066, r213, p=ForwardModelParams(), re_min=RE_MIN, re_max=RE_MAX, tau_max=TAU_MAX):
    """Return (tau, re, status) for one pixel."""
    x = (r066 - p.albedo) / (1.0 - p.albedo)
    if x <= X_CLEAR:
        return 0.0, 0.0, CLEAR
    status = OK
    if x >= X_MAX:
        tau, status = tau_max, SATURATED
    else:
        tau = p.gamma * x / (1.0 - x)
        if tau > tau_max:
            tau, status = tau_max, SATURATED
    ratio = min(max(r213 / r066, RATIO_EPS), 1.0)
    re = float(-np.log(ratio) / p.beta)
    if re < re_min or re > re_max:
        re = min(max(re, re_min), re_max)
        status |= RE_CLAMPED
    return tau, re, status


def ipa_invert(r066, r213, p=ForwardModelParams(), re_min=RE_MIN, re_max=RE_MAX, tau_max=TAU_MAX):
    """Vectorized :func:`ipa_invert_pixel`; returns physical (tau, re, status) arrays."""
    r066 = np.asarray(r066, dtype=np.float64)
    r213 = np.asarray(r213, dtype=np.float64)
    x = (r066 - p.albedo) / (1.0 - p.albedo)
    clear = x <= X_CLEAR
    status = np.zeros(r066.shape, dtype=np.uint8)

    xs = np.clip(x, 0.0, X_MAX)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = p.gamma * xs / (1.0 - xs)
    sat = (x >= X_MAX) | (tau > tau_max)
    tau = np.where(sat, tau_max, tau)
    status[sat] |= SATURATED

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.clip(r213 / np.where(clear, 1.0, r066), RATIO_EPS, 1.0)
    re = -np.log(ratio) / p.beta
    out_of_range = (re < re_min) | (re > re_max)
    re = np.clip(re, re_min, re_max)
    status[out_of_range] |= RE_CLAMPED

    tau[clear] = 0.0
    re[clear] = 0.0
    status[clear] = CLEAR
    return tau, re, status


def ipa_retrieve_profile(radiance, p=ForwardModelParams(), **kw):
    """Per-pixel retrieval over a [2, H, W] radiance field.

    COT comes back as log(COT + 1) so it can be scored next to model
    output; CER is in micrometres.
    """
    radiance = np.asarray(radiance, dtype=np.float64)
    tau, re, status = ipa_invert(radiance[0], radiance[1], p, **kw)
    return transform_cot(tau), re, status


# -- lookup-table variant ------------------------------------------------

@dataclass
class Lut:
    tau_grid: np.ndarray
    re_grid: np.ndarray
    r066: np.ndarray
    ratio213: np.ndarray
    albedo: float


def build_lut(p=ForwardModelParams(), n_tau=200, n_re=100, tau_min=0.01, tau_max=TAU_MAX,
              re_min=RE_MIN, re_max=RE_MAX):
    """Tabulate the unperturbed forward model on a log-spaced tau grid and a linear re grid."""
    if n_tau < 3 or n_re < 2:
        raise LutBuildError(f"grid too small: n_tau={n_tau}, n_re={n_re}")
    tau_grid = np.concatenate([[0.0], np.geomspace(tau_min, tau_max, n_tau - 1)])
    re_grid = np.linspace(re_min, re_max, n_re)
    r066 = p.albedo + (1.0 - p.albedo) * tau_grid / (tau_grid + p.gamma)
    ratio = np.exp(-p.beta * re_grid)
    if np.any(np.diff(tau_grid) <= 0) or np.any(np.diff(r066) <= 0):
        raise LutBuildError("0.66 um reflectance is not strictly increasing on the tau grid")
    if np.any(np.diff(ratio) >= 0):
        raise LutBuildError("band ratio is not strictly decreasing on the re grid")
    return Lut(tau_grid, re_grid, r066, ratio, p.albedo)


def lut_invert(lut, r066, r213):
    """Piecewise-linear LUT inversion; returns (tau, re, status) arrays."""
    r066 = np.asarray(r066, dtype=np.float64)
    r213 = np.asarray(r213, dtype=np.float64)
    status = np.zeros(r066.shape, dtype=np.uint8)
    clear = r066 <= lut.r066[0] + X_CLEAR * (1.0 - lut.albedo)
    sat = r066 >= lut.r066[-1]
    tau = np.interp(r066, lut.r066, lut.tau_grid)
    status[sat] |= SATURATED

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = r213 / np.where(clear, 1.0, r066)
    lo, hi = lut.ratio213[-1], lut.ratio213[0]
    clamped = (ratio < lo) | (ratio > hi)
    re = np.interp(ratio, lut.ratio213[::-1], lut.re_grid[::-1])
    status[clamped] |= RE_CLAMPED

    tau[clear] = 0.0
    re[clear] = 0.0
    status[clear] = CLEAR
    return tau, re, status


def lut_invert_pixel(lut, r066, r213):
    tau, re, status = lut_invert(lut, np.array([r066]), np.array([r213]))
    return float(tau[0]), float(re[0]), int(status[0])
