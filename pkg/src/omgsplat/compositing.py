"""Per-fragment alpha in the two opacity models and front-to-back blending.

Baseline alpha is ``o * G``; the Beer-Lambert ("OMG") alpha treats ``o * G``
as a number density and the network output as a cross section over a unit
path length, giving ``1 - exp(-o * G * sigma)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

ALPHA_MAX = 0.99
# Fragments below this alpha are dropped, and blending stops once the
# transmittance falls below T_MIN. Both are kept far below the usual 1/255 and
# 1e-4 so the fast path stays within 1e-6 of the exhaustive reference.
ALPHA_SKIP = 1e-9
T_MIN = 1e-8


class OpacityMode(str, enum.Enum):
    BASELINE = "baseline"
    OMG = "omg"


class OpacityActivation(str, enum.Enum):
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"


def activate_opacity(raw, activation=OpacityActivation.SIGMOID):
    """raw opacity -> (o, do/draw)."""
    raw = np.asarray(raw, dtype=np.float64)
    activation = OpacityActivation(activation)
    e = np.exp(-np.abs(raw))
    if activation is OpacityActivation.SIGMOID:
        o = np.where(raw >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return o, o * (1.0 - o)
    o = np.maximum(raw, 0.0) + np.log1p(e)
    do = np.where(raw >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return o, do


def alpha_baseline(o, G):
    return np.minimum(np.multiply(o, G), ALPHA_MAX)


def alpha_omg(o, G, sigma):
    return np.minimum(omg_alpha_unclamped(o, G, sigma), ALPHA_MAX)


def omg_alpha_unclamped(o, G, sigma):
    return nerf_alpha(np.multiply(np.multiply(o, G), sigma), 1.0)


def nerf_alpha(sigma_density, delta):
    """Volume-rendering alpha ``1 - exp(-sigma * delta)``."""
    return -np.expm1(-np.multiply(sigma_density, delta))


def taylor_gap(t):
    """``t - (1 - exp(-t))``: the error of the first-order alpha approximation.

    Evaluated as ``t^2/2 * h(t)`` with a nested series for ``t < 1`` so that the
    bound ``0 <= gap <= t^2/2`` also holds in floating point.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise InvalidInputError("taylor_gap needs t >= 0")
    small = t < 1.0
    ts = np.where(small, t, 0.0)
    h = np.ones_like(ts)
    for k in range(24, 2, -1):
        h = 1.0 - ts / k * h
    series = ts * ts / 2 * h
    direct = t + np.expm1(-t)
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


@dataclass
class PixelComposite:
    color: np.ndarray
    transmittance: float
    count: int


def composite_pixel(fragments, background, depths=None, *, t_min: float = T_MIN,
                    alpha_skip: float = ALPHA_SKIP) -> PixelComposite:
    """Front-to-back blend of ``(alpha, color)`` pairs sorted near to far.

    Colors may be any length as long as ``background`` matches.

    Pass ``t_min=0, alpha_skip=0`` for the plain sum with no early exit.
    """
    if depths is not None:
        d = np.asarray(depths, dtype=np.float64)
        if len(d) != len(fragments):
            raise InvalidInputError("depths and fragments differ in length")
        if np.any(np.diff(d) < 0):
            raise InvalidInputError("fragments are not sorted by depth")
    background = np.asarray(background, dtype=np.float64)
    color = np.zeros_like(background)
    T = 1.0
    count = 0
    for alpha, c in fragments:
        if T < t_min:
            break
        if alpha < alpha_skip:
            continue
        if not 0.0 <= alpha <= ALPHA_MAX:
            raise InvalidInputError(f"alpha {alpha} outside [0, {ALPHA_MAX}]")
        color = color + np.asarray(c, dtype=np.float64) * (alpha * T)
        T = T * (1.0 - alpha)
        count += 1
    color = color + T * background
    return PixelComposite(color, T, count)
