"""Gaussian expectations of piecewise-linear functions.

The interpolant is continued as a constant outside the knot range, which
is also what ``np.interp`` does, so the closed form here and quadrature on
``np.interp`` describe the same function.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .errors import GridError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
ORDERS = ("f", "xf", "f2")
WINDOW_SIGMAS = 10.0


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def check_knots(knots):
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or knots.size < 2:
        raise GridError("knots must be a 1-d array with at least two entries")
    if not np.all(np.isfinite(knots)) or np.any(np.diff(knots) <= 0):
        raise GridError("knots must be finite and strictly increasing")
    return knots


def pwl_gaussian_moment(knots, vals, mean, var, order="f", *, checked=False):
    """Exact ``E[phi(X)]`` for ``X ~ Normal(mean, var)``.

    ``phi`` is ``f``, ``x*f`` or ``f**2`` for ``order`` ``"f"``, ``"xf"``,
    ``"f2"``, where ``f`` is the piecewise-linear interpolant of ``vals``
    on ``knots``. ``mean`` and ``var`` broadcast against each other; the
    result has their broadcast shape.
    """
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    if not checked:
        knots = check_knots(knots)
    vals = np.asarray(vals, dtype=float)
    if vals.shape != knots.shape:
        raise GridError(f"vals shape {vals.shape} does not match knots {knots.shape}")
    mean, var = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(var, dtype=float))
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    scalar = mean.ndim == 0
    mean = np.atleast_1d(mean).astype(float)
    var = np.atleast_1d(var).astype(float)
    out = np.empty(mean.shape)

    degenerate = var == 0
    if np.any(degenerate):
        f = np.interp(mean[degenerate], knots, vals)
        out[degenerate] = {"f": f, "xf": mean[degenerate] * f, "f2": f * f}[order]
    live = ~degenerate
    if np.any(live):
        out[live] = _windowed_moments(knots, vals, mean[live], np.sqrt(var[live]), order)
    return float(out[0]) if scalar else out


def _windowed_moments(knots, vals, m, s, order):
    # Gaussian mass beyond WINDOW_SIGMAS standard deviations is below 1e-23,
    # so knots farther out than that cannot change a double-precision result.
    d = knots.size
    half = int(np.ceil(WINDOW_SIGMAS * s.max() / np.diff(knots).min())) + 1
    width = 2 * half + 1
    if m.size < 2 or width >= d // 2:
        return _segment_moments(knots, vals, m, s, order)
    centre = np.searchsorted(knots, m)
    start = np.clip(centre - half, 0, d - width)
    idx = start[:, None] + np.arange(width)[None, :]
    return _segment_moments(knots[idx], vals[idx], m, s, order)


def _segment_moments(knots, vals, m, s, order):
    """Sum of per-segment Gaussian integrals; ``knots``/``vals`` are either
    shared 1-d arrays or one row per mean."""
    knots = np.atleast_2d(knots)
    vals = np.atleast_2d(vals)
    m = m[:, None]
    s = s[:, None]
    z = (knots - m) / s
    Phi = ndtr(z)
    Phic = ndtr(-z)
    phi = _pdf(z)

    slope = np.diff(vals, axis=1) / np.diff(knots, axis=1)
    # on segment u write f = c0 + slope*s*Z with X = m + s*Z
    c0 = vals[:, :-1] + slope * (m - knots[:, :-1])
    bs = slope * s
    # P(z_u < Z < z_{u+1}) without cancellation in either tail
    I0 = np.where(z[:, 1:] <= 0, Phi[:, 1:] - Phi[:, :-1], Phic[:, :-1] - Phic[:, 1:])
    I1 = phi[:, :-1] - phi[:, 1:]
    I2 = I0 + z[:, :-1] * phi[:, :-1] - z[:, 1:] * phi[:, 1:]

    lo_p, hi_p = Phi[:, 0], Phic[:, -1]
    lo_v, hi_v = vals[:, 0], vals[:, -1]
    mm, ss = m[:, 0], s[:, 0]
    if order == "f":
        body = c0 * I0 + bs * I1
        tails = lo_v * lo_p + hi_v * hi_p
    elif order == "xf":
        body = m * c0 * I0 + (m * bs + s * c0) * I1 + bs * s * I2
        tails = lo_v * (mm * lo_p - ss * phi[:, 0]) + hi_v * (mm * hi_p + ss * phi[:, -1])
    else:
        body = c0 * c0 * I0 + 2.0 * c0 * bs * I1 + bs * bs * I2
        tails = lo_v**2 * lo_p + hi_v**2 * hi_p
    return body.sum(axis=1) + tails


@lru_cache(maxsize=None)
def hermite_nodes(q: int):
    """Probabilists' Gauss-Hermite nodes and weights normalised to sum 1."""
    z, w = np.polynomial.hermite_e.hermegauss(int(q))
    w = w / w.sum()
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def gh_expectation(fn, mean, var, q):
    """``E[fn(X)]`` for ``X ~ Normal(mean, var)`` by q-node Gauss-Hermite."""
    z, w = hermite_nodes(q)
    return float(np.dot(w, fn(mean + np.sqrt(var) * z)))
