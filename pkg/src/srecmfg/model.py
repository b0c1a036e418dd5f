"""Closed-form pieces of the market model.

All functions are pure and accept numpy arrays wherever a scalar makes
sense, so the solver and the simulators can call them on whole grids.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, InvariantError
from .params import ControlPair, DerivedCoefficients, MarketConfig

Y_TOL = 1e-9


def _check_finite(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    return arr


def _check_delta(delta):
    if not (np.isfinite(delta) and delta > 0):
        raise DomainError(f"delta must be finite and > 0 (got {delta})")


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def penalty(x, delta):
    """Smoothed shortfall penalty: zero below -delta, quadratic on the
    band |x| <= delta, identity above delta."""
    _check_delta(delta)
    xa = _check_finite(x)
    mid = (xa + delta) ** 2 / (4.0 * delta)
    res = np.where(xa < -delta, 0.0, np.where(xa > delta, xa, mid))
    return _out(res, x)


def penalty_prime(x, delta):
    """Derivative of :func:`penalty`; takes values in [0, 1]."""
    _check_delta(delta)
    xa = _check_finite(x)
    res = np.clip((xa + delta) / (2.0 * delta), 0.0, 1.0)
    return _out(res, x)


def derive_coefficients(pops) -> list:
    """Price weights eta, effective trading cost gamma_tilde and the
    combined response coefficient upsilon for each class."""
    pops = list(pops)
    if not pops:
        raise ConfigError("cannot derive coefficients for an empty population list")
    ratios = [p.pi / p.gamma for p in pops]
    total = math.fsum(ratios)
    return [
        DerivedCoefficients(
            eta=r / total,
            gamma_tilde=p.gamma * total,
            upsilon=1.0 / p.gamma + 1.0 / p.zeta,
        )
        for p, r in zip(pops, ratios)
    ]


def _class_h(cfg: MarketConfig, k: int, j=None):
    h = cfg.classes[k].h
    if np.ndim(h) == 0:
        return float(h)
    path = np.asarray(h, dtype=float)
    return path if j is None else path[j]


def optimal_controls(k, y, s, cfg: MarketConfig, j=None):
    """Optimal planned generation and trading rate for class ``k``.

    ``y`` is the adjoint (non-compliance probability) and ``s`` the price.
    Arrays broadcast; scalars return a :class:`ControlPair`. ``j`` selects
    the time step when ``h`` is time-varying.
    """
    p = cfg.classes[k]
    P = cfg.compliance.P
    ya = _check_finite(y, "y")
    if np.any(ya < -Y_TOL) or np.any(ya > 1 + Y_TOL):
        raise InvariantError("adjoint value outside [0, 1]")
    ya = np.clip(ya, 0.0, 1.0)
    g = _class_h(cfg, k, j) + (P / p.zeta) * ya
    Gamma = (P * ya - np.asarray(s, dtype=float)) / p.gamma
    if np.ndim(y) == 0 and np.ndim(s) == 0 and np.ndim(g) == 0:
        return ControlPair(float(g), float(Gamma))
    return g, Gamma


def running_cost(k, g, Gamma, s, cfg: MarketConfig, j=None):
    """Instantaneous cost rate: generation deviation, trading friction and
    the cash paid for purchases."""
    p = cfg.classes[k]
    g = _check_finite(g, "g")
    Gamma = _check_finite(Gamma, "Gamma")
    s = _check_finite(s, "s")
    dev = g - _class_h(cfg, k, j)
    res = 0.5 * p.zeta * dev**2 + 0.5 * p.gamma * Gamma**2 + s * Gamma
    return float(res) if res.ndim == 0 else res


def path_cost(k, g_path, Gamma_path, s_path, x_T, cfg: MarketConfig):
    """Realised cost of one control path.

    Left-endpoint Riemann sum of the running cost on the config time grid
    plus the smoothed terminal penalty. Paths have one entry per step
    (``n_steps``); a trailing axis may carry many paths at once.
    """
    m = cfg.n_steps
    dt = cfg.scheme.dt
    g = np.asarray(g_path, dtype=float)
    G = np.asarray(Gamma_path, dtype=float)
    s = np.asarray(s_path, dtype=float)
    if g.shape[0] != m or G.shape[0] != m:
        raise DimensionError(f"control paths need {m} steps, got {g.shape[0]} and {G.shape[0]}")
    if s.shape[0] not in (m, m + 1):
        raise DimensionError(f"price path needs {m} (or {m + 1}) nodes, got {s.shape[0]}")
    s = s[:m]
    while s.ndim < g.ndim:
        s = s[..., None]
    h = np.asarray(cfg.classes[k].h_path(m))
    while h.ndim < g.ndim:
        h = h[..., None]
    p = cfg.classes[k]
    rc = 0.5 * p.zeta * (g - h) ** 2 + 0.5 * p.gamma * G**2 + s * G
    R = cfg.compliance.R[k]
    terminal = cfg.compliance.P * penalty(R - np.asarray(x_T, dtype=float), cfg.compliance.delta)
    total = dt * rc.sum(axis=0) + terminal
    return float(total) if np.ndim(total) == 0 else total
