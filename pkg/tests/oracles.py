"""Independent Monte Carlo oracles for single backward and forward steps.

Both simulate the Euler scheme directly with numpy draws and share no code
with the Gaussian-moment engine beyond reading the converged surface.
"""
import math

import numpy as np

from srecmfg.model import derive_coefficients
from srecmfg.solver import backward_step, forward_step, initial_moments

N_PATHS = 1_000_000


def _mean_se(v):
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def backward_step_oracle(sol, k=0, x0=1.0, seed=7, n=N_PATHS):
    """E[F'(R - X_T) | X_{T-dt} = x0] by Euler Monte Carlo against the
    one-step backward value at the grid node x0 (class ``k``)."""
    cfg, grid = sol.config, sol.grid
    j = grid.m - 1
    u = int(np.argmin(np.abs(grid.x - x0)))
    assert abs(grid.x[u] - x0) < 1e-12
    got = float(backward_step(j, sol.surface.y[:, j + 1], sol.flow, sol.surface, grid, cfg)[k, u])

    p = cfg.classes[k]
    P, R, d = cfg.compliance.P, cfg.compliance.R[k], cfg.compliance.delta
    ups = 1 / p.gamma + 1 / p.zeta
    drift = p.h + ups * P * sol.surface.y[k, j, u] - sol.price[j] / p.gamma
    rng = np.random.default_rng(seed)
    xT = x0 + grid.dt * drift + p.sigma * math.sqrt(grid.dt) * rng.standard_normal(n)
    r = R - xT
    f = np.where(r > d, 1.0, np.where(r < -d, 0.0, (r + d) / (2 * d)))
    mc, se = _mean_se(f)
    return got, mc, se


def forward_step_oracle(sol, k=1, seed=8, n=N_PATHS):
    """Mean and variance after one step from t=0 (class ``k``) by Euler Monte
    Carlo, with the t=0 price also re-estimated from sampled inventories."""
    cfg, grid = sol.config, sol.grid
    m0, v0 = initial_moments(cfg)
    mean, var = forward_step(0, m0, v0, sol.surface, grid, cfg)

    rng = np.random.default_rng(seed)
    eta = [c.eta for c in derive_coefficients(cfg.classes)]
    s_mc = cfg.compliance.P * sum(
        e * np.interp(rng.normal(c.nu0, math.sqrt(c.m0), n), grid.x, sol.surface.y[i, 0]).mean()
        for i, (e, c) in enumerate(zip(eta, cfg.classes))
    )

    p = cfg.classes[k]
    ups = 1 / p.gamma + 1 / p.zeta
    x0 = rng.normal(p.nu0, math.sqrt(p.m0), n)
    yv = np.interp(x0, grid.x, sol.surface.y[k, 0])
    x1 = x0 + grid.dt * (p.h + ups * cfg.compliance.P * yv - sol.price[0] / p.gamma)
    x1 = x1 + p.sigma * math.sqrt(grid.dt) * rng.standard_normal(n)
    mc_mean, se_mean = _mean_se(x1)
    c = x1 - mc_mean
    mc_var = float(np.mean(c * c))
    se_var = float(math.sqrt((np.mean(c**4) - mc_var**2) / n))
    return {
        "s0_mc": float(s_mc),
        "mean": (float(mean[k]), mc_mean, se_mean),
        "var": (float(var[k]), mc_var, se_var),
    }
