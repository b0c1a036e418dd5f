"""Grid solver for the mean-field equilibrium.

The adjoint surface Y(t, x) is computed backward in time by exact Gaussian
integration of its piecewise-linear interpolant; the population law of each
class is carried forward as a Gaussian (mean, variance) pair; the two are
iterated to a fixed point on the measure flow.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonConvergenceError, SolverError
from .gaussian import check_knots, hermite_nodes, pwl_gaussian_moment
from .model import derive_coefficients, optimal_controls, penalty_prime
from .params import MarketConfig

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-9
MONO_TOL = 1e-8
GRID_SIGMAS = 6.0


@dataclass(frozen=True)
class SchemeGrid:
    dt: float
    times: np.ndarray
    x: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def m(self) -> int:
        return self.times.size - 1


@dataclass
class GaussianFlow:
    """Per-class Gaussian law of inventories; arrays are (K, m+1)."""

    mean: np.ndarray
    var: np.ndarray

    def copy(self) -> "GaussianFlow":
        return GaussianFlow(self.mean.copy(), self.var.copy())


@dataclass
class ValueSurface:
    """Adjoint values ``y[k, j, u]`` at time node j and x-node u."""

    y: np.ndarray
    x: np.ndarray
    times: np.ndarray

    def at(self, k: int, j: int, xq):
        return np.interp(xq, self.x, self.y[k, j])


@dataclass
class EquilibriumSolution:
    config: MarketConfig
    grid: SchemeGrid
    surface: ValueSurface
    flow: GaussianFlow
    price: np.ndarray
    g: np.ndarray
    Gamma: np.ndarray
    residuals: list
    converged: bool = True
    tolerance: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0

    def compliance_probability(self):
        """P(X_T >= R_k) under the terminal Gaussian of each class."""
        from scipy.special import ndtr

        R = np.asarray(self.config.compliance.R)
        mean = self.flow.mean[:, -1]
        sd = np.sqrt(self.flow.var[:, -1])
        with np.errstate(divide="ignore"):
            z = np.where(sd > 0, (mean - R) / np.where(sd > 0, sd, 1.0), np.sign(mean - R) * np.inf)
        return ndtr(z)


class _Setup:
    """Per-config constants shared by every sweep."""

    def __init__(self, cfg: MarketConfig, grid: SchemeGrid):
        self.cfg = cfg
        self.grid = grid
        m = grid.m
        self.P = cfg.compliance.P
        coef = derive_coefficients(cfg.classes)
        self.eta = np.array([c.eta for c in coef])
        self.upsilon = np.array([c.upsilon for c in coef])
        self.gamma_tilde = np.array([c.gamma_tilde for c in coef])
        self.gamma = np.array([p.gamma for p in cfg.classes])
        self.pi_over_gamma = np.array([p.pi / p.gamma for p in cfg.classes])
        self.h = np.array([p.h_path(m) for p in cfg.classes])
        self.sigma = np.array([p.sigma_path(m) for p in cfg.classes])
        self.R = np.asarray(cfg.compliance.R, dtype=float)

    def price_term(self, ybar):
        """Per-class drift reduction (P / gamma_tilde_k) * sum_k' (pi/gamma)_k' * Ybar_k'.

        Equal to s / gamma_k; the sum runs in fixed class order.
        """
        acc = 0.0
        for w, yb in zip(self.pi_over_gamma, ybar):
            acc += w * yb
        return self.P / self.gamma_tilde * acc


def _map(fn, items, workers):
    items = list(items)
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def build_grid(cfg: MarketConfig) -> SchemeGrid:
    """Uniform x-grid covering six standard deviations beyond the reachable
    inventory range of every class.

    The spacing is shrunk to ``2*delta/n`` and the lattice shifted so that
    the penalty kinks ``R - delta`` and ``R + delta`` of the first class sit
    on nodes; one spare interval keeps the requested range covered.
    """
    m = cfg.n_steps
    dt = cfg.scheme.dt
    T = cfg.compliance.T
    P = cfg.compliance.P
    delta = cfg.compliance.delta
    d = int(cfg.scheme.x_nodes)
    coef = derive_coefficients(cfg.classes)
    lo, hi = math.inf, -math.inf
    for p, c in zip(cfg.classes, coef):
        spread = GRID_SIGMAS * math.sqrt(p.m0 + float(np.sum(p.sigma_path(m) ** 2)) * dt)
        lo = min(lo, p.nu0 - spread)
        hi = max(hi, p.nu0 + float(np.sum(p.h_path(m))) * dt + P * c.upsilon * T + spread)
    dx0 = (hi - lo) / (d - 2)
    n = math.floor(2 * delta / dx0)
    dx = 2 * delta / n if n >= 1 else dx0
    anchor = cfg.compliance.R[0] - delta
    i0 = math.ceil((anchor - lo) / dx)
    x = anchor + dx * (np.arange(d) - i0)
    times = np.arange(m + 1) * dt
    return SchemeGrid(dt=dt, times=times, x=check_knots(x))


def terminal_slice(cfg: MarketConfig, grid: SchemeGrid) -> np.ndarray:
    R = np.asarray(cfg.compliance.R, dtype=float)[:, None]
    return penalty_prime(R - grid.x[None, :], cfg.compliance.delta)


def class_means(y_j, mean_j, var_j, x):
    """E^{mu}[Y] per class at one time node, exact for the interpolant."""
    return np.array(
        [pwl_gaussian_moment(x, y_j[k], mean_j[k], var_j[k], checked=True) for k in range(y_j.shape[0])]
    )


def _outside(M, x, width):
    """True when a conditional mean lands beyond the extension band: two
    grid spacings or four one-step standard deviations, whichever is wider."""
    band = max(2.0 * (x[1] - x[0]), 4.0 * width)
    return bool(M.min() < x[0] - band or M.max() > x[-1] + band)


def backward_step(j, y_next, flow_prev, surface_prev, grid, cfg, *, setup=None, baseline=False, workers=1):
    """Adjoint values at time node ``j`` from the slice at ``j + 1``.

    The drift at each node uses the previous outer iterate (its surface and
    its flow); the transition over one step is Gaussian with variance
    sigma^2 dt, integrated exactly against the interpolant of ``y_next``.
    With ``baseline=True`` the drift is the baseline generation rate only.
    """
    st = setup or _Setup(cfg, grid)
    x = grid.x
    dt = grid.dt
    if baseline:
        shift = None
    else:
        ybar = class_means(surface_prev.y[:, j], flow_prev.mean[:, j], flow_prev.var[:, j], x)
        shift = st.price_term(ybar)

    def one(k):
        if baseline:
            drift = st.h[k, j]
        else:
            drift = st.h[k, j] + st.upsilon[k] * st.P * surface_prev.y[k, j] - shift[k]
        M = x + dt * drift
        M = np.broadcast_to(M, x.shape)
        V = st.sigma[k, j] ** 2 * dt
        if _outside(M, x, math.sqrt(V)):
            log.warning("class %d step %d: conditional mean leaves x-grid; constant continuation applies", k + 1, j)
        return pwl_gaussian_moment(x, y_next[k], M, V, checked=True)

    out = np.array(_map(one, range(len(cfg.classes)), workers))
    if not np.all(np.isfinite(out)):
        raise SolverError(f"non-finite adjoint values at step {j}")
    if out.min() < -CLAMP_TOL or out.max() > 1 + CLAMP_TOL:
        raise SolverError(f"adjoint values left [0, 1] at step {j}: [{out.min()}, {out.max()}]")
    return np.clip(out, 0.0, 1.0)


def backward_sweep(flow_prev, surface_prev, grid, cfg, *, setup=None, baseline=False, workers=1):
    st = setup or _Setup(cfg, grid)
    K, m, d = len(cfg.classes), grid.m, grid.x.size
    y = np.empty((K, m + 1, d))
    y[:, m] = terminal_slice(cfg, grid)
    for j in range(m - 1, -1, -1):
        y[:, j] = backward_step(
            j, y[:, j + 1], flow_prev, surface_prev, grid, cfg, setup=st, baseline=baseline, workers=workers
        )
    return ValueSurface(y=y, x=grid.x, times=grid.times)


def forward_step(j, mean_j, var_j, surface, grid, cfg, q=None, *, moments=None, setup=None, workers=1):
    """Gaussian moment closure of one Euler step of the controlled state.

    Mean and variance of ``X + dt*b(X)`` under the current class Gaussians,
    plus the diffusion variance. ``moments="exact"`` integrates the
    interpolated surface in closed form; ``"hermite"`` uses ``q``-node
    Gauss-Hermite quadrature on it. The price term always uses the exact
    class averages of the same surface.
    """
    st = setup or _Setup(cfg, grid)
    moments = moments or cfg.scheme.forward_moments
    q = q or cfg.scheme.quad_nodes
    x, dt = grid.x, grid.dt
    ybar = class_means(surface.y[:, j], mean_j, var_j, x)
    shift = st.price_term(ybar)

    def one(k):
        c = st.h[k, j] - shift[k]
        a = st.upsilon[k] * st.P
        if moments == "hermite":
            z, w = hermite_nodes(q)
            X = mean_j[k] + math.sqrt(var_j[k]) * z
            yv = np.interp(X, x, surface.y[k, j])
            Z = X + dt * (c + a * yv)
            mu = float(np.dot(w, Z))
            var = float(np.dot(w, (Z - mu) ** 2))
        else:
            m0, v0 = mean_j[k], var_j[k]
            ey, exy, ey2 = (
                pwl_gaussian_moment(x, surface.y[k, j], m0, v0, o, checked=True) for o in ("f", "xf", "f2")
            )
            # X + dt*b(X) with b = c + a*Y(X); cov and var of Y in closed form
            cov_xy = exy - m0 * ey
            var_y = max(ey2 - ey * ey, 0.0)
            mu = m0 + dt * (c + a * ey)
            var = v0 + 2.0 * dt * a * cov_xy + (dt * a) ** 2 * var_y
        var += st.sigma[k, j] ** 2 * dt
        if var < 0 or not np.isfinite(var) or not np.isfinite(mu):
            raise SolverError(f"invalid propagated moments for class {k} at step {j}")
        return mu, var

    res = _map(one, range(len(cfg.classes)), workers)
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def initial_moments(cfg: MarketConfig):
    return (
        np.array([p.nu0 for p in cfg.classes], dtype=float),
        np.array([p.m0 for p in cfg.classes], dtype=float),
    )


def forward_sweep(surface, grid, cfg, q=None, *, moments=None, setup=None, workers=1) -> GaussianFlow:
    st = setup or _Setup(cfg, grid)
    K, m = len(cfg.classes), grid.m
    mean = np.empty((K, m + 1))
    var = np.empty((K, m + 1))
    mean[:, 0], var[:, 0] = initial_moments(cfg)
    for j in range(m):
        mean[:, j + 1], var[:, j + 1] = forward_step(
            j, mean[:, j], var[:, j], surface, grid, cfg, q, moments=moments, setup=st, workers=workers
        )
    return GaussianFlow(mean, var)


def baseline_flow(grid: SchemeGrid, cfg: MarketConfig) -> GaussianFlow:
    """Law of inventories when every firm generates at baseline and never trades."""
    st = _Setup(cfg, grid)
    K, m = len(cfg.classes), grid.m
    mean = np.empty((K, m + 1))
    var = np.empty((K, m + 1))
    mean[:, 0], var[:, 0] = initial_moments(cfg)
    for j in range(m):
        mean[:, j + 1] = mean[:, j] + grid.dt * st.h[:, j]
        var[:, j + 1] = var[:, j] + st.sigma[:, j] ** 2 * grid.dt
    return GaussianFlow(mean, var)


def price_from(surface: ValueSurface, flow: GaussianFlow, cfg: MarketConfig) -> np.ndarray:
    """Mean-field clearing price at every time node."""
    if surface.y.shape[:2] != flow.mean.shape:
        raise DimensionError(f"surface {surface.y.shape[:2]} and flow {flow.mean.shape} disagree")
    eta = np.array([c.eta for c in derive_coefficients(cfg.classes)])
    P = cfg.compliance.P
    m1 = flow.mean.shape[1]
    s = np.empty(m1)
    for j in range(m1):
        ybar = class_means(surface.y[:, j], flow.mean[:, j], flow.var[:, j], surface.x)
        acc = 0.0
        for e, yb in zip(eta, ybar):
            acc += e * yb
        s[j] = P * acc
    return np.clip(s, 0.0, P)


def measure_distance(flow_a: GaussianFlow, flow_b: GaussianFlow) -> float:
    """Largest 2-Wasserstein distance between matching Gaussians."""
    if flow_a.mean.shape != flow_b.mean.shape:
        raise DimensionError("flows live on different grids")
    dm = flow_a.mean - flow_b.mean
    ds = np.sqrt(flow_a.var) - np.sqrt(flow_b.var)
    return float(np.max(np.sqrt(dm * dm + ds * ds)))


def control_surfaces(surface: ValueSurface, price: np.ndarray, cfg: MarketConfig):
    K, m1, d = surface.y.shape
    g = np.empty_like(surface.y)
    Gamma = np.empty_like(surface.y)
    m = m1 - 1
    for k in range(K):
        for j in range(m1):
            g[k, j], Gamma[k, j] = optimal_controls(k, surface.y[k, j], price[j], cfg, j=min(j, m - 1))
    return g, Gamma


def z_diagnostic(solution: EquilibriumSolution) -> np.ndarray:
    """Martingale integrand sigma * dY/dx by central differences (one-sided at the ends)."""
    y = solution.surface.y
    sig = np.array([p.sigma_path(solution.grid.m) for p in solution.config.classes])
    sig = np.concatenate([sig, sig[:, -1:]], axis=1)
    dydx = np.gradient(y, solution.grid.x, axis=2)
    return sig[:, :, None] * dydx


def _oscillating(res) -> bool:
    return len(res) >= 4 and res[-1] > res[-2] > res[-3] > res[-4]


def solve_fixed_point(
    cfg: MarketConfig, *, omega=None, q=None, moments=None, workers=1, max_iters=None, epsilon=None
):
    """Iterate backward sweep, forward sweep and flow comparison to a fixed point.

    Starts from baseline-only dynamics. The flow iterate is relaxed with
    weight ``omega`` (1 gives the plain Picard iteration). Raises
    :class:`NonConvergenceError` when the residual is still above the
    tolerance after ``max_iters`` iterations.
    """
    cfg.validate()
    omega = cfg.scheme.omega if omega is None else omega
    q = q or cfg.scheme.quad_nodes
    moments = moments or cfg.scheme.forward_moments
    max_iters = max_iters or cfg.scheme.max_iters
    eps = cfg.scheme.epsilon if epsilon is None else epsilon
    grid = build_grid(cfg)
    st = _Setup(cfg, grid)

    flow_prev = baseline_flow(grid, cfg)
    surf_prev = backward_sweep(flow_prev, None, grid, cfg, setup=st, baseline=True, workers=workers)
    residuals = []
    oscillation_seen = False
    for it in range(1, max_iters + 1):
        surf = backward_sweep(flow_prev, surf_prev, grid, cfg, setup=st, workers=workers)
        flow_new = forward_sweep(surf, grid, cfg, q, moments=moments, setup=st, workers=workers)
        res = measure_distance(flow_new, flow_prev)
        residuals.append(res)
        log.info("iteration %d: residual %.3e", it, res)
        if res <= eps:
            price = price_from(surf, flow_new, cfg)
            g, Gamma = control_surfaces(surf, price, cfg)
            return EquilibriumSolution(
                config=cfg, grid=grid, surface=surf, flow=flow_new, price=price, g=g, Gamma=Gamma,
                residuals=residuals, converged=True, tolerance=eps,
                meta={"omega": omega, "quad_nodes": q, "forward_moments": moments},
            )
        if _oscillating(residuals) and not oscillation_seen:
            oscillation_seen = True
            log.warning("residual rose three iterations in a row; consider omega < %g", omega)
        flow_prev = GaussianFlow(
            (1 - omega) * flow_prev.mean + omega * flow_new.mean,
            (1 - omega) * flow_prev.var + omega * flow_new.var,
        )
        surf_prev = surf
    raise NonConvergenceError(
        f"no fixed point within {max_iters} iterations (last residual {residuals[-1]:.3e} > {eps:g})",
        residuals,
        suggested_omega=omega / 2 if oscillation_seen else None,
    )


@dataclass(frozen=True)
class MartingaleProbe:
    k: int
    j1: int
    j2: int
    x: float
    y_start: float
    y_mc: float
    se: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.y_mc - self.y_start) <= self.tolerance


def _local_curvature(y_j, x_nodes, xq):
    """|y''| near each query point from node second differences, taking the
    larger of the two ends of the enclosing interval."""
    dx = x_nodes[1] - x_nodes[0]
    c = np.zeros_like(y_j)
    c[1:-1] = np.abs(y_j[2:] - 2.0 * y_j[1:-1] + y_j[:-2]) / (dx * dx)
    u = np.clip(np.searchsorted(x_nodes, xq) - 1, 0, x_nodes.size - 2)
    return np.maximum(c[u], c[u + 1])


def simulate_adjoint(solution: EquilibriumSolution, k: int, j1: int, j2: int, x0, normals):
    """Y(t_j2, X_j2) along Euler paths started at x0 at t_j1 under the equilibrium drift.

    Also returns the interpolation allowance: the expected linear-interpolation
    error dx^2/8 * |y''| accumulated over the slices the paths cross.
    """
    st = _Setup(solution.config, solution.grid)
    dt = solution.grid.dt
    dx = solution.grid.dx
    x = np.full(normals.shape[1], float(x0))
    surf = solution.surface
    allowance = 0.0
    for j in range(j1, j2):
        y = np.interp(x, surf.x, surf.y[k, j])
        allowance += dx * dx / 8.0 * float(_local_curvature(surf.y[k, j], surf.x, x).mean())
        drift = st.h[k, j] + st.upsilon[k] * st.P * y - solution.price[j] / st.gamma[k]
        x = x + dt * drift + st.sigma[k, j] * math.sqrt(dt) * normals[j - j1]
    return np.interp(x, surf.x, surf.y[k, j2]), allowance


def martingale_probes(solution: EquilibriumSolution, n_probes=20, n_paths=100_000, seed=0, z=3.0) -> list:
    """Check E[Y(t2, X_t2) | X_t1 = x] = Y(t1, x) by Monte Carlo at random probes.

    Probe classes, times and start points are drawn from ``seed``; start
    points come from the equilibrium law of the class at t1 so they sit
    where the surface matters. The tolerance is ``z`` standard errors plus
    the interpolation allowance of :func:`simulate_adjoint`.
    """
    rng = np.random.default_rng(seed)
    m = solution.grid.m
    K = solution.surface.y.shape[0]
    out = []
    for _ in range(n_probes):
        k = int(rng.integers(K))
        j1 = int(rng.integers(0, m - 1))
        j2 = int(rng.integers(j1 + 1, m + 1))
        x = float(rng.normal(solution.flow.mean[k, j1], math.sqrt(solution.flow.var[k, j1])))
        normals = rng.standard_normal((j2 - j1, n_paths))
        yT, allowance = simulate_adjoint(solution, k, j1, j2, x, normals)
        se = float(yT.std(ddof=1) / math.sqrt(n_paths))
        out.append(
            MartingaleProbe(k, j1, j2, x, float(solution.surface.at(k, j1, x)), float(yT.mean()), se, z * se + allowance)
        )
    return out
