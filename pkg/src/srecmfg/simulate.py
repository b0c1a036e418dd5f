"""Finite-population replay of the equilibrium.

Agents follow the mean-field feedback controls evaluated at their own
inventories, while the certificate price clears the finite market at every
step. Noise comes from per-agent counter-based streams so that batching,
threading and agent ordering cannot change a run.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantError, RefusalError
from .model import Y_TOL, penalty_prime

CLEARING_TOL = 1e-9


@dataclass(frozen=True)
class AgentState:
    id: int
    k: int
    x: float
    generation: float
    trading: float


@dataclass
class SimulationRun:
    """One finite-player replay; path arrays are (time, agent)."""

    seed: int
    N: int
    sizes: tuple
    times: np.ndarray
    classes: np.ndarray
    price: np.ndarray
    x: np.ndarray
    g: np.ndarray
    Gamma: np.ndarray
    noncompliance: np.ndarray
    generation: np.ndarray
    trading: np.ndarray
    clearing_residual: float
    digest: str
    meta: dict = field(default_factory=dict)

    def agent_states(self, j=-1) -> list:
        """Inventories at time node ``j`` with cumulative generation and trading up to it."""
        jj = j % self.x.shape[0]
        dt = float(self.times[1] - self.times[0])
        gen = dt * self.g[:jj].sum(axis=0)
        trd = dt * self.Gamma[:jj].sum(axis=0)
        return [
            AgentState(i, int(self.classes[i]), float(self.x[jj, i]), float(gen[i]), float(trd[i]))
            for i in range(self.N)
        ]


def class_sizes(N: int, pis) -> tuple:
    """Largest-remainder rounding of ``N * pi_k``; ties go to the lower class index."""
    if int(N) != N or N < 1:
        raise ConfigError(f"agent count must be a positive integer (got {N})")
    raw = [N * p for p in pis]
    base = [math.floor(r) for r in raw]
    short = N - sum(base)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - base[k]), k))
    for k in order[:short]:
        base[k] += 1
    return tuple(base)


def clearing_price(y, classes, gammas, P, extra_trade=0.0):
    """Price at which the agents' trades net to zero.

    ``y`` holds per-agent adjoint values and ``classes`` their class index.
    ``extra_trade`` is demand added on top of the feedback trades (a
    deviating agent's perturbation); it shifts the price so the total still
    nets to zero. Leading axes of ``y`` and ``extra_trade`` are batch axes.
    """
    y = np.asarray(y, dtype=float)
    classes = np.asarray(classes)
    N = y.shape[-1]
    if N == 0:
        raise ConfigError("clearing needs at least one agent")
    if np.any(y < -Y_TOL) or np.any(y > 1 + Y_TOL):
        raise InvariantError("adjoint value outside [0, 1]")
    inv_g = 1.0 / np.asarray(gammas, dtype=float)[classes]
    num = P * np.sum(y * inv_g, axis=-1)
    den = float(np.sum(inv_g))
    s = num / den
    if np.any(np.asarray(extra_trade) != 0):
        s = s + np.asarray(extra_trade) / den
    return s


def class_clearing_price(ybar, sizes, gammas, P):
    """Clearing price from class averages of ``y`` and class head counts."""
    N = sum(sizes)
    if N == 0:
        raise ConfigError("clearing needs at least one agent")
    w = [n / (N * g) for n, g in zip(sizes, gammas)]
    num = math.fsum(wk * yk for wk, yk in zip(w, ybar))
    return P * num / math.fsum(w)


def agent_key(seed: int, k: int, local: int) -> np.ndarray:
    return np.array([seed, (k << 32) | local], dtype=np.uint64)


def agent_normals(seed: int, sizes, n: int, *, batch_size=None, workers=1) -> np.ndarray:
    """Standard normals, ``n`` per agent, shape (N, n).

    Agent (k, i) always receives the stream keyed by (seed, k, i), so the
    draws of a given agent do not depend on N, on batching or on threads.
    """
    ids = [(k, i) for k, nk in enumerate(sizes) for i in range(nk)]
    out = np.empty((len(ids), n))
    batch = batch_size or max(len(ids), 1)

    def fill(lo):
        for r in range(lo, min(lo + batch, len(ids))):
            k, i = ids[r]
            out[r] = np.random.Generator(np.random.Philox(key=agent_key(seed, k, i))).standard_normal(n)

    starts = range(0, len(ids), batch)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(fill, starts))
    else:
        for lo in starts:
            fill(lo)
    return out


class _Market:
    """Per-solution arrays used at every step of a replay."""

    def __init__(self, solution, sizes):
        cfg = solution.config
        self.cfg = cfg
        self.sol = solution
        m = solution.grid.m
        self.sizes = tuple(sizes)
        self.cls = np.repeat(np.arange(len(sizes)), sizes)
        self.P = cfg.compliance.P
        self.gammas = np.array([p.gamma for p in cfg.classes])
        self.zetas = np.array([p.zeta for p in cfg.classes])
        h = np.array([p.h_path(m) for p in cfg.classes])
        sig = np.array([p.sigma_path(m) for p in cfg.classes])
        self.h = h[self.cls]
        self.sig = sig[self.cls]
        self.gam = self.gammas[self.cls]
        self.zet = self.zetas[self.cls]
        self.R = np.asarray(cfg.compliance.R, dtype=float)[self.cls]
        self.nu0 = np.array([p.nu0 for p in cfg.classes])[self.cls]
        self.sd0 = np.sqrt(np.array([p.m0 for p in cfg.classes]))[self.cls]

    def y(self, j, x):
        """Mean-field adjoint at each agent's own inventory; x is (..., N)."""
        out = np.empty_like(x)
        surf = self.sol.surface
        for k in range(len(self.sizes)):
            sel = self.cls == k
            out[..., sel] = np.interp(x[..., sel], surf.x, surf.y[k, j])
        return out


def replay(market: _Market, normals, *, shift_g=None, shift_Gamma=None, deviant=None, fixed_price=None):
    """Euler replay of all agents for the given shocks.

    ``normals`` is (N, m+1): column 0 draws the initial inventory, the rest
    are step shocks. Optional (F, m) arrays ``shift_g``/``shift_Gamma`` add
    open-loop perturbations to the controls of agent ``deviant``; every
    perturbation is played against its own copy of the market, so arrays
    gain a leading axis of length F. ``fixed_price`` replaces clearing by an
    exogenous price path.
    """
    sol = market.sol
    m = sol.grid.m
    dt = sol.grid.dt
    sq = math.sqrt(dt)
    N = normals.shape[0]
    F = 1 if shift_g is None and shift_Gamma is None else len(shift_g if shift_g is not None else shift_Gamma)
    lead = (F,) if deviant is not None else ()
    x = np.empty((m + 1,) + lead + (N,))
    g = np.empty((m,) + lead + (N,))
    G = np.empty((m,) + lead + (N,))
    s = np.empty((m + 1,) + lead)
    x[0] = market.nu0 + market.sd0 * normals[:, 0]
    resid = 0.0
    for j in range(m):
        y = market.y(j, x[j])
        extra = 0.0
        if deviant is not None and shift_Gamma is not None:
            extra = shift_Gamma[:, j]
        if fixed_price is None:
            s[j] = clearing_price(y, market.cls, market.gammas, market.P, extra)
        else:
            s[j] = fixed_price[j]
        sj = s[j][..., None] if lead else s[j]
        gj = market.h[:, j] + market.P / market.zet * y
        Gj = (market.P * y - sj) / market.gam
        if deviant is not None:
            if shift_g is not None:
                gj[:, deviant] = np.maximum(gj[:, deviant] + shift_g[:, j], 0.0)
            if shift_Gamma is not None:
                Gj[:, deviant] = Gj[:, deviant] + shift_Gamma[:, j]
        if fixed_price is None:
            resid = max(resid, float(np.max(np.abs(np.sum(Gj, axis=-1)))))
        g[j], G[j] = gj, Gj
        x[j + 1] = x[j] + dt * (gj + Gj) + market.sig[:, j] * sq * normals[:, j + 1]
    yT = penalty_prime(market.R - x[m], market.cfg.compliance.delta)
    s[m] = fixed_price[m] if fixed_price is not None else clearing_price(yT, market.cls, market.gammas, market.P)
    return x, g, G, s, resid


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def simulate(solution, N=None, seed=None, config=None, *, batch_size=None, workers=1) -> SimulationRun:
    """Replay one compliance period for ``N`` firms using the equilibrium controls."""
    cfg = config or solution.config
    if not solution.converged:
        raise RefusalError("simulation needs a converged equilibrium solution")
    if config is not None and config.classes != solution.config.classes:
        raise ConfigError("config does not match the one the solution was computed for")
    N = cfg.run.n_agents if N is None else N
    seed = cfg.run.seed if seed is None else seed
    pis = [p.pi for p in cfg.classes]
    sizes = class_sizes(N, pis)
    market = _Market(solution, sizes)
    m = solution.grid.m
    normals = agent_normals(seed, sizes, m + 1, batch_size=batch_size, workers=workers)
    x, g, G, s, resid = replay(market, normals)
    if resid > CLEARING_TOL * N:
        raise InvariantError(f"market failed to clear: |sum Gamma| = {resid:.3e}")
    if np.any(s < 0) or np.any(s > market.P * (1 + 1e-12)):
        raise InvariantError("finite-player price left [0, P]")
    dt = solution.grid.dt
    K = len(sizes)
    miss = x[m] < market.R
    nonc = np.array([miss[market.cls == k].mean() if sizes[k] else np.nan for k in range(K)])
    gen = np.array([dt * g[:, market.cls == k].sum() for k in range(K)])
    trd = np.array([dt * G[:, market.cls == k].sum() for k in range(K)])
    rounding = {
        "requested": [N * p for p in pis],
        "sizes": list(sizes),
        "rule": "largest remainder",
    }
    return SimulationRun(
        seed=int(seed), N=int(N), sizes=sizes, times=solution.grid.times.copy(), classes=market.cls,
        price=s, x=x, g=g, Gamma=G, noncompliance=nonc, generation=gen, trading=trd,
        clearing_residual=resid, digest=_digest(s, x, g, G),
        meta={"rounding": rounding, "rng": "Philox keyed by (seed, class, index within class)"},
    )


def flow_agreement(run: SimulationRun, flow, z=4.0) -> np.ndarray:
    """Fraction of time nodes where each class's empirical mean is within
    ``z`` flow standard errors of the Gaussian flow mean."""
    out = []
    for k, nk in enumerate(run.sizes):
        xs = run.x[:, run.classes == k]
        err = np.abs(xs.mean(axis=1) - flow.mean[k])
        out.append(float(np.mean(err <= z * np.sqrt(flow.var[k] / nk))))
    return np.array(out)
