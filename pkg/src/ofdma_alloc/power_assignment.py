"""Transmit power and subcarrier assignment for fixed frequencies, rho and deadline.

The uplink energy of device n is  E_n = P_n * bits_n / r_n  with
P_n = sum_k p_nk and bits_n = D_n + rho*C_n.  The solver works on the
relaxed assignment x in [0, 1]:

* the per-link cap p <= x*Pmax is replaced by p <= x^q*Pmax and then by its
  first-order expansion around the previous iterate (an under-estimator of
  x^q, so the linearised set is inside the original one);
* integrality is pushed by a penalty on sum x(1-x), linearised the same way
  (``binarity_penalty``);
* each energy ratio is handled through an epigraph variable sigma_n and the
  quadratic transform  P/sigma <= P^2*y + 1/(4*y*sigma^2), with y refreshed
  at every outer iteration.

For fixed y the power block (x frozen) is a concave water-filling problem
and is solved exactly: the water level is fixed by the epigraph multiplier
unless the device budget or the rate floor binds, in which case those
multipliers take over.  The assignment block (p frozen) is convex and is
handled by projected gradient with an exact per-subcarrier projection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rootfind import bisect_increasing
from .errors import InfeasibleError
from .metrics import LN2, Weights, link_rates
from .scenario import Scenario

EXP2_MAX = 1000.0   # 2**1000 is still finite in double precision


@dataclass
class Multipliers:
    beta: np.ndarray    # (K,) subcarrier exclusivity
    iota: np.ndarray    # (N, K) linearised per-link power cap
    lam: np.ndarray     # (N,) minimum rate
    nu: np.ndarray      # (N,) epigraph / quadratic-transform constraint
    omega: np.ndarray   # (N,) device power budget

    @classmethod
    def zeros(cls, n, k):
        return cls(np.zeros(k), np.zeros((n, k)), np.zeros(n), np.zeros(n), np.zeros(n))


@dataclass
class RateFloor:
    r_min: np.ndarray


@dataclass
class PowerAssignConfig:
    eps1_rel: float = 1e-6        # stop when |h_i - h_{i-1}| <= eps1_rel * |h_0|
    i_max: int = 100
    penalty_start: float = 1.0
    penalty_growth: float = 5.0
    penalty_cap: float = 1e6
    binary_tol: float = 1e-3
    inner_sweeps: int = 500
    inner_tol: float = 1e-8
    pg_iters: int = 20
    monotone_jitter: float = 1e-8


@dataclass
class PowerAssignState:
    power_w: np.ndarray
    assign: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    penalty: float
    iterate: int
    h_value: float


@dataclass
class PowerAssignReport:
    h_trace: list = field(default_factory=list)
    phase: list = field(default_factory=list)     # penalty phase of each trace entry
    iterations: int = 0
    converged: bool = False
    binary_gap: float = float("nan")
    penalty: float = float("nan")
    fallback_used: bool = False                   # assignment block went through projected gradient
    sweeps: int = 0
    multipliers: Multipliers | None = None
    kkt: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    overflow: bool = False
    state: PowerAssignState | None = None

    def monotone_within_phase(self, jitter: float = 1e-8) -> bool:
        for a, b, pa, pb in zip(self.h_trace, self.h_trace[1:], self.phase, self.phase[1:]):
            if pa == pb and b > a + jitter * max(1.0, abs(a)):
                return False
        return True


# ---------------------------------------------------------------------------
# small closed forms

def rate_floor(scenario: Scenario, rho: float, deadline: float, freq) -> RateFloor:
    """Per-device minimum rate from the semantic deadline and the FL deadline."""
    c = scenario.constants
    t_cmp = scenario.compute_load / np.asarray(freq, dtype=float)
    slack = deadline - t_cmp
    bad = np.flatnonzero(slack <= 0)
    if bad.size:
        raise InfeasibleError(f"device {bad[0]}: computation alone exceeds the deadline", device=int(bad[0]))
    sc = rho * scenario.semcom_bits / c.t_semcom_max_s
    fl = scenario.upload_bits / slack
    return RateFloor(np.maximum(sc, fl))


def binarity_penalty(X, X_ref) -> float:
    """Linearisation of -sum x(1-x) around X_ref (exact when X == X_ref)."""
    X = np.asarray(X, dtype=float)
    X_ref = np.asarray(X_ref, dtype=float)
    return float(np.sum((2 * X_ref - 1) * (X - X_ref) + X_ref * (X_ref - 1)))


def binary_gap(X) -> float:
    X = np.asarray(X, dtype=float)
    return float(np.sum(X * (1 - X)))


def cap_coefficients(X_ref, q: int, pmax: float):
    """Linearised cap p <= a*x - b around X_ref."""
    X_ref = np.asarray(X_ref, dtype=float)
    a = q * X_ref ** (q - 1) * pmax
    b = (q - 1) * X_ref ** q * pmax
    return a, b


def linearised_cap(X, X_ref, q: int, pmax: float):
    X_ref = np.asarray(X_ref, dtype=float)
    return (X_ref ** q + q * X_ref ** (q - 1) * (np.asarray(X, dtype=float) - X_ref)) * pmax


def _scalars(scenario):
    c = scenario.constants
    bbar = c.subcarrier_bandwidth_hz
    return c, bbar, c.noise_psd_w_per_hz


def p_hat_all(mult: Multipliers, X_ref, scenario: Scenario, penalty: float):
    """Power that makes the Lagrangian stationary in x (interior x only).

    Returns (p, overflow_mask); overflowing entries are clamped to Pmax.
    """
    c, bbar, n0 = _scalars(scenario)
    q = c.taylor_power_q
    X_ref = np.asarray(X_ref, dtype=float)
    num = (-penalty * (2 * X_ref - 1) + mult.beta[None, :]
           - mult.iota * q * X_ref ** (q - 1) * c.p_max_w)
    den = (mult.lam + mult.nu)[:, None] * bbar
    expo = num / den
    overflow = expo > EXP2_MAX
    p = (np.exp2(np.minimum(expo, EXP2_MAX)) - 1.0) * n0 * bbar / scenario.gains
    p = np.where(overflow, c.p_max_w, np.maximum(p, 0.0))
    return p, overflow


def p_hat(n: int, k: int, mult: Multipliers, X_ref, scenario: Scenario, penalty: float) -> float:
    p, _ = p_hat_all(mult, X_ref, scenario, penalty)
    return float(p[n, k])


def x_hat_all(mult: Multipliers, P, scenario: Scenario, rho: float, y) -> np.ndarray:
    """Assignment that makes the Lagrangian stationary in p, clipped to [0, 1]."""
    c, bbar, n0 = _scalars(scenario)
    P = np.asarray(P, dtype=float)
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    psum = P.sum(axis=1)
    price = mult.iota + (mult.omega + 2 * mult.nu * bits * np.asarray(y) * psum)[:, None]
    snr = 1.0 + P * scenario.gains / (n0 * bbar)
    x = price * snr * n0 * LN2 / ((mult.lam + mult.nu)[:, None] * scenario.gains)
    return np.clip(x, 0.0, 1.0)


def x_hat(n: int, k: int, mult: Multipliers, P, scenario: Scenario, rho: float, y) -> float:
    return float(x_hat_all(mult, P, scenario, rho, y)[n, k])


def sigma_hat(nu, y, bits, kappa1: float):
    """Epigraph value that makes the Lagrangian stationary in sigma."""
    if kappa1 <= 0:
        raise ValueError("sigma is undetermined when kappa1 = 0")
    return np.cbrt(np.asarray(nu) * np.asarray(bits) / (2 * np.asarray(y) * kappa1))


# ---------------------------------------------------------------------------
# power block: x frozen, y frozen

@dataclass
class _Ctx:
    h: np.ndarray        # N0*bbar/g, (N, K)
    bbar: float
    y: np.ndarray
    bits: np.ndarray
    r_min: np.ndarray
    pmax: float
    kappa1: float


def _fill(log_theta, x, u, ctx):
    theta = np.exp(log_theta)[:, None]
    return np.minimum(np.maximum(x * (ctx.bbar / LN2) * theta - ctx.h, 0.0), u)


def _rate(p, x, ctx):
    return np.sum(x * ctx.bbar * np.log1p(p / ctx.h), axis=1) / LN2


def _solve_power(x, u, ctx: _Ctx):
    """Exact power block. Returns (p, info) with multipliers relative to nu."""
    n = x.shape[0]
    live = (x > 0) & (u > 0)
    traffic = ctx.bits > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        enter = np.where(live, ctx.h * LN2 / (x * ctx.bbar), np.inf)
        full = np.where(live, (u + ctx.h) * LN2 / (x * ctx.bbar), -np.inf)
    usable = live.any(axis=1)
    need = traffic & (ctx.r_min > 0)
    dead = np.flatnonzero(need & ~usable)
    if dead.size:
        raise InfeasibleError(f"device {dead[0]} has no usable subcarrier", device=int(dead[0]))

    safe = np.where(usable, 1.0, 0.0)
    lo = np.where(usable, np.log(np.where(usable, enter.min(axis=1), 1.0)) - 1.0, 0.0)
    hi = np.where(usable, np.log(np.where(usable, full.max(axis=1), 1.0)) + 1.0, 0.0)
    P_at = lambda lt: _fill(lt, x, u, ctx).sum(axis=1)
    R_at = lambda lt: _rate(_fill(lt, x, u, ctx), x, ctx)

    p_sat = np.where(live, u, 0.0).sum(axis=1)
    lt = lo.copy()
    if ctx.kappa1 > 0:
        # 2*y*bits*theta*P(theta) = 1: unconstrained water level
        with np.errstate(divide="ignore"):
            hi_a = np.maximum(hi, np.log(1.0 / np.maximum(2 * ctx.y * ctx.bits * p_sat, 1e-300)) + 1.0)
        phi = lambda t: 2 * ctx.y * ctx.bits * np.exp(t) * P_at(t)
        _, lt = bisect_increasing(phi, lo, hi_a, np.ones(n))
    # device budget
    budget = usable & (P_at(lt) > ctx.pmax)
    lt_budget = hi.copy()
    if (p_sat > ctx.pmax).any():
        cut, _ = bisect_increasing(P_at, lo, hi, np.full(n, ctx.pmax))
        lt_budget = np.where(p_sat > ctx.pmax, cut, hi)
    lt = np.where(budget, lt_budget, lt)
    # rate floor
    short = need & (R_at(lt) < ctx.r_min)
    if short.any():
        r_best = R_at(lt_budget)
        fail = np.flatnonzero(short & (r_best < ctx.r_min * (1 - 1e-12)))
        if fail.size:
            d = int(fail[0])
            raise InfeasibleError(
                f"device {d}: rate floor {ctx.r_min[d]:.4g} bps unreachable (max {r_best[d]:.4g})", device=d)
        _, up = bisect_increasing(R_at, lt, np.maximum(lt_budget, lt), ctx.r_min)
        lt = np.where(short, np.minimum(up, lt_budget), lt)
    lt = np.where(safe > 0, lt, -np.inf)
    p = np.where(usable[:, None], _fill(np.where(usable, lt, 0.0), x, u, ctx), 0.0)
    theta = np.exp(lt)
    return p, dict(theta=theta, budget=budget, short=short, usable=usable)


def _power_multipliers(p, x, u, sigma, ctx: _Ctx, info) -> Multipliers:
    n, k = p.shape
    theta = info["theta"]
    psum = p.sum(axis=1)
    traffic = ctx.bits > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        level = np.where(theta > 0, 1.0 / theta, np.inf)
    if ctx.kappa1 > 0:
        nu = np.where(traffic, 2 * ctx.y * ctx.kappa1 * sigma ** 3 / np.where(traffic, ctx.bits, 1.0), 0.0)
        base = 2 * ctx.y * ctx.bits * psum
        omega_rel = np.where(info["budget"] & ~info["short"], np.maximum(level - base, 0.0), 0.0)
        lam_rel = np.where(info["short"], np.maximum(theta * (base + omega_rel) - 1.0, 0.0), 0.0)
        lam, omega = lam_rel * nu, omega_rel * nu
        price = (omega + 2 * nu * ctx.y * ctx.bits * psum)
    else:
        # minimum-power limit: only the floor multiplier is meaningful
        nu = np.zeros(n)
        omega = np.zeros(n)
        lam = np.where(info["short"], theta, 0.0)
        price = np.ones(n)
    slope = x * ctx.bbar / (LN2 * (ctx.h + p))
    capped = (u > 0) & (p >= u * (1 - 1e-12)) & (x > 0)
    iota = np.where(capped, np.maximum((lam + nu)[:, None] * slope - price[:, None], 0.0), 0.0)
    return Multipliers(np.zeros(k), iota, lam, nu, omega)


# ---------------------------------------------------------------------------
# assignment block: p frozen

def _project_columns(v, lower):
    """Project each column onto {lower <= x <= 1, sum x <= 1}. Returns (x, shift)."""
    x = np.clip(v, lower, 1.0)
    over = x.sum(axis=0) > 1.0
    shift = np.zeros(v.shape[1])
    if over.any():
        cols = np.flatnonzero(over)
        vv, ll = v[:, cols], lower[:, cols]
        total = lambda b: -np.clip(vv - b[None, :], ll, 1.0).sum(axis=0)
        hi = np.max(vv - ll, axis=0) + 1.0
        _, b = bisect_increasing(total, np.zeros(cols.size), hi, -np.ones(cols.size), iters=100)
        xc = np.clip(vv - b[None, :], ll, 1.0)
        excess = xc.sum(axis=0) - 1.0
        room = (xc - ll).sum(axis=0)
        fix = excess > 0
        if fix.any():
            xc[:, fix] = ll[:, fix] + (xc - ll)[:, fix] * (1 - excess[fix] / np.maximum(room[fix], 1e-300))
        x[:, cols] = xc
        shift[cols] = b
    return x, shift


def _assignment_objective(x, rl, psum, ctx, cost):
    G = np.sum(x * rl, axis=1) - ctx.y * ctx.bits * psum ** 2
    traffic = ctx.bits > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        sig = np.where(traffic, np.sqrt(ctx.bits / (4 * ctx.y * G)), 0.0)
    return float(ctx.kappa1 * sig.sum() + np.sum(cost * x)), G


def _solve_assignment(p, x, lower, ctx, cost, iters):
    rl = ctx.bbar * np.log1p(p / ctx.h) / LN2
    psum = p.sum(axis=1)
    traffic = ctx.bits > 0
    F0, G = _assignment_objective(x, rl, psum, ctx, cost)
    shift = np.zeros(x.shape[1])
    step = None
    for _ in range(iters):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(traffic, 0.5 * ctx.kappa1 * np.sqrt(ctx.bits / (4 * ctx.y)) * G ** -1.5, 0.0)
        grad = cost - coef[:, None] * rl
        gmax = np.max(np.abs(grad))
        if gmax == 0:
            break
        if step is None:
            step = 0.5 / gmax
        moved = False
        for _bt in range(40):
            xn, sh = _project_columns(x - step * grad, lower)
            Fn, Gn = _assignment_objective(xn, rl, psum, ctx, cost)
            rate = np.sum(xn * rl, axis=1)
            ok = (np.all(Gn[traffic] > 0) and np.all(rate >= ctx.r_min * (1 - 1e-12))
                  and Fn <= F0 + 1e-4 * np.sum(grad * (xn - x)))
            if ok:
                moved = True
                break
            step *= 0.5
        if not moved:
            break
        delta = np.max(np.abs(xn - x))
        x, F0, G = xn, Fn, Gn
        shift = sh / step
        step *= 2.0
        if delta <= 1e-12:
            break
    return x, shift


# ---------------------------------------------------------------------------

def _context(scenario, y, rho, r_min, kappa1):
    c, bbar, n0 = _scalars(scenario)
    return _Ctx(h=n0 * bbar / scenario.gains, bbar=bbar, y=np.asarray(y, dtype=float),
                bits=scenario.upload_bits + rho * scenario.semcom_bits,
                r_min=np.asarray(r_min, dtype=float), pmax=c.p_max_w, kappa1=kappa1)


def _sigma_from(p, x, ctx):
    R = _rate(p, x, ctx)
    G = R - ctx.y * ctx.bits * p.sum(axis=1) ** 2
    traffic = ctx.bits > 0
    if np.any(G[traffic] <= 0):
        d = int(np.flatnonzero(traffic & (G <= 0))[0])
        raise InfeasibleError(f"device {d}: quadratic-transform constraint has no solution", device=d)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(traffic, np.sqrt(ctx.bits / (4 * ctx.y * G)), 0.0)


def _sorted_levels(h, X):
    """Per-row noise levels h of owned links, ascending, with inf padding."""
    hs = np.sort(np.where(X > 0, h, np.inf), axis=1)
    m = np.arange(1, hs.shape[1] + 1)
    return hs, m


def waterfill_rate(h, X, r_target, bbar):
    """Exact least-power water-filling on binary rows: p = max(L - h, 0) with rate r_target.

    Returns (P, L). L is +inf for rows without owned links and a positive target.
    """
    hs, m = _sorted_levels(h, X)
    finite = np.isfinite(hs)
    logs = np.cumsum(np.where(finite, np.log2(np.where(finite, hs, 1.0)), 0.0), axis=1)
    r = np.asarray(r_target, dtype=float)[:, None]
    # level if exactly the m cheapest links are active
    L = np.exp2((r / bbar + logs) / m)
    nxt = np.concatenate([hs[:, 1:], np.full((hs.shape[0], 1), np.inf)], axis=1)
    ok = finite & (L > hs) & (L <= nxt)
    pick = np.where(ok.any(axis=1), np.argmax(ok, axis=1), 0)
    level = L[np.arange(L.shape[0]), pick]
    level = np.where(ok.any(axis=1), level, np.inf)
    level = np.where(r[:, 0] > 0, level, 0.0)
    P = np.where(X > 0, np.maximum(level[:, None] - h, 0.0), 0.0)
    return P, level


def waterfill_power(h, X, budget, bbar):
    """Rate of each binary row when its whole budget is water-filled."""
    hs, m = _sorted_levels(h, X)
    finite = np.isfinite(hs)
    L = (budget + np.cumsum(np.where(finite, hs, 0.0), axis=1)) / m
    nxt = np.concatenate([hs[:, 1:], np.full((hs.shape[0], 1), np.inf)], axis=1)
    ok = finite & (L > hs) & (L <= nxt)
    any_ok = ok.any(axis=1)
    level = np.where(any_ok, L[np.arange(L.shape[0]), np.argmax(ok, axis=1)], 0.0)
    with np.errstate(divide="ignore"):
        terms = np.where((X > 0) & (level[:, None] > h), np.log2(np.maximum(level[:, None], 1e-300) / h), 0.0)
    return bbar * terms.sum(axis=1)


def min_power_for_rates(scenario: Scenario, X, r_target, X_ref=None):
    """Least total power meeting r_target per device on assignment X (water-filling).

    Returns (P, theta) where theta = dP_n/dr_n, the marginal power per bit/s.
    """
    c = scenario.constants
    X = np.asarray(X, dtype=float)
    if X_ref is None and is_binary(X):
        # on binary rows the per-link cap equals the device budget, so only the budget can bind
        bbar = c.subcarrier_bandwidth_hz
        P, level = waterfill_rate(c.noise_psd_w_per_hz * bbar / scenario.gains, X, r_target, bbar)
        bad = np.flatnonzero(P.sum(axis=1) > c.p_max_w * (1 + 1e-12))
        if bad.size or np.any(~np.isfinite(level)):
            d = int(bad[0]) if bad.size else int(np.flatnonzero(~np.isfinite(level))[0])
            raise InfeasibleError(f"device {d}: rate target {np.asarray(r_target)[d]:.4g} bps unreachable", device=d)
        return P, np.where(np.asarray(r_target) > 0, level * LN2 / bbar, 0.0)
    X_ref = X if X_ref is None else X_ref
    a, b = cap_coefficients(X_ref, c.taylor_power_q, c.p_max_w)
    u = np.maximum(a * X - b, 0.0)
    ctx = _context(scenario, np.ones(scenario.n), 0.0, r_target, 0.0)
    ctx.bits = np.where(np.asarray(r_target) > 0, 1.0, 0.0)
    p, info = _solve_power(X, u, ctx)
    return p, np.where(info["short"], info["theta"], 0.0)


def _max_rate_rows(x, u, ctx) -> np.ndarray:
    live = (x > 0) & (u > 0)
    out = np.zeros(x.shape[0])
    ok = live.any(axis=1)
    if not ok.any():
        return out
    with np.errstate(divide="ignore", invalid="ignore"):
        enter = np.where(live, ctx.h * LN2 / (x * ctx.bbar), np.inf)
        full = np.where(live, (u + ctx.h) * LN2 / (x * ctx.bbar), -np.inf)
    lo = np.where(ok, np.log(np.where(ok, enter.min(axis=1), 1.0)) - 1.0, 0.0)
    hi = np.where(ok, np.log(np.where(ok, full.max(axis=1), 1.0)) + 1.0, 0.0)
    p_sat = np.where(live, u, 0.0).sum(axis=1)
    lt = hi
    if (p_sat > ctx.pmax).any():
        cut, _ = bisect_increasing(lambda t: _fill(t, x, u, ctx).sum(axis=1), lo, hi,
                                   np.full(x.shape[0], ctx.pmax))
        lt = np.where(p_sat > ctx.pmax, cut, hi)
    out = _rate(_fill(lt, x, u, ctx), x, ctx)
    return np.where(ok, out, 0.0)


def max_rates(scenario: Scenario, X, X_ref=None) -> np.ndarray:
    """Highest rate each device reaches with its whole budget on assignment X."""
    c = scenario.constants
    X = np.asarray(X, dtype=float)
    if X_ref is None and is_binary(X):
        bbar = c.subcarrier_bandwidth_hz
        return waterfill_power(c.noise_psd_w_per_hz * bbar / scenario.gains, X, c.p_max_w, bbar)
    X_ref = X if X_ref is None else X_ref
    a, b = cap_coefficients(X_ref, c.taylor_power_q, c.p_max_w)
    u = np.maximum(a * X - b, 0.0)
    ctx = _context(scenario, np.ones(scenario.n), 0.0, np.zeros(scenario.n), 0.0)
    return _max_rate_rows(X, u, ctx)


def _row_energy(scenario, rows, X_rows, r_min, bits):
    """Least transmit energy bits*P/r of each (device, binary assignment row) pair; inf if unreachable."""
    c, bbar, n0 = _scalars(scenario)
    X_rows = np.asarray(X_rows, dtype=float)
    P, level = waterfill_rate(n0 * bbar / scenario.gains[rows], X_rows, r_min, bbar)
    psum = P.sum(axis=1)
    ok = np.isfinite(level) & (psum <= c.p_max_w * (1 + 1e-12))
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(r_min > 0, bits[rows] * psum / np.where(r_min > 0, r_min, 1.0), 0.0)
    return np.where(ok, e, np.inf)


def repair_assignment(scenario: Scenario, X, r_min, rho: float):
    """Move subcarriers to devices whose rate floor is out of reach on a binary X.

    Donors must stay able to meet their own floor; among those the one whose
    energy rises least gives up a subcarrier. Returns (X, moves); raises
    InfeasibleError when a starving device cannot be helped.
    """
    X = np.asarray(X, dtype=float).copy()
    r_min = np.asarray(r_min, dtype=float)
    n, k = X.shape
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    moves = 0
    for _ in range(k + 1):
        base = _row_energy(scenario, np.arange(n), X, r_min, bits)
        bad = np.flatnonzero(~np.isfinite(base))
        if not bad.size:
            return X, moves
        d = int(bad[0])
        free = np.flatnonzero(X.sum(axis=0) == 0)
        if free.size:
            j = int(free[np.argmax(scenario.gains[d, free])])
        else:
            owner = np.argmax(X, axis=0)
            cols = np.flatnonzero(owner != d)
            if not cols.size:
                raise InfeasibleError(f"device {d}: rate floor unreachable even with every subcarrier", device=d)
            donors = owner[cols]
            rows = X[donors].copy()
            rows[np.arange(cols.size), cols] = 0.0
            after = _row_energy(scenario, donors, rows, r_min[donors], bits)
            with np.errstate(invalid="ignore"):
                rise = np.where(np.isfinite(after), after - base[donors], np.inf)
            if not np.any(np.isfinite(rise)):
                raise InfeasibleError(f"device {d}: no donor can spare a subcarrier", device=d)
            order = np.lexsort((-scenario.gains[d, cols], rise))
            j = int(cols[order[0]])
            X[owner[j], j] = 0.0
        X[d, j] = 1.0
        moves += 1
    raise InfeasibleError("assignment repair did not converge")


def reassign_subcarriers(scenario: Scenario, X, r_min, rho: float, max_moves: int | None = None):
    """Greedy single-subcarrier moves on a binary assignment at fixed rate floors.

    Each move hands one subcarrier to another device when that lowers the
    summed least transmit energy; stops when no move helps. Returns (X, moves).
    """
    X = np.asarray(X, dtype=float).copy()
    r_min = np.asarray(r_min, dtype=float)
    n, k = X.shape
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    devices = np.arange(n)
    max_moves = n * k if max_moves is None else max_moves

    def refresh(dev):
        # energy of dev's row without each owned subcarrier / with each foreign one
        rows = np.repeat(dev, k)
        cand = np.repeat(X[dev], k, axis=0)
        flip = np.tile(np.eye(k), (len(dev), 1))
        cand = np.where(flip > 0, 1.0 - cand, cand)
        return _row_energy(scenario, rows, cand, r_min[rows], bits).reshape(len(dev), k)

    base = _row_energy(scenario, devices, X, r_min, bits)
    flipped = refresh(devices)
    moves = 0
    while moves < max_moves:
        owner = np.argmax(X, axis=0)
        owned = X.max(axis=0) > 0
        # gain of moving subcarrier j from owner[j] to device d
        lose = np.where(owned, flipped[owner, np.arange(k)] - base[owner], np.inf)
        gain = flipped - base[:, None]
        delta = gain + lose[None, :]
        delta[owner, np.arange(k)] = np.inf
        d, j = np.unravel_index(np.argmin(delta), delta.shape)
        if not np.isfinite(delta[d, j]) or delta[d, j] >= -1e-12 * max(base.sum(), 1e-300):
            break
        src = owner[j]
        X[src, j] = 0.0
        X[d, j] = 1.0
        changed = np.array([src, d])
        base[changed] = _row_energy(scenario, changed, X[changed], r_min[changed], bits)
        flipped[changed] = refresh(changed)
        moves += 1
    return X, moves


def is_binary(X, tol: float = 0.0) -> bool:
    X = np.asarray(X)
    return bool(np.all((np.abs(X) <= tol) | (np.abs(X - 1) <= tol)))


def resolve_multipliers(scenario: Scenario, X_ref, y, rho: float, r_min, penalty: float,
                        weights: Weights, P_start=None, X_start=None, freeze_assign: bool = False,
                        config: PowerAssignConfig | None = None):
    """Solve the y-fixed subproblem. Returns (Multipliers, P, X, sigma, info)."""
    cfg = config or PowerAssignConfig()
    c = scenario.constants
    X_ref = np.asarray(X_ref, dtype=float)
    x = X_ref.copy() if X_start is None else np.asarray(X_start, dtype=float).copy()
    ctx = _context(scenario, y, rho, r_min, weights.kappa1)
    a, b = cap_coefficients(X_ref, c.taylor_power_q, c.p_max_w)
    cost = penalty * (1 - 2 * X_ref)
    # with a binary reference the assignment block has a closed-form answer:
    # owned links gain from x (reward and rate), the rest only pay
    skip_x = freeze_assign or is_binary(X_ref)
    if skip_x:
        x = X_ref.copy()
    sweeps = 0
    shift = np.zeros(scenario.k)
    p = None
    used_pg = False
    for sweeps in range(1, cfg.inner_sweeps + 1):
        u = np.maximum(a * x - b, 0.0)
        p_new, info = _solve_power(x, u, ctx)
        if skip_x:
            p = p_new
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            lower = np.where(a > 0, np.clip((p_new + b) / np.where(a > 0, a, 1.0), 0.0, 1.0), 0.0)
        lower = np.minimum(lower, x)
        x_new, shift = _solve_assignment(p_new, x, lower, ctx, cost, cfg.pg_iters)
        used_pg = True
        change = max(np.max(np.abs(x_new - x)),
                     0.0 if p is None else np.max(np.abs(p_new - p)) / c.p_max_w)
        p, x = p_new, x_new
        if change <= cfg.inner_tol:
            break
    if not skip_x:
        # final power pass so p is exactly optimal for the returned x
        u = np.maximum(a * x - b, 0.0)
        p, info = _solve_power(x, u, ctx)
    sigma = _sigma_from(p, x, ctx)
    u = np.maximum(a * x - b, 0.0)
    mult = _power_multipliers(p, x, u, sigma, ctx, info)
    if not skip_x:
        mult.beta = np.maximum(shift, 0.0)
    return mult, p, x, sigma, dict(sweeps=sweeps, used_pg=used_pg, cap=u)


def solve_power_assignment(scenario: Scenario, freq, rho: float, deadline: float, init_P, init_X,
                           weights: Weights, config: PowerAssignConfig | None = None,
                           freeze_assign: bool = False, r_min=None):
    """Successive-approximation loop over y, the cap linearisation and the penalty.

    Returns (P, X, sigma, PowerAssignReport).
    """
    cfg = config or PowerAssignConfig()
    if r_min is None:
        r_min = rate_floor(scenario, rho, deadline, freq).r_min
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    P = np.asarray(init_P, dtype=float).copy()
    X = np.asarray(init_X, dtype=float).copy()
    kappa1 = weights.kappa1
    report = PowerAssignReport()

    rates = np.sum(X * link_rates(scenario, P), axis=1)
    if is_binary(X) and np.any(rates < np.asarray(r_min) * (1 - 1e-12)):
        # start below the floors: the transform weight y would be inconsistent,
        # so begin from the least-power point that meets them
        P, _ = min_power_for_rates(scenario, X, r_min)
        rates = np.sum(X * link_rates(scenario, P), axis=1)
    psum = P.sum(axis=1)
    traffic = bits > 0
    if np.any(traffic & ((rates <= 0) | (psum <= 0))):
        d = int(np.flatnonzero(traffic & ((rates <= 0) | (psum <= 0)))[0])
        raise InfeasibleError(f"device {d}: starting point has no uplink", device=d)
    sigma = np.where(traffic, psum * bits / np.where(rates > 0, rates, 1.0), 0.0)
    penalty = cfg.penalty_start
    X_ref = X.copy()
    h = kappa1 * sigma.sum() + penalty * binary_gap(X)
    eps1 = cfg.eps1_rel * max(abs(h), 1e-300)
    phase = 0
    report.h_trace.append(h)
    report.phase.append(phase)
    mult = None
    y = np.ones(scenario.n)
    for it in range(1, cfg.i_max + 1):
        y = np.where(traffic & (psum > 0), 1.0 / (2 * np.maximum(psum, 1e-300) * np.maximum(sigma, 1e-300)), 1.0)
        mult, P, X, sigma, info = resolve_multipliers(
            scenario, X_ref, y, rho, r_min, penalty, weights, P_start=P, X_start=X,
            freeze_assign=freeze_assign, config=cfg)
        report.sweeps += info["sweeps"]
        report.fallback_used |= info["used_pg"]
        psum = P.sum(axis=1)
        h_new = kappa1 * sigma.sum() - penalty * binarity_penalty(X, X_ref)
        if h_new > h + cfg.monotone_jitter * max(1.0, abs(h)):
            report.warnings.append(f"h increased at iteration {it}: {h:.12g} -> {h_new:.12g}")
        report.h_trace.append(h_new)
        report.phase.append(phase)
        report.iterations = it
        X_ref = X.copy()
        if abs(h_new - h) <= eps1:
            gap = binary_gap(X)
            if gap > cfg.binary_tol and penalty < cfg.penalty_cap and not freeze_assign:
                penalty = min(penalty * cfg.penalty_growth, cfg.penalty_cap)
                phase += 1
                h = kappa1 * sigma.sum() + penalty * gap
                report.h_trace.append(h)
                report.phase.append(phase)
                continue
            report.converged = True
            h = h_new
            break
        h = h_new

    report.binary_gap = binary_gap(X)
    report.penalty = penalty
    report.multipliers = mult
    report.state = PowerAssignState(P, X, sigma, y, penalty, report.iterations, h)
    report.kkt = power_assignment_kkt(scenario, P, X, X_ref, sigma, y, mult, rho, r_min, penalty, kappa1,
                                      freeze_assign=freeze_assign)
    return P, X, sigma, report


def power_assignment_kkt(scenario: Scenario, P, X, X_ref, sigma, y, mult: Multipliers, rho, r_min,
                         penalty, kappa1, freeze_assign: bool = False) -> dict:
    """Relative KKT residuals of the y-fixed subproblem at (P, X, sigma).

    X_ref is the linearisation point the multipliers belong to (the last
    iterate when called after convergence).
    """
    c, bbar, n0 = _scalars(scenario)
    ctx = _context(scenario, y, rho, r_min, kappa1)
    P = np.asarray(P, dtype=float)
    X = np.asarray(X, dtype=float)
    traffic = ctx.bits > 0
    a, b = cap_coefficients(X_ref, c.taylor_power_q, c.p_max_w)
    u = np.maximum(a * X - b, 0.0)
    psum = P.sum(axis=1)
    R = _rate(P, X, ctx)
    res = {}
    if kappa1 > 0:
        nu = mult.nu
        # p-stationarity through the closed-form assignment
        interior = (P > 0) & (P < u * (1 - 1e-9)) & (X > 0)
        xh = x_hat_all(mult, P, scenario, rho, y)
        res["power_stationarity"] = float(np.max(np.where(interior, np.abs(xh - X) / np.maximum(X, 1e-300), 0.0),
                                                 initial=0.0))
        slope = X * bbar / (LN2 * (ctx.h + P))
        price = mult.omega + 2 * nu * ctx.y * ctx.bits * psum
        zero = (P <= 0) & (X > 0) & (u > 0)
        excess = ((mult.lam + nu)[:, None] * slope - price[:, None]) / price[:, None]
        res["power_dual_feasibility"] = float(np.max(np.where(zero, np.maximum(excess, 0.0), 0.0), initial=0.0))
        sh = np.where(traffic, sigma_hat(np.where(traffic, nu, 1.0), y, np.where(traffic, ctx.bits, 1.0), kappa1), 0.0)
        res["sigma_stationarity"] = float(np.max(np.where(traffic, np.abs(sh - sigma) / np.maximum(sigma, 1e-300), 0.0)))
        lhs = (psum ** 2 * ctx.y + 1.0 / (4 * ctx.y * np.maximum(sigma, 1e-300) ** 2)) * ctx.bits
        res["epigraph_slackness"] = float(np.max(np.where(traffic, np.abs(lhs - R) / np.maximum(R, 1e-300), 0.0)))
        price = mult.omega + 2 * nu * ctx.y * ctx.bits * psum
        price = np.where(price > 0, price, 1.0)
        lam_share = mult.lam / np.where(mult.lam + nu > 0, mult.lam + nu, 1.0)
        res["floor_slackness"] = float(np.max(lam_share * np.abs(R - ctx.r_min) / np.maximum(ctx.r_min, 1e-300)))
        res["budget_slackness"] = float(np.max(mult.omega / price * np.abs(c.p_max_w - psum) / c.p_max_w))
        res["cap_slackness"] = float(np.max(mult.iota / price[:, None] * np.abs(u - P) / c.p_max_w))
        res["nu_positive"] = float(np.max(np.where(traffic & (nu <= 0), 1.0, 0.0)))
    # assignment side: sign conditions at the bounds, stationarity inside
    if not freeze_assign:
        rl = bbar * np.log1p(P / ctx.h) / LN2
        grad = (penalty * (1 - 2 * np.asarray(X_ref)) + mult.beta[None, :]
                - mult.iota * a - (mult.lam + mult.nu)[:, None] * rl)
        scale = np.maximum(np.abs(penalty * (1 - 2 * np.asarray(X_ref))) + (mult.lam + mult.nu)[:, None] * rl, 1e-300)
        lower = np.where(a > 0, np.clip((P + b) / np.where(a > 0, a, 1.0), 0.0, 1.0), 0.0)
        at_top = X >= 1 - 1e-12
        at_low = X <= lower + 1e-12
        free = ~at_top & ~at_low
        viol = np.where(free, np.abs(grad), np.where(at_top, np.maximum(grad, 0.0), np.maximum(-grad, 0.0)))
        res["assign_stationarity"] = float(np.max(viol / scale))
    # primal side
    res["floor_violation"] = float(np.max(np.maximum(ctx.r_min - R, 0.0) / np.maximum(ctx.r_min, 1e-300)))
    res["budget_violation"] = float(max(0.0, np.max(psum - c.p_max_w)) / c.p_max_w)
    res["cap_violation"] = float(max(0.0, np.max(P - np.maximum(a * X - b, 0.0))) / c.p_max_w)
    res["exclusive_violation"] = float(max(0.0, np.max(X.sum(axis=0) - 1.0)))
    return res


# ---------------------------------------------------------------------------

def _round_columns(X, gains, threshold):
    n, k = X.shape
    out = np.zeros_like(X)
    for j in range(k):
        col = X[:, j]
        best = col.max()
        if best <= threshold:
            continue
        cand = np.flatnonzero(col >= best - 1e-12)
        if cand.size > 1:
            # higher gain first, then lower index
            cand = cand[np.lexsort((cand, -gains[cand, j]))]
        out[cand[0], j] = 1.0
    return out


def _grant(Xb, gains, d):
    """Give device d one more subcarrier: a free one if any, else from the richest owner."""
    free = np.flatnonzero(Xb.sum(axis=0) == 0)
    if free.size:
        j = free[np.argmax(gains[d, free])]
        Xb[d, j] = 1.0
        return True
    counts = Xb.sum(axis=1)
    donors = [i for i in np.argsort(-counts, kind="stable") if i != d and counts[i] >= 2]
    if not donors:
        return False
    cols = np.flatnonzero(Xb[donors[0]] > 0)
    # take the donor link that matters least to the donor relative to d
    j = cols[np.argmax(gains[d, cols] / gains[donors[0], cols])]
    Xb[donors[0], j] = 0.0
    Xb[d, j] = 1.0
    return True


def round_and_polish(scenario: Scenario, P, X, freq, rho: float, deadline: float, weights: Weights,
                     threshold: float = 0.5, config: PowerAssignConfig | None = None):
    """Binary assignment from the relaxed one, then a power-only pass.

    Returns (P, X_binary, sigma, report, repaired_devices).
    """
    c = scenario.constants
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    Xb = _round_columns(X, scenario.gains, threshold)
    bits = scenario.upload_bits + rho * scenario.semcom_bits
    r_min = rate_floor(scenario, rho, deadline, freq).r_min
    repaired = []
    for _ in range(scenario.k + scenario.n):
        starving = np.flatnonzero((bits > 0) & (Xb.sum(axis=1) == 0))
        if starving.size:
            d = int(starving[0])
            if not _grant(Xb, scenario.gains, d):
                raise InfeasibleError(f"device {d}: no subcarrier left to repair with", device=d)
            repaired.append(d)
            continue
        P0 = np.where(Xb > 0, P, 0.0)
        # devices that lost all their power need a fresh start point
        empty = P0.sum(axis=1) <= 0
        counts = np.maximum(Xb.sum(axis=1), 1)
        P0 = np.where(empty[:, None], Xb * c.p_max_w / counts[:, None], P0)
        try:
            Pn, Xn, sigma, rep = solve_power_assignment(scenario, freq, rho, deadline, P0, Xb, weights,
                                                        config=config, freeze_assign=True, r_min=r_min)
            return Pn, Xn, sigma, rep, repaired
        except InfeasibleError as err:
            if err.device is None or not _grant(Xb, scenario.gains, err.device):
                raise
            repaired.append(err.device)
    raise InfeasibleError("repair budget exhausted")
