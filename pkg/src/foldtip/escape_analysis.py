"""Frozen-parameter escape rates and the quasi-static escape probability.

All quantities here live in rescaled units (noise amplitude 1).  The escape
rate ``k0(a)`` is measured by simulation for moderate ``a`` and taken from
the large-barrier Kramers asymptote above a switch point; its integral
``K0(a)`` from ``a`` up to ``a_max`` gives the quasi-static cumulative escape
probability ``P_esc(a) = 1 - exp(-K0(a)/epsilon)`` for a parameter drifting
down at speed ``epsilon``.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import streams
from .errors import ParameterError
from .sde_engine import ABSORB, NormalFormParams, SimConfig, _Ensemble, run_ensemble

# Simulation is declined when the asymptotic rate drops below this value:
# too few escapes would be observed at any feasible cost.
RARE_EVENT_RATE = 1e-8

DEFAULT_LEVELS = (5.0, 25.0, 50.0, 75.0, 95.0)


@dataclass(frozen=True)
class EscapeRate:
    k0: float
    stderr: float
    escapes: int
    member_time: float
    upper_bound_only: bool = False
    declined: bool = False


@dataclass
class EscapeTable:
    a_grid: np.ndarray
    k0: np.ndarray
    k0_stderr: np.ndarray
    K0: np.ndarray
    a_max: float = 3.0
    simulated: np.ndarray = field(default=None)
    tail: float = 0.0

    def __post_init__(self):
        self.a_grid = np.asarray(self.a_grid, dtype=float)
        self.k0 = np.asarray(self.k0, dtype=float)
        self.k0_stderr = np.asarray(self.k0_stderr, dtype=float)
        self.K0 = np.asarray(self.K0, dtype=float)
        if self.simulated is None:
            self.simulated = np.zeros(self.a_grid.size, dtype=bool)
        order = np.argsort(self.a_grid)
        self._a = self.a_grid[order]
        self._k0 = self.k0[order]
        self._K0 = self.K0[order]

    def __len__(self):
        return self.a_grid.size

    @property
    def a_range(self) -> tuple[float, float]:
        return float(self._a[0]), float(self._a[-1])

    def k0_at(self, a) -> np.ndarray:
        """Escape rate at ``a``: linear in the table, Kramers above its top, clamped below."""
        a = np.asarray(a, dtype=float)
        inside = np.interp(a, self._a, self._k0)
        above = a > self._a[-1]
        if np.any(above):
            inside = np.where(above, kramers_rate(np.where(above, a, 1.0)), inside)
        return inside

    def K0_at(self, a) -> np.ndarray:
        return np.interp(np.asarray(a, dtype=float), self._a, self._K0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("a,k0,k0_stderr,K0\n")
        for row in zip(self.a_grid, self.k0, self.k0_stderr, self.K0):
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, a_max: float | None = None) -> "EscapeTable":
        rows = [line.split(",") for line in text.strip().splitlines()[1:] if line.strip()]
        arr = np.array(rows, dtype=float).reshape(-1, 4)
        top = float(arr[:, 0].max()) if a_max is None else a_max
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], a_max=top)


@dataclass
class PercentileSurface:
    epsilon_grid: np.ndarray
    percentile_levels: np.ndarray
    a_at_percentile: np.ndarray  # shape (len(epsilon_grid), len(levels)), NaN = unreachable

    @property
    def reachable(self) -> np.ndarray:
        return np.isfinite(self.a_at_percentile)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epsilon,level,a\n")
        for i, eps in enumerate(self.epsilon_grid):
            for j, level in enumerate(self.percentile_levels):
                buf.write(f"{float(eps)!r},{float(level)!r},{float(self.a_at_percentile[i, j])!r}\n")
        return buf.getvalue()


def kramers_rate(a):
    """Large-barrier escape rate of ``dx = (a - x**2) dt + dW``.

    Kramers' formula for the cubic potential ``U = -a x + x**3/3`` with
    diffusion 1/2: curvature ``2 sqrt(a)`` at both the node and the saddle,
    barrier ``(4/3) a**1.5``, giving ``(sqrt(a)/pi) exp(-(8/3) a**1.5)``.
    """
    a_arr = np.asarray(a, dtype=float)
    if np.any(a_arr <= 0):
        raise ParameterError("the Kramers rate is defined only for a > 0")
    out = np.sqrt(a_arr) / math.pi * np.exp(-8.0 / 3.0 * a_arr**1.5)
    return float(out) if out.ndim == 0 else out


def escape_rate_frozen(
    a: float,
    config: SimConfig,
    burn_in: float = 20.0,
    measure: float = 100.0,
    x_threshold: float = -5.0,
) -> EscapeRate:
    """Measure the steady escape rate of the frozen rescaled normal form.

    The ensemble starts at the node (or 0 when ``a <= 0``), escaped members
    are put back per ``config.reinit_mode``, and after ``burn_in`` the
    escapes over ``measure`` time units give ``k0 = count/(N*measure)`` with
    Poisson standard error.  Rates too small to observe are declined.
    """
    if config.reinit_mode == ABSORB:
        raise ParameterError("escape rates need a re-initializing ensemble")
    if burn_in < 0 or not measure > 0:
        raise ParameterError("burn_in must be >= 0 and measure > 0")
    if a > 0 and kramers_rate(a) < RARE_EVENT_RATE:
        return EscapeRate(math.nan, math.nan, 0, 0.0, declined=True)
    params = NormalFormParams(a0=a, epsilon=0.0, sigma=1.0, x_threshold=x_threshold)
    ens = _Ensemble(params, config)
    h = config.step
    burn_steps = int(round(burn_in / h))
    measure_steps = int(round(measure / h))
    chunk = 200_000
    done = 0
    while done < burn_steps and not ens.depleted:
        esc, _, _ = ens.advance(min(chunk, burn_steps - done))
        done += esc.size
    count = 0
    done = 0
    while done < measure_steps and not ens.depleted:
        esc, _, _ = ens.advance(min(chunk, measure_steps - done))
        count += int(esc.sum())
        done += esc.size
    member_time = ens.n * done * h
    if member_time == 0:
        raise ParameterError("ensemble depleted before measurement started; increase ensemble_size")
    if count == 0:
        return EscapeRate(0.0, 1.0 / member_time, 0, member_time, upper_bound_only=True)
    return EscapeRate(count / member_time, math.sqrt(count) / member_time, count, member_time)


def _grid_key(a: float) -> int:
    # grid-independent stream index: the same a always gets the same stream
    return int(round(a * 1e6)) + (1 << 40)


def _measure_time(a: float, n: int, target: float, lo: float, hi: float) -> float:
    guess = kramers_rate(a) if a >= 0.5 else 0.1
    return float(min(max(target / (n * guess), lo), hi))


def build_escape_table(
    a_grid,
    config: SimConfig,
    a_max: float = 3.0,
    hybrid_switch: float = 2.5,
    burn_in: float = 20.0,
    measure: float | None = None,
    target_escapes: float = 2000.0,
    min_measure: float = 50.0,
    max_measure: float = 2000.0,
    tail: bool = False,
    x_threshold: float = -5.0,
    workers: int = 1,
) -> EscapeTable:
    """Tabulate ``k0`` on ``a_grid`` and integrate it into ``K0(a) = int_a^a_max k0``.

    Points below ``hybrid_switch`` are simulated (each with its own derived
    seed), points at or above it use :func:`kramers_rate`.  With ``measure``
    unset, each point's measuring time aims at ``target_escapes`` escapes,
    clipped to ``[min_measure, max_measure]``.  ``K0`` uses the trapezoid
    rule on the grid (with ``a_max`` appended as a node if missing); ``tail``
    adds the analytic Kramers integral from ``a_max`` to infinity.
    """
    grid = np.asarray(a_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ParameterError("a_grid must be a non-empty 1-D sequence")
    steps = np.diff(grid)
    if grid.size > 1 and not (np.all(steps > 0) or np.all(steps < 0)):
        raise ParameterError("a_grid must be strictly monotone")
    if grid.max() > a_max:
        raise ParameterError(f"a_grid exceeds a_max={a_max}")

    nodes = np.sort(grid)
    if nodes[-1] < a_max:
        nodes = np.append(nodes, a_max)

    def point(a: float):
        if a >= hybrid_switch:
            return kramers_rate(a), 0.0, False
        cfg = SimConfig(config.step, config.ensemble_size,
                        streams.child_seed(config.seed, streams.GRID, _grid_key(a)),
                        config.reinit_mode, config.node_variance, config.parallel)
        t = measure if measure is not None else _measure_time(a, cfg.ensemble_size, target_escapes, min_measure, max_measure)
        r = escape_rate_frozen(a, cfg, burn_in=burn_in, measure=t, x_threshold=x_threshold)
        if r.declined:
            return kramers_rate(a), 0.0, False
        return r.k0, r.stderr, True

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(point, nodes))
    else:
        results = [point(a) for a in nodes]
    k0 = np.array([r[0] for r in results])
    err = np.array([r[1] for r in results])
    sim = np.array([r[2] for r in results])

    seg = 0.5 * (k0[1:] + k0[:-1]) * np.diff(nodes)
    K0 = np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))
    tail_value = 0.0
    if tail:
        tail_value = float(integrate.quad(kramers_rate, a_max, np.inf)[0])
        K0 = K0 + tail_value

    pos = np.searchsorted(nodes, grid)
    return EscapeTable(grid, k0[pos], err[pos], K0[pos], a_max=float(a_max), simulated=sim[pos], tail=tail_value)


def table_from_rates(a_grid, k0, a_max: float | None = None, tail: bool = False) -> EscapeTable:
    """Build a table from given rates (e.g. an external or analytic k0)."""
    a = np.asarray(a_grid, dtype=float)
    k = np.asarray(k0, dtype=float)
    order = np.argsort(a)
    a_s, k_s = a[order], k[order]
    top = float(a_s[-1]) if a_max is None else float(a_max)
    if top > a_s[-1]:
        raise ParameterError("a_max beyond the supplied grid")
    seg = 0.5 * (k_s[1:] + k_s[:-1]) * np.diff(a_s)
    K = np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))
    tail_value = float(integrate.quad(kramers_rate, top, np.inf)[0]) if tail else 0.0
    K = K + tail_value
    K_out = np.empty_like(K)
    K_out[order] = K
    return EscapeTable(a, k, np.zeros_like(k), K_out, a_max=top, tail=tail_value)


class QuasiStaticCDF:
    """``a -> 1 - exp(-K0(a)/epsilon)`` evaluated on an escape table."""

    def __init__(self, table: EscapeTable, epsilon: float):
        if not epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {epsilon}")
        self.table = table
        self.epsilon = float(epsilon)

    def evaluate(self, a):
        """Return ``(P_esc, clamped)``; ``clamped`` marks points outside the table."""
        a = np.asarray(a, dtype=float)
        lo, hi = self.table.a_range
        clamped = (a < lo) | (a > hi)
        p = -np.expm1(-self.table.K0_at(np.clip(a, lo, hi)) / self.epsilon)
        return p, clamped

    def __call__(self, a):
        return self.evaluate(a)[0]


def quasistatic_escape_cdf(table: EscapeTable, epsilon: float) -> QuasiStaticCDF:
    return QuasiStaticCDF(table, epsilon)


def percentile_surface(table: EscapeTable, epsilon_grid, levels=DEFAULT_LEVELS) -> PercentileSurface:
    """Invert the quasi-static CDF: the ``a`` at which each escape percentile is reached."""
    eps = np.asarray(epsilon_grid, dtype=float)
    lev = np.asarray(levels, dtype=float)
    if np.any(eps <= 0):
        raise ParameterError("epsilon values must be positive")
    if np.any((lev <= 0) | (lev >= 100)) or np.any(np.diff(lev) <= 0):
        raise ParameterError("levels must be strictly increasing within (0, 100)")
    a_nodes = table._a[::-1]  # descending a, K0 ascending
    K_nodes = table._K0[::-1]
    out = np.full((eps.size, lev.size), np.nan)
    for i, e in enumerate(eps):
        target = -e * np.log1p(-lev / 100.0)
        ok = (target <= K_nodes[-1]) & (target >= K_nodes[0])
        out[i, ok] = np.interp(target[ok], K_nodes, a_nodes)
    return PercentileSurface(eps, lev, out)


def dynamic_percentile_surface(
    epsilon_grid,
    config: SimConfig,
    levels=DEFAULT_LEVELS,
    a0: float = 3.0,
    x_threshold: float = -5.0,
    a_stop: float = -10.0,
) -> PercentileSurface:
    """Percentiles of escape observed in drifting-parameter ensembles.

    Every epsilon reuses ``config.seed`` so the curves share random numbers
    and vary smoothly in epsilon.
    """
    eps = np.asarray(epsilon_grid, dtype=float)
    lev = np.asarray(levels, dtype=float)
    out = np.full((eps.size, lev.size), np.nan)
    for i, e in enumerate(eps):
        trace = drifting_trace(e, config, a0=a0, x_threshold=x_threshold, a_stop=a_stop, p_stop=lev[-1] / 100.0)
        out[i] = trace.escape_a(lev / 100.0)
    return PercentileSurface(eps, lev, out)


def drifting_trace(epsilon: float, config: SimConfig, a0: float = 3.0, x_threshold: float = -5.0,
                   a_stop: float = -10.0, p_stop: float | None = 0.999, record_every: int = 1):
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    params = NormalFormParams(a0=a0, epsilon=float(epsilon), sigma=1.0, x_threshold=x_threshold)
    return run_ensemble(params, config, a_stop=a_stop, p_stop=p_stop, record_every=record_every)


def rescale_parameters(sigma: float, t, x, a, epsilon):
    """Map original ``(t, x, a, epsilon)`` to units where the noise amplitude is 1."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    s23 = sigma ** (2.0 / 3.0)
    return (
        np.multiply(t, s23),
        np.divide(x, s23),
        np.divide(a, s23 * s23),
        np.divide(epsilon, sigma * sigma),
    )


def inverse_rescale(sigma: float, t, x, a, epsilon):
    """Inverse of :func:`rescale_parameters`."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    s23 = sigma ** (2.0 / 3.0)
    return (
        np.divide(t, s23),
        np.multiply(x, s23),
        np.multiply(a, s23 * s23),
        np.multiply(epsilon, sigma * sigma),
    )
