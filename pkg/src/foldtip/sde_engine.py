"""Euler-Maruyama integration of the noisy drifting saddle-node normal form.

    dx = (a - x**2) dt + sigma dW,    da = -epsilon dt

Single paths and fixed-size ensembles are supported.  An ensemble member
that crosses ``x_threshold`` counts as escaped exactly once, in that step,
and is then re-initialized (``resample_survivors``, ``gaussian_at_node``) or
frozen (``absorb``).

Noise for member ``i`` is drawn from its own stream
``streams.stream(seed, NOISE, i)`` in blocks; re-initialization choices come
from ``streams.stream(seed, CONTROL)`` in member-index order.  Results are
therefore independent of block length and of the serial/parallel kernel.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Protocol, Union

import numba
import numpy as np

from . import streams
from .errors import IntegrationError, ParameterError

RESAMPLE = "resample_survivors"
GAUSSIAN = "gaussian_at_node"
ABSORB = "absorb"
REINIT_MODES = (RESAMPLE, GAUSSIAN, ABSORB)

# Variance of the Gaussian re-initialization around sqrt(a): "paper" is
# sigma**2/sqrt(a) as stated for the method, "ou" the stationary variance
# sigma**2/(4 sqrt(a)) of the linearized process.
NODE_VARIANCES = ("paper", "ou")

_TARGET_BLOCK_DRAWS = 1 << 21


class EpsilonSampler(Protocol):
    def draw(self, generator: np.random.Generator, size: int) -> np.ndarray: ...


Epsilon = Union[float, EpsilonSampler]


@dataclass(frozen=True)
class NormalFormParams:
    """Parameters of the drifting normal form.

    ``epsilon`` is either a constant drift rate or a sampler; sampled rates
    are held for ``epsilon_interval`` time units (the data spacing).
    """

    a0: float
    epsilon: Epsilon = 0.0
    sigma: float = 1.0
    x_threshold: float = -5.0
    x0: float | None = None
    epsilon_interval: float | None = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ParameterError(f"sigma must be non-negative, got {self.sigma}")
        if self.a0 > 0 and not self.x_threshold < -math.sqrt(self.a0):
            raise ParameterError(
                f"x_threshold {self.x_threshold} must lie below the saddle at {-math.sqrt(self.a0):.6g}"
            )
        if not self.constant_epsilon and not (self.epsilon_interval and self.epsilon_interval > 0):
            raise ParameterError("a sampled epsilon needs a positive epsilon_interval")

    @property
    def constant_epsilon(self) -> bool:
        return isinstance(self.epsilon, (int, float, np.floating, np.integer))

    @property
    def start(self) -> float:
        if self.x0 is not None:
            return float(self.x0)
        return math.sqrt(self.a0) if self.a0 > 0 else 0.0


@dataclass(frozen=True)
class SimConfig:
    step: float = 0.01
    ensemble_size: int = 400
    seed: int = 0
    reinit_mode: str = RESAMPLE
    node_variance: str = "paper"
    parallel: bool = False

    def __post_init__(self):
        if not self.step > 0:
            raise ParameterError(f"step must be positive, got {self.step}")
        if int(self.ensemble_size) < 2:
            raise ParameterError("ensemble_size must be at least 2")
        if self.reinit_mode not in REINIT_MODES:
            raise ParameterError(f"reinit_mode must be one of {REINIT_MODES}")
        if self.node_variance not in NODE_VARIANCES:
            raise ParameterError(f"node_variance must be one of {NODE_VARIANCES}")
        streams.check_seed(self.seed)


@dataclass
class EnsembleTrace:
    times: np.ndarray
    a_values: np.ndarray
    escape_counts: np.ndarray
    survivor_fraction_log: np.ndarray
    ensemble_size: int
    depleted: bool = False

    @property
    def cumulative_escape(self) -> np.ndarray:
        return -np.expm1(self.survivor_fraction_log)

    def escape_a(self, levels) -> np.ndarray:
        """Value of ``a`` at which the cumulative escape first reaches each level (0..1).

        Linear interpolation between recorded steps; NaN where a level is
        never reached.
        """
        p = self.cumulative_escape
        a = self.a_values
        out = np.full(len(levels), np.nan)
        for j, level in enumerate(levels):
            idx = int(np.searchsorted(p, level, side="left"))
            if idx >= p.size:
                continue
            if idx == 0:
                out[j] = a[0]
                continue
            p0, p1 = p[idx - 1], p[idx]
            frac = (level - p0) / (p1 - p0) if p1 > p0 else 1.0
            out[j] = a[idx - 1] + frac * (a[idx] - a[idx - 1])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,a,n_escaped,cum_escape_prob\n")
        for t, a, n, p in zip(self.times, self.a_values, self.escape_counts, self.cumulative_escape):
            buf.write(f"{float(t)!r},{float(a)!r},{int(n)},{float(p)!r}\n")
        return buf.getvalue()


@dataclass
class PathResult:
    t: np.ndarray
    x: np.ndarray
    a: np.ndarray
    escaped_at: float | None


@dataclass
class FirstEscapes:
    """First-passage data of an absorbing ensemble (NaN where no escape)."""

    times: np.ndarray
    a_values: np.ndarray


def wiener_increments(count: int, step: float, stream: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. N(0, step) increments drawn from ``stream``."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    if not step > 0:
        raise ParameterError("step must be positive")
    return math.sqrt(step) * stream.standard_normal(count)


# --- kernels -----------------------------------------------------------------


def _advance_impl(x, a, alive, hit, escaped, eps, hold, noise, n0, n1, h, noise_amp, x_th,
                  absorb, stop_on_escape, step_base, esc_step, esc_a, esc_count, hit_count, a_mean):
    n_members = x.size
    for n in range(n0, n1):
        col = n // hold
        ne = 0
        nh = 0
        total = 0.0
        for i in range(n_members):
            ai = a[i]
            if alive[i]:
                xi = x[i] + (ai - x[i] * x[i]) * h + noise_amp * noise[i, n]
                if not math.isfinite(xi):
                    return -(n + 1)
                x[i] = xi
                if xi < x_th:
                    escaped[i] = True
                    ne += 1
            ai = ai - eps[i, col] * h
            a[i] = ai
            total += ai
            if escaped[i] and absorb and alive[i]:
                alive[i] = False
                esc_step[i] = step_base + n + 1
                esc_a[i] = ai
            if ai <= 0.0 and not hit[i]:
                hit[i] = True
                nh += 1
        esc_count[n] = ne
        hit_count[n] = nh
        a_mean[n] = total / n_members
        if stop_on_escape and ne > 0:
            return n + 1
    return n1


_advance_serial = numba.njit(cache=True, nogil=True)(_advance_impl)


@numba.njit(cache=True, parallel=True)
def _advance_parallel(x, a, alive, hit, escaped, eps, hold, noise, n0, n1, h, noise_amp, x_th,
                      absorb, stop_on_escape, step_base, esc_step, esc_a, esc_count, hit_count, a_mean):
    n_members = x.size
    bad = np.zeros(n_members, dtype=np.bool_)
    new_esc = np.zeros(n_members, dtype=np.bool_)
    new_hit = np.zeros(n_members, dtype=np.bool_)
    for n in range(n0, n1):
        col = n // hold
        for i in numba.prange(n_members):
            new_esc[i] = False
            new_hit[i] = False
            ai = a[i]
            if alive[i]:
                xi = x[i] + (ai - x[i] * x[i]) * h + noise_amp * noise[i, n]
                if not math.isfinite(xi):
                    bad[i] = True
                x[i] = xi
                if xi < x_th:
                    escaped[i] = True
                    new_esc[i] = True
            ai = ai - eps[i, col] * h
            a[i] = ai
            if escaped[i] and absorb and alive[i]:
                alive[i] = False
                esc_step[i] = step_base + n + 1
                esc_a[i] = ai
            if ai <= 0.0 and not hit[i]:
                hit[i] = True
                new_hit[i] = True
        # fixed-order reductions keep the result schedule independent
        ne = 0
        nh = 0
        total = 0.0
        for i in range(n_members):
            if bad[i]:
                return -(n + 1)
            ne += new_esc[i]
            nh += new_hit[i]
            total += a[i]
        esc_count[n] = ne
        hit_count[n] = nh
        a_mean[n] = total / n_members
        if stop_on_escape and ne > 0:
            return n + 1
    return n1


@numba.njit(cache=True)
def _path_kernel(x0, a0, eps, hold, noise, h, noise_amp, x_th, xs, as_):
    x = x0
    a = a0
    xs[0] = x
    as_[0] = a
    for n in range(noise.size):
        x = x + (a - x * x) * h + noise_amp * noise[n]
        a = a - eps[n // hold] * h
        xs[n + 1] = x
        as_[n + 1] = a
        if not math.isfinite(x):
            return -(n + 1)
        if x < x_th:
            return n + 1
    return noise.size


# --- ensemble driver ---------------------------------------------------------


def _hold_steps(params: NormalFormParams, step: float) -> int:
    if params.constant_epsilon:
        return 0
    ratio = params.epsilon_interval / step
    hold = int(round(ratio))
    if hold < 1 or abs(ratio - hold) > 1e-6 * max(1.0, ratio):
        raise ParameterError(
            f"epsilon_interval {params.epsilon_interval} must be a whole multiple of the step {step}"
        )
    return hold


class _Ensemble:
    """Mutable ensemble state advanced in noise blocks."""

    def __init__(self, params: NormalFormParams, config: SimConfig, x_init: np.ndarray | None = None):
        self.params = params
        self.config = config
        self.n = int(config.ensemble_size)
        self.h = float(config.step)
        self.noise_amp = params.sigma * math.sqrt(self.h)
        self.absorb = config.reinit_mode == ABSORB
        self.x = np.full(self.n, params.start) if x_init is None else np.array(x_init, dtype=float)
        self.a = np.full(self.n, float(params.a0))
        self.alive = np.ones(self.n, dtype=np.bool_)
        self.hit = self.a <= 0.0
        self.escaped = np.zeros(self.n, dtype=np.bool_)
        self.esc_step = np.full(self.n, -1, dtype=np.int64)
        self.esc_a = np.full(self.n, np.nan)
        self.steps = 0
        self.depleted = False

        hold = _hold_steps(params, self.h)
        block = max(256, min(16384, _TARGET_BLOCK_DRAWS // self.n))
        if hold:
            block = max(hold, (block // hold) * hold)
            self.hold = hold
            self.eps_streams = streams.member_streams(config.seed, streams.EPSILON, self.n)
            self.eps = np.empty((self.n, block // hold))
        else:
            self.hold = block
            self.eps_streams = None
            self.eps = np.full((self.n, 1), float(params.epsilon))
        self.block = block
        self.noise_streams = streams.member_streams(config.seed, streams.NOISE, self.n)
        self.noise = np.empty((self.n, block))
        self.pos = block
        self.seg_esc = np.zeros(block, dtype=np.int64)
        self.seg_hit = np.zeros(block, dtype=np.int64)
        self.seg_a = np.zeros(block)
        self.ctrl = streams.stream(config.seed, streams.CONTROL)
        self.kernel = _advance_parallel if config.parallel else _advance_serial

    def _refill(self):
        for row, gen in zip(self.noise, self.noise_streams):
            gen.standard_normal(out=row)
        if self.eps_streams is not None:
            for i, gen in enumerate(self.eps_streams):
                self.eps[i] = self.params.epsilon.draw(gen, self.eps.shape[1])
        self.pos = 0

    def _reinit(self):
        idx = np.flatnonzero(self.escaped)
        survivors = np.flatnonzero(~self.escaped)
        self.escaped[idx] = False
        if survivors.size == 0:
            self.depleted = True
            return
        mode = self.config.reinit_mode
        if mode == GAUSSIAN:
            a_esc = self.a[idx]
            node = a_esc > 0
            root = np.sqrt(a_esc[node])
            var = self.params.sigma**2 / root
            if self.config.node_variance == "ou":
                var = var / 4.0
            self.x[idx[node]] = root + np.sqrt(var) * self.ctrl.standard_normal(root.size)
            # the well is gone for a <= 0: fall back to survivor resampling
            idx = idx[~node]
            if idx.size == 0:
                return
        pick = self.ctrl.integers(0, survivors.size, size=idx.size)
        self.x[idx] = self.x[survivors[pick]]

    def advance(self, n_steps: int):
        """Advance ``n_steps``; returns per-step escape counts, hit counts and mean a.

        Stops early (returning shorter arrays) if a re-initializing ensemble
        is depleted in one step.
        """
        esc = np.zeros(n_steps, dtype=np.int64)
        hits = np.zeros(n_steps, dtype=np.int64)
        amean = np.zeros(n_steps)
        done = 0
        stop_on_escape = not self.absorb
        while done < n_steps and not self.depleted:
            if self.pos == self.block:
                self._refill()
            take = min(n_steps - done, self.block - self.pos)
            seg_esc, seg_hit, seg_a = self.seg_esc, self.seg_hit, self.seg_a
            end = self.kernel(
                self.x, self.a, self.alive, self.hit, self.escaped, self.eps, self.hold, self.noise,
                self.pos, self.pos + take, self.h, self.noise_amp, float(self.params.x_threshold),
                self.absorb, stop_on_escape, self.steps - self.pos,
                self.esc_step, self.esc_a, seg_esc, seg_hit, seg_a,
            )
            if end < 0:
                raise IntegrationError(
                    f"non-finite state at step {self.steps - self.pos - end}; reduce the step size"
                )
            k = end - self.pos
            esc[done : done + k] = seg_esc[self.pos : end]
            hits[done : done + k] = seg_hit[self.pos : end]
            amean[done : done + k] = seg_a[self.pos : end]
            done += k
            self.steps += k
            self.pos = end
            if stop_on_escape and esc[done - 1] > 0:
                self._reinit()
        return esc[:done], hits[:done], amean[:done]


# --- public operations -------------------------------------------------------


def simulate_path(params: NormalFormParams, config: SimConfig, t_end: float) -> PathResult:
    """Integrate one path until ``t_end`` or the first crossing of the threshold.

    Uses the noise (and epsilon) stream of ensemble member 0, so the path
    equals member 0 of an absorbing ensemble with the same seed.
    """
    if not t_end > 0:
        raise ParameterError("t_end must be positive")
    h = config.step
    n_steps = int(math.ceil(t_end / h - 1e-9))
    noise = streams.stream(config.seed, streams.NOISE, 0).standard_normal(n_steps)
    hold = _hold_steps(params, h)
    if hold:
        eps = params.epsilon.draw(streams.stream(config.seed, streams.EPSILON, 0), -(-n_steps // hold))
    else:
        hold = n_steps
        eps = np.array([float(params.epsilon)])
    xs = np.empty(n_steps + 1)
    as_ = np.empty(n_steps + 1)
    end = _path_kernel(params.start, float(params.a0), eps, hold, noise, h,
                       params.sigma * math.sqrt(h), float(params.x_threshold), xs, as_)
    if end < 0:
        raise IntegrationError(f"non-finite state at step {-end}; reduce the step size")
    t = h * np.arange(end + 1)
    x, a = xs[: end + 1], as_[: end + 1]
    escaped_at = float(t[-1]) if x[-1] < params.x_threshold else None
    return PathResult(t=t, x=x, a=a, escaped_at=escaped_at)


def _steps_for(params: NormalFormParams, h: float, a_stop, t_stop) -> int | None:
    limits = []
    if t_stop is not None:
        limits.append(int(math.ceil(t_stop / h - 1e-9)))
    if a_stop is not None and params.constant_epsilon and params.epsilon > 0:
        limits.append(int(math.ceil((params.a0 - a_stop) / (params.epsilon * h) - 1e-9)))
    return min(limits) if limits else None


@np.errstate(divide="ignore")
def run_ensemble(
    params: NormalFormParams,
    config: SimConfig,
    a_stop: float | None = None,
    t_stop: float | None = None,
    p_stop: float | None = None,
    record_every: int = 1,
    max_steps: int = 50_000_000,
) -> EnsembleTrace:
    """Run a fixed-size ensemble and record escapes step by step.

    Stops at the first of: mean ``a <= a_stop``, ``t >= t_stop``, cumulative
    escape ``>= p_stop``, or total depletion (all members escaping in one
    step, flagged by ``depleted``).  With ``record_every > 1`` escape counts
    are summed over groups of steps.
    """
    if a_stop is None and t_stop is None and p_stop is None:
        raise ParameterError("run_ensemble needs at least one stopping rule")
    if record_every < 1:
        raise ParameterError("record_every must be >= 1")
    ens = _Ensemble(params, config)
    h = config.step
    n = ens.n
    budget = _steps_for(params, h, a_stop, t_stop)
    budget = max_steps if budget is None else min(budget, max_steps)

    esc_parts, a_parts = [], []
    log_surv = 0.0
    alive = n
    chunk = max(record_every, (100_000 // record_every) * record_every)
    done = 0
    stopped = False
    while done < budget and not stopped and not ens.depleted:
        esc, _, amean = ens.advance(min(chunk, budget - done))
        cut = esc.size
        if a_stop is not None:
            below = np.flatnonzero(amean <= a_stop + 1e-12 * max(1.0, abs(a_stop)))
            if below.size:
                cut = min(cut, int(below[0]) + 1)
        if p_stop is not None:
            if ens.absorb:
                surv = (alive - np.cumsum(esc)) / n
                logs = np.log(np.maximum(surv, 1e-300))
            else:
                logs = log_surv + np.cumsum(np.log1p(-esc / n))
            over = np.flatnonzero(-np.expm1(logs) >= p_stop)
            if over.size:
                cut = min(cut, int(over[0]) + 1)
        if cut < esc.size:
            stopped = True
        esc, amean = esc[:cut], amean[:cut]
        esc_parts.append(esc)
        a_parts.append(amean)
        alive -= int(esc.sum()) if ens.absorb else 0
        if not ens.absorb:
            log_surv += float(np.sum(np.log1p(-esc / n)))
        done += cut

    esc = np.concatenate(esc_parts) if esc_parts else np.zeros(0, dtype=np.int64)
    amean = np.concatenate(a_parts) if a_parts else np.zeros(0)
    if ens.absorb:
        at_risk = n - np.concatenate(([0], np.cumsum(esc)[:-1]))
        step_log = np.log1p(-esc / np.maximum(at_risk, 1))
    else:
        step_log = np.log1p(-esc / n)
    times = h * np.arange(1, esc.size + 1)

    if record_every > 1 and esc.size:
        ends = np.arange(record_every, esc.size + record_every, record_every).clip(max=esc.size) - 1
        starts = np.concatenate(([0], ends[:-1] + 1))
        esc = np.add.reduceat(esc, starts)
        logs = np.cumsum(step_log)[ends]
        times, amean = times[ends], amean[ends]
    else:
        logs = np.cumsum(step_log)
    return EnsembleTrace(
        times=times,
        a_values=amean,
        escape_counts=esc,
        survivor_fraction_log=logs,
        ensemble_size=n,
        depleted=ens.depleted,
    )


def first_escapes(
    params: NormalFormParams,
    config: SimConfig,
    t_stop: float | None = None,
    a_stop: float | None = None,
) -> FirstEscapes:
    """First-passage times and ``a`` at escape for independent members (no re-initialization)."""
    config = SimConfig(config.step, config.ensemble_size, config.seed, ABSORB, config.node_variance, config.parallel)
    budget = _steps_for(params, config.step, a_stop, t_stop)
    if budget is None:
        raise ParameterError("first_escapes needs t_stop, or a_stop with a constant positive epsilon")
    ens = _Ensemble(params, config)
    done = 0
    while done < budget and ens.alive.any():
        esc, _, _ = ens.advance(min(100_000, budget - done))
        done += esc.size
    times = np.where(ens.esc_step >= 0, ens.esc_step * config.step, np.nan)
    return FirstEscapes(times=times, a_values=ens.esc_a.copy())
