"""Map fingerprint output onto the saddle-node normal form and forecast tipping.

Near the fold the record behaves like ``z = Z0 + q*x`` with
``dx = (a - x**2) dt + sigma dW`` and a slowly decreasing ``a``.  The node at
``x = sqrt(a)`` relaxes at rate ``kappa = 2*sqrt(a)``, so each window's decay
rate gives ``a_k = kappa_k**2/4``; the trend ``Z_k = Z0 + q*kappa_k/2`` gives
``q`` and ``Z0`` from two straight-line fits in time; increments of ``a_k``
form the empirical sample of drift speeds ``epsilon``.

The forecast runs the rescaled normal form (noise amplitude 1) with an
independent piecewise-constant epsilon path per ensemble member and returns
two cumulative distributions: ``P_a`` (the parameter has reached 0) and
``P_esc`` (the trajectory has escaped past the threshold).
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import streams
from .errors import InsufficientDataError, NoApproachError, ParameterError
from .escape_analysis import EscapeTable, rescale_parameters
from .fingerprint import FingerprintResult
from .sde_engine import ABSORB, NormalFormParams, SimConfig, _Ensemble

log = logging.getLogger(__name__)

MONTE_CARLO = "monte_carlo"
QUASI_STATIC = "quasi_static"
X_THRESHOLD = -5.0
QUARTILES = (0.25, 0.5, 0.75)
_MAX_ROWS = 5000


@dataclass(frozen=True)
class NormalFormEstimate:
    times: np.ndarray
    a_values: np.ndarray
    q: float
    z0: float
    sigma_z: float
    sigma_nf: float
    epsilon_samples: np.ndarray
    a_last: float
    origin_time: float
    dt: float
    cutoff_time: float
    kappa_slope: float
    kappa_slope_stderr: float
    z_slope: float

    @property
    def a_series(self):
        return list(zip(self.times.tolist(), self.a_values.tolist()))

    @property
    def reflected(self) -> bool:
        """True when the stable branch lies below ``Z0`` (negative ``q``)."""
        return self.q < 0


class EmpiricalSampler:
    """Draws i.i.d. with replacement from a fixed sample."""

    def __init__(self, samples, scale: float = 1.0):
        s = np.asarray(samples, dtype=float)
        if s.ndim != 1 or s.size < 1:
            raise InsufficientDataError("an empirical sampler needs at least one sample")
        self.samples = s * scale
        self.warnings: list[str] = []
        if self.mean <= 0:
            msg = f"mean epsilon {self.mean:.3g} is not positive; P_a may never reach 1 within the horizon"
            self.warnings.append(msg)
            log.warning(msg)

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def std(self) -> float:
        return float(self.samples.std(ddof=1)) if self.samples.size > 1 else 0.0

    def draw(self, generator: np.random.Generator, size: int) -> np.ndarray:
        return self.samples[generator.integers(0, self.samples.size, size=size)]

    def scaled(self, factor: float) -> "EmpiricalSampler":
        out = EmpiricalSampler.__new__(EmpiricalSampler)
        out.samples = self.samples * factor
        out.warnings = list(self.warnings)
        return out


class ConstantSampler:
    """Degenerate sampler, useful for the zero-variance limit."""

    def __init__(self, value: float):
        self.value = float(value)
        self.samples = np.array([self.value])
        self.warnings: list[str] = []

    mean = property(lambda self: self.value)
    std = property(lambda self: 0.0)

    def draw(self, generator: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.value)

    def scaled(self, factor: float) -> "ConstantSampler":
        return ConstantSampler(self.value * factor)


@dataclass
class EscapeForecast:
    times: np.ndarray
    P_a: np.ndarray
    P_esc: np.ndarray
    mode: str
    quartiles_a: list = field(default_factory=list)
    quartiles_esc: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def skewness_a(self) -> float | None:
        return bowley_skewness(self.quartiles_a)

    @property
    def skewness_esc(self) -> float | None:
        return bowley_skewness(self.quartiles_esc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("time,P_a,P_esc\n")
        for t, pa, pe in zip(self.times, self.P_a, self.P_esc):
            buf.write(f"{float(t)!r},{float(pa)!r},{float(pe)!r}\n")
        return buf.getvalue()


# --- estimation ----------------------------------------------------------------


def _consecutive_increments(idx: np.ndarray, a: np.ndarray, dt: float) -> np.ndarray:
    pairs = np.flatnonzero(np.diff(idx) == 1)
    return (a[pairs] - a[pairs + 1]) / dt


def extract_normal_form(fp: FingerprintResult, sigma_source: str = "mean") -> NormalFormEstimate:
    """Estimate ``a_k``, ``q``, ``Z0``, the normal-form noise and the epsilon sample.

    ``sigma_source`` selects the record-mean of ``sigma_z`` (default) or its
    last valid value.  Raises :class:`NoApproachError` when the decay-rate
    trend is smaller than its own standard error.
    """
    if sigma_source not in ("mean", "last"):
        raise ParameterError("sigma_source must be 'mean' or 'last'")
    idx = np.flatnonzero(fp.valid)
    if idx.size < 3:
        raise InsufficientDataError(f"need at least 3 valid fingerprint entries, got {idx.size}")
    t = fp.center_times[idx]
    kappa = fp.kappa[idx]
    z = fp.trend_at_centers[idx]
    half = kappa / 2.0

    k_fit = stats.linregress(t, half)
    if not abs(k_fit.slope) >= k_fit.stderr:
        raise NoApproachError(
            f"decay-rate slope {k_fit.slope:.3g} is within its standard error {k_fit.stderr:.3g}: no approach to a fold"
        )
    z_fit = stats.linregress(t, z)
    q = float(z_fit.slope / k_fit.slope)
    z0 = float(z_fit.intercept - q * k_fit.intercept)

    sz = fp.sigma_z[idx]
    sigma_z = float(sz.mean()) if sigma_source == "mean" else float(sz[-1])
    a = kappa**2 / 4.0
    return NormalFormEstimate(
        times=t,
        a_values=a,
        q=q,
        z0=z0,
        sigma_z=sigma_z,
        sigma_nf=sigma_z / abs(q),
        epsilon_samples=_consecutive_increments(idx, a, fp.dt),
        a_last=float(a[-1]),
        origin_time=float(t[-1]),
        dt=float(fp.dt),
        cutoff_time=float(fp.center_times[-1] + (fp.window // 2 + 1) * fp.dt),
        kappa_slope=float(k_fit.slope),
        kappa_slope_stderr=float(k_fit.stderr),
        z_slope=float(z_fit.slope),
    )


def epsilon_distribution(estimate: NormalFormEstimate, dt: float | None = None) -> EmpiricalSampler:
    """Empirical sampler of ``(a_k - a_{k+1})/dt`` over consecutive valid windows."""
    eps = estimate.epsilon_samples
    if dt is not None:
        if not dt > 0:
            raise ParameterError("dt must be positive")
        eps = eps * (estimate.dt / dt)
    if eps.size < 1:
        raise InsufficientDataError("need at least 2 consecutive valid a_k")
    return EmpiricalSampler(eps)


# --- forecasting ---------------------------------------------------------------


def crossing_times(times: np.ndarray, cdf: np.ndarray, levels=QUARTILES) -> list:
    """First time each level is reached (linear interpolation), ``None`` if never."""
    out = []
    for level in levels:
        k = int(np.searchsorted(cdf, level, side="left"))
        if k >= cdf.size:
            out.append(None)
        elif k == 0:
            out.append(float(times[0]))
        else:
            p0, p1 = cdf[k - 1], cdf[k]
            frac = (level - p0) / (p1 - p0) if p1 > p0 else 1.0
            out.append(float(times[k - 1] + frac * (times[k] - times[k - 1])))
    return out


def bowley_skewness(q) -> float | None:
    if len(q) != 3 or any(v is None for v in q) or q[2] == q[0]:
        return None
    return (q[2] + q[0] - 2.0 * q[1]) / (q[2] - q[0])


def _threshold(a_r: float) -> float:
    # the fixed threshold must lie beyond the saddle; deep wells push it out
    return min(X_THRESHOLD, -2.0 * math.sqrt(max(a_r, 0.0)))


def forecast(
    estimate: NormalFormEstimate,
    sampler,
    config: SimConfig,
    horizon: float,
    mode: str = MONTE_CARLO,
    table: EscapeTable | None = None,
) -> EscapeForecast:
    """Forecast ``P_a`` and ``P_esc`` over ``horizon`` record time units.

    The clock starts at the last valid window centre (where ``a_last`` is
    measured); reported times are absolute record times.  ``config.step`` is
    the largest rescaled integration step; it is reduced so that a whole
    number of steps fits in one data interval and the node stays resolved.
    """
    if not horizon > 0:
        raise ParameterError("horizon must be positive")
    if mode not in (MONTE_CARLO, QUASI_STATIC):
        raise ParameterError(f"mode must be {MONTE_CARLO!r} or {QUASI_STATIC!r}")
    if mode == QUASI_STATIC and table is None:
        raise ParameterError("quasi-static forecasts need an escape table")
    sigma = estimate.sigma_nf
    _, _, a_r, _ = rescale_parameters(sigma, 0.0, 0.0, estimate.a_last, 0.0)
    a_r = float(a_r)
    t_scale = sigma ** (2.0 / 3.0)
    dt_r = estimate.dt * t_scale
    eps_r = sampler.scaled(sigma**-2.0)

    h_max = min(config.step, 0.2 / (2.0 * math.sqrt(max(a_r, 1.0))))
    sub = max(1, math.ceil(dt_r / h_max - 1e-9))
    h = dt_r / sub
    n_intervals = max(1, math.ceil(horizon / estimate.dt - 1e-9))
    stride = max(1, math.ceil(n_intervals / _MAX_ROWS))
    n_rows = -(-n_intervals // stride)
    rows_steps = stride * sub

    params = NormalFormParams(
        a0=a_r, epsilon=eps_r, sigma=1.0, x_threshold=_threshold(a_r), epsilon_interval=dt_r
    )
    cfg = SimConfig(h, config.ensemble_size, config.seed, ABSORB, config.node_variance, config.parallel)
    flags = list(sampler.warnings)

    if mode == MONTE_CARLO:
        P_a, P_esc = _monte_carlo(params, cfg, n_rows, rows_steps)
    else:
        P_a, P_esc, clamped = _quasi_static(params, cfg, n_rows, sub, stride, table)
        if clamped:
            flags.append("a left the escape-table range; k0 clamped at the table edge")

    times = estimate.origin_time + estimate.dt * stride * np.arange(1, n_rows + 1)
    qa = crossing_times(times, P_a)
    qe = crossing_times(times, P_esc)
    if qa[1] is None:
        flags.append("unresolved_median_Pa")
    if qe[1] is None:
        flags.append("unresolved_median_Pesc")
    if qa[1] is not None and qe[1] is not None:
        flags.append("noise_dominated" if qe[1] < qa[1] else "drift_dominated")
    return EscapeForecast(times, P_a, P_esc, mode, qa, qe, flags)


def _monte_carlo(params, cfg, n_rows, rows_steps):
    ens = _Ensemble(params, cfg)
    n = ens.n
    P_a = np.empty(n_rows)
    P_esc = np.empty(n_rows)
    escaped = 0
    hit = int(ens.hit.sum())
    for r in range(n_rows):
        if escaped == n and hit == n:
            P_a[r:] = 1.0
            P_esc[r:] = 1.0
            break
        esc, hits, _ = ens.advance(rows_steps)
        escaped += int(esc.sum())
        hit += int(hits.sum())
        P_a[r] = hit / n
        P_esc[r] = escaped / n
    return P_a, P_esc


def _quasi_static(params, cfg, n_rows, sub, stride, table: EscapeTable):
    n = int(cfg.ensemble_size)
    h = cfg.step
    gens = streams.member_streams(cfg.seed, streams.EPSILON, n)
    lo, hi = table.a_range
    a = np.full(n, float(params.a0))
    K = np.zeros(n)
    hit = a <= 0
    clamped = False
    P_a = np.empty(n_rows)
    P_esc = np.empty(n_rows)
    frac = np.arange(1, sub + 1) * h
    for r in range(n_rows):
        eps = np.stack([params.epsilon.draw(g, stride) for g in gens])
        for j in range(stride):
            path = a[:, None] - eps[:, j, None] * frac[None, :]
            both = np.concatenate((a[:, None], path), axis=1)
            k0 = table.k0_at(both)
            clamped |= bool(np.any(both < lo))
            K += h * (0.5 * (k0[:, 0] + k0[:, -1]) + k0[:, 1:-1].sum(axis=1))
            a = path[:, -1]
            hit |= path.min(axis=1) <= 0
        P_a[r] = hit.mean()
        P_esc[r] = 1.0 - np.exp(-K).mean()
    return P_a, P_esc, clamped


# --- report -------------------------------------------------------------------


@dataclass
class ForecastReport:
    cutoff_time: float | None
    q: float | None
    z0: float | None
    sigma_z: float | None
    sigma_nf: float | None
    eps_mean: float | None
    eps_std: float | None
    eps_over_sigma2: float | None
    Pa_quartiles: list
    Pesc_quartiles: list
    flags: list
    origin_time: float | None = None
    a_last: float | None = None
    mode: str | None = None
    slope_estimator: str = "ols"
    skewness_a: float | None = None
    skewness_esc: float | None = None
    refusal: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "ForecastReport":
        return cls(**json.loads(text))


def forecast_report(forecast: EscapeForecast | None, estimate: NormalFormEstimate | None,
                    sampler=None, refusal: str | None = None, cutoff_time: float | None = None) -> ForecastReport:
    """Collect the headline numbers of an estimate and its forecast.

    With ``forecast`` or ``estimate`` missing the report carries only the
    refusal reason and whatever was estimated.
    """
    est = estimate
    eps = sampler.samples if sampler is not None else (est.epsilon_samples if est is not None else None)
    mean = float(np.mean(eps)) if eps is not None and eps.size else None
    std = float(np.std(eps, ddof=1)) if eps is not None and eps.size > 1 else None
    flags = list(forecast.flags) if forecast is not None else []
    if refusal:
        flags.append("refused")
    if est is not None and est.reflected:
        flags.append("stable_branch_below_z0")
    fc = forecast
    return ForecastReport(
        cutoff_time=cutoff_time if cutoff_time is not None else (est.cutoff_time if est else None),
        q=est.q if est else None,
        z0=est.z0 if est else None,
        sigma_z=est.sigma_z if est else None,
        sigma_nf=est.sigma_nf if est else None,
        eps_mean=mean,
        eps_std=std,
        eps_over_sigma2=mean / est.sigma_nf**2 if est and mean is not None else None,
        Pa_quartiles=list(fc.quartiles_a) if fc else [None, None, None],
        Pesc_quartiles=list(fc.quartiles_esc) if fc else [None, None, None],
        flags=flags,
        origin_time=est.origin_time if est else None,
        a_last=est.a_last if est else None,
        mode=fc.mode if fc else None,
        skewness_a=fc.skewness_a if fc else None,
        skewness_esc=fc.skewness_esc if fc else None,
        refusal=refusal,
    )
