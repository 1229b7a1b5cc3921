"""Sliding-window AR(1) propagator estimation.

For each window of ``w = 2m+1`` detrended samples the propagator ``c_k`` is
the no-intercept least-squares slope of ``y[j+1]`` on ``y[j]``; the noise
amplitude ``theta_k`` is the population standard deviation of the fit
residuals.  Each pair ``(c_k, theta_k)`` is converted into the decay rate and
noise amplitude of the Ornstein-Uhlenbeck process whose exact discretization
is that AR(1) model.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateFitError, InsufficientDataError, ParameterError
from .timeseries import UniformSeries, detrend_gaussian

_CHUNK = 4096


@dataclass(frozen=True)
class FingerprintConfig:
    window_half_width: int
    dt: float
    bandwidth: float
    cutoff_index: int | None = None

    def __post_init__(self):
        if int(self.window_half_width) < 1:
            raise ParameterError("window_half_width must be a positive integer")
        if not self.dt > 0 or not self.bandwidth > 0:
            raise ParameterError("dt and bandwidth must be positive")
        if self.cutoff_index is not None and self.cutoff_index < 1:
            raise ParameterError("cutoff_index must be >= 1")

    @property
    def window(self) -> int:
        return 2 * int(self.window_half_width) + 1


@dataclass(frozen=True)
class FingerprintResult:
    center_times: np.ndarray
    c: np.ndarray
    theta: np.ndarray
    trend_at_centers: np.ndarray
    kappa: np.ndarray
    sigma_z: np.ndarray
    valid: np.ndarray
    dt: float
    window: int

    def __len__(self):
        return self.c.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("center_time,c,theta,kappa,sigma_z,trend,valid_flag\n")
        for row in zip(self.center_times, self.c, self.theta, self.kappa, self.sigma_z, self.trend_at_centers, self.valid):
            *nums, flag = row
            buf.write(",".join(repr(float(v)) for v in nums) + f",{int(flag)}\n")
        return buf.getvalue()


def fit_ar1_window(residual, center: int, m: int) -> tuple[float, float]:
    """Fit ``y[j+1] = c*y[j]`` over ``j = center-m .. center+m``.

    Returns ``(c, theta)`` with theta the population standard deviation of
    ``y[j+1] - c*y[j]`` over the window.
    """
    y = np.asarray(residual, dtype=float)
    lo, hi = center - m, center + m
    if m < 0 or lo < 0 or hi + 1 >= y.size:
        raise ParameterError(f"window [{lo}, {hi + 1}] does not fit in {y.size} samples")
    y0 = y[lo : hi + 1]
    y1 = y[lo + 1 : hi + 2]
    s00 = float(np.dot(y0, y0))
    if s00 == 0.0:
        raise DegenerateFitError(f"all-zero window at center {center}")
    c = float(np.dot(y0, y1)) / s00
    theta = float(np.std(y1 - c * y0))
    return c, theta


def ar1_to_ou(c, theta, dt: float):
    """Convert AR(1) ``(c, theta)`` into OU decay rate and noise amplitude.

    ``kappa = -log(c)/dt`` and ``sigma_z = theta*sqrt(2*kappa/(1-c**2))``.
    Entries outside ``0 < c < 1`` are returned as NaN for sigma_z (and for
    kappa when ``c <= 0``); ``c == 1`` gives ``kappa == 0``.
    """
    c = np.asarray(c, dtype=float)
    theta = np.asarray(theta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(c > 0, -np.log(np.where(c > 0, c, 1.0)) / dt, np.nan)
        inside = (c > 0) & (c < 1)
        sigma_z = np.where(inside, theta * np.sqrt(2.0 * kappa / (1.0 - c * c)), np.nan)
    return kappa, sigma_z


def _window_fits(y: np.ndarray, m: int):
    w = 2 * m + 1
    y0 = sliding_window_view(y[:-1], w)
    y1 = sliding_window_view(y[1:], w)
    n = y0.shape[0]
    c = np.empty(n)
    theta = np.empty(n)
    for s in range(0, n, _CHUNK):
        a0 = y0[s : s + _CHUNK]
        a1 = y1[s : s + _CHUNK]
        s00 = np.einsum("ij,ij->i", a0, a0)
        if np.any(s00 == 0.0):
            bad = s + int(np.flatnonzero(s00 == 0.0)[0]) + m
            raise DegenerateFitError(f"all-zero window at center {bad}")
        ck = np.einsum("ij,ij->i", a0, a1) / s00
        c[s : s + _CHUNK] = ck
        theta[s : s + _CHUNK] = np.std(a1 - ck[:, None] * a0, axis=1)
    return c, theta


def fingerprint(series: UniformSeries, config: FingerprintConfig) -> FingerprintResult:
    """Detrend ``series`` and fit AR(1) models in windows sliding by one sample.

    Samples after ``config.cutoff_index`` are discarded before detrending, so
    they cannot influence any estimate.  The last window ends when its front
    end reaches the cutoff (or the last sample).
    """
    if not math.isclose(series.dt, config.dt, rel_tol=1e-9):
        raise ParameterError(f"series spacing {series.dt} differs from config dt {config.dt}")
    if config.cutoff_index is not None:
        if config.cutoff_index >= len(series):
            raise ParameterError(f"cutoff_index {config.cutoff_index} beyond series length {len(series)}")
        series = series.truncate(config.cutoff_index)
    m = int(config.window_half_width)
    n = len(series)
    if 2 * m + 2 > n:
        raise InsufficientDataError(f"window of {2 * m + 1} samples (+1 lag) does not fit in {n} samples")

    det = detrend_gaussian(series, config.bandwidth)
    c, theta = _window_fits(det.residual, m)
    centers = np.arange(m, m + c.size)
    kappa, sigma_z = ar1_to_ou(c, theta, series.dt)
    valid = (c > 0) & (c < 1)
    return FingerprintResult(
        center_times=series.times[centers],
        c=c,
        theta=theta,
        trend_at_centers=det.trend[centers],
        kappa=kappa,
        sigma_z=sigma_z,
        valid=valid,
        dt=series.dt,
        window=2 * m + 1,
    )


def extrapolate_propagator(result: FingerprintResult) -> tuple[float, float]:
    """Naive tipping estimate: OLS line through ``(t, c_k)`` crossing ``c = 1``.

    Returns ``(t_hat, slope)``; a non-increasing line gives ``t_hat = inf``.
    """
    t = result.center_times[result.valid]
    c = result.c[result.valid]
    if t.size < 2:
        raise InsufficientDataError("need at least 2 valid propagator estimates")
    slope, intercept = np.polyfit(t, c, 1)
    slope = float(slope)
    # round-off on a flat sequence must not produce a finite crossing
    if slope * (t[-1] - t[0]) <= 1e-12 * max(1.0, float(np.max(np.abs(c)))):
        return math.inf, slope
    return float((1.0 - intercept) / slope), slope
