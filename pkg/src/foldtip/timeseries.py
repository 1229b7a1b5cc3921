"""Record ingestion, uniform resampling and Gaussian-kernel detrending.

These are the first two stages of degenerate fingerprinting: an unevenly
sampled record is linearly interpolated onto a uniform grid, and a slowly
moving kernel average is subtracted so that the remainder fluctuates around
zero.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Union

import numpy as np

from .errors import DegenerateGridError, EmptyRecordError, ParameterError

log = logging.getLogger(__name__)

Source = Union[str, bytes, IO[str], IO[bytes]]

# Gaussian weights beyond this many bandwidths are below 1e-17 of the peak.
KERNEL_RADIUS = 9.0


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Ordered ``(t, z)`` samples, possibly unevenly spaced."""

    times: np.ndarray
    values: np.ndarray
    label: str = ""
    unit: str = ""
    skipped_rows: int = field(default=0, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != z.shape:
            raise ParameterError("times and values must be 1-D arrays of equal length")
        if t.size < 2:
            raise EmptyRecordError(f"a time series needs at least 2 samples, got {t.size}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(z))):
            raise ParameterError("times and values must be finite")
        if np.any(np.diff(t) <= 0):
            raise ParameterError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", z)

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (
            self.label == other.label
            and self.unit == other.unit
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0])

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        if header:
            buf.write("time,value\n")
        for t, z in zip(self.times, self.values):
            buf.write(f"{float(t)!r},{float(z)!r}\n")
        return buf.getvalue()


@dataclass(frozen=True)
class UniformSeries:
    """Values on the grid ``t0 + k*dt``."""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.values, dtype=float)
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if z.ndim != 1 or z.size < 2:
            raise ParameterError("a uniform series needs at least 2 values")
        object.__setattr__(self, "values", z)

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    def truncate(self, last_index: int) -> "UniformSeries":
        """Keep samples ``0..last_index`` inclusive."""
        return UniformSeries(self.t0, self.dt, self.values[: last_index + 1].copy())

    def index_at(self, time: float) -> int:
        """Index of the last grid point not later than ``time``."""
        k = math.floor((time - self.t0) / self.dt + 1e-9)
        return int(min(max(k, -1), self.values.size - 1))

    def to_timeseries(self, label: str = "", unit: str = "") -> TimeSeries:
        return TimeSeries(self.times, self.values.copy(), label, unit)


@dataclass(frozen=True)
class DetrendResult:
    trend: np.ndarray
    residual: np.ndarray
    bandwidth: float


def _read_text(source: Source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8-sig")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8-sig") if isinstance(data, bytes) else data


def _to_float(token: str) -> float | None:
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def _collect(pairs: list[tuple[float, float]], skipped: int, label: str, unit: str) -> TimeSeries:
    if len(pairs) < 2:
        raise EmptyRecordError(f"fewer than 2 usable rows ({len(pairs)} found, {skipped} skipped)")
    arr = np.array(pairs, dtype=float)
    order = np.argsort(arr[:, 0], kind="stable")
    t, z = arr[order, 0], arr[order, 1]
    uniq, start, counts = np.unique(t, return_index=True, return_counts=True)
    if uniq.size < t.size:
        # duplicate time stamps: average, as real ice-core records carry them
        z = np.add.reduceat(z, start) / counts
        t = uniq
    if t.size < 2:
        raise EmptyRecordError("fewer than 2 distinct time stamps")
    return TimeSeries(t, z, label=label, unit=unit, skipped_rows=skipped)


def _parse_rows(rows: Iterable[list[str]], tcol: int, zcol: int):
    pairs: list[tuple[float, float]] = []
    skipped = 0
    for fields in rows:
        if not fields or all(not f.strip() for f in fields):
            continue
        if max(tcol, zcol) >= len(fields):
            skipped += 1
            continue
        t, z = _to_float(fields[tcol]), _to_float(fields[zcol])
        if t is None or z is None:
            skipped += 1
            continue
        pairs.append((t, z))
    return pairs, skipped


def parse_csv(
    source: Source,
    time_column: int = 0,
    value_column: int = 1,
    label: str = "",
    unit: str = "",
) -> TimeSeries:
    """Parse a comma-separated record.

    Rows whose selected fields are not finite numbers (headers, notes, NaNs)
    are skipped and counted in ``skipped_rows``.  Output is sorted by time;
    duplicate time stamps are averaged.
    """
    if time_column < 0 or value_column < 0:
        raise ParameterError("column indices must be non-negative")
    rows = csv.reader(_read_text(source).splitlines())
    pairs, skipped = _parse_rows(rows, time_column, value_column)
    return _collect(pairs, skipped, label, unit)


def parse_icecore(
    source: Source,
    age_column: int = 1,
    value_column: int = 2,
    reverse_time: bool = True,
    label: str = "",
    unit: str = "",
) -> TimeSeries:
    """Parse a whitespace-delimited paleo record (e.g. NOAA Vostok ``deutnat.txt``).

    Any line whose selected columns do not both parse as numbers is treated
    as preamble or comment and skipped.  With ``reverse_time`` the age before
    present is negated, so time increases toward the present.
    """
    if age_column < 0 or value_column < 0:
        raise ParameterError("column indices must be non-negative")
    lines = _read_text(source).splitlines()
    pairs, skipped = _parse_rows((line.split() for line in lines), age_column, value_column)
    if reverse_time:
        pairs = [(-t, z) for t, z in pairs]
    return _collect(pairs, skipped, label, unit)


def interpolate_uniform(series: TimeSeries, dt: float) -> UniformSeries:
    """Linearly interpolate onto ``t_first + k*dt`` without extrapolating."""
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    span = series.span
    if dt >= span:
        raise DegenerateGridError(f"dt={dt} is not smaller than the record span {span}")
    n = int(math.floor(span / dt * (1 + 1e-12))) + 1
    grid = series.times[0] + dt * np.arange(n)
    grid[-1] = min(grid[-1], series.times[-1])
    values = np.interp(grid, series.times, series.values)
    return UniformSeries(float(series.times[0]), float(dt), values)


def _kernel(n: int, dt: float, bandwidth: float) -> np.ndarray:
    radius = min(n - 1, int(math.ceil(KERNEL_RADIUS * bandwidth / dt)))
    offsets = dt * np.arange(-radius, radius + 1)
    return np.exp(-0.5 * (offsets / bandwidth) ** 2)


def kernel_weights(n: int, dt: float, bandwidth: float, k: int) -> np.ndarray:
    """Normalized weights applied at index ``k`` of an ``n``-sample grid."""
    offsets = dt * (np.arange(n) - k)
    g = np.exp(-0.5 * (offsets / bandwidth) ** 2)
    return g / g.sum()


def detrend_gaussian(series: UniformSeries, bandwidth: float) -> DetrendResult:
    """Subtract the normalized Gaussian-kernel average of the series.

    The trend at index k is ``sum_i G_k(i dt) z_i / sum_i G_k(i dt)`` over the
    whole record; near the ends the weights renormalize over the available
    samples.  The kernel is cut at ``KERNEL_RADIUS`` bandwidths, where the
    dropped weights are below double-precision resolution.
    """
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    z = series.values
    n = z.size
    g = _kernel(n, series.dt, bandwidth)
    r = (g.size - 1) // 2
    num = np.convolve(z, g, mode="full")[r : r + n]
    den = np.convolve(np.ones(n), g, mode="full")[r : r + n]
    trend = num / den
    return DetrendResult(trend=trend, residual=z - trend, bandwidth=float(bandwidth))


def scale_warnings(dt: float, bandwidth: float, window: int | None = None) -> list[str]:
    """Heuristic checks of the time-scale ordering that data cannot verify."""
    notes = []
    if bandwidth < 5 * dt:
        notes.append(f"bandwidth {bandwidth} is less than 5*dt ({5 * dt}); detrending may absorb the fluctuations")
    if window is not None and window * dt < 10 * bandwidth:
        notes.append(
            f"window span {window * dt} is less than 10*bandwidth ({10 * bandwidth}); propagator estimates will be noisy"
        )
    for note in notes:
        log.warning(note)
    return notes
