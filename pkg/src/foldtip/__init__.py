"""Early-warning indicators and escape forecasts for saddle-node tipping."""

from .errors import (
    DataError,
    FoldTipError,
    InsufficientDataError,
    IntegrationError,
    NoApproachError,
    ParameterError,
    RefusalError,
)
from .escape_analysis import (
    EscapeTable,
    PercentileSurface,
    build_escape_table,
    escape_rate_frozen,
    inverse_rescale,
    kramers_rate,
    percentile_surface,
    quasistatic_escape_cdf,
    rescale_parameters,
)
from .fingerprint import FingerprintConfig, FingerprintResult, ar1_to_ou, extrapolate_propagator, fingerprint
from .normalform_fit import (
    EmpiricalSampler,
    EscapeForecast,
    NormalFormEstimate,
    epsilon_distribution,
    extract_normal_form,
    forecast,
    forecast_report,
)
from .sde_engine import EnsembleTrace, NormalFormParams, SimConfig, first_escapes, run_ensemble, simulate_path
from .timeseries import TimeSeries, UniformSeries, detrend_gaussian, interpolate_uniform, parse_csv, parse_icecore

__version__ = "0.1.0"
