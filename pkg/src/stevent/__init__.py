"""Event studies on spatio-temporal station panels.

Normal values come from a hidden dynamics geostatistical model (HDGM) or
from per-station temporal baselines; abnormal values are tested with a
battery of parametric and rank statistics, some adjusted for
cross-sectional dependence.
"""
__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    ParameterError,
    RankDeficiencyError,
    SteventError,
    UnknownStatisticError,
)
from .panel import (
    Panel,
    Station,
    WindowSplit,
    add_lagged_covariates,
    distance_matrix,
    ingest_csv,
    mean_pairwise_correlation,
    split_windows,
)
from .hdgm import (
    FitResult,
    HdgmParams,
    em_fit,
    forecast_normal,
    kalman_loglik,
    kalman_smooth,
    normal_values,
)
from .baselines import ArmaOrder, BaselineFit, fit_lm, fit_regarma, forecast_baseline, select_order_aicc
from .eventstudy import (
    AbnormalPanel,
    DEFAULT_REGISTRY,
    TestResult,
    compute_abnormal,
    register_statistic,
    run_battery,
)
from .diagnostics import acf_at, diagnostics_table, hampel_outlier_pct
from .simgen import McReport, Scenario, SimConfig, run_monte_carlo, simulate_panel
