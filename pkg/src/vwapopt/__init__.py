"""Optimal VWAP execution: static and shrinking-horizon dynamic schedules."""

__version__ = "0.1.0"

from .errors import ConvergenceError, DataError, NumericalError, SingularConditioningError, VwapError
from .market_data import Dataset, MinuteSeries, builtin_world, load_csv, synthesize, write_csv
from .price_model import VolatilityProfile, estimate_sigma
from .slippage import CostParams, Method, OrderSpec, Schedule, SlippageReport, realized_slippage
from .static import StaticProblem, closed_form_static, solve_qp
from .volume_model import VolumeModel, condition, fit_volume_model, moments
from .dynamic import shdp_execute
from .backtest import BacktestConfig, cross_validate_band, estimate_window, run_backtest

__all__ = [
    "ConvergenceError", "DataError", "NumericalError", "SingularConditioningError", "VwapError",
    "Dataset", "MinuteSeries", "builtin_world", "load_csv", "synthesize", "write_csv",
    "VolatilityProfile", "estimate_sigma",
    "CostParams", "Method", "OrderSpec", "Schedule", "SlippageReport", "realized_slippage",
    "StaticProblem", "closed_form_static", "solve_qp",
    "VolumeModel", "condition", "fit_volume_model", "moments",
    "shdp_execute",
    "BacktestConfig", "cross_validate_band", "estimate_window", "run_backtest",
]
