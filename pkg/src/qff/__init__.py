"""Combined quantile forecasting for high-dimensional panels."""
from .baselines import (ArimaModel, ArModel, NearModel, fit_ar_aic, fit_arima, fit_near_stations,
                        forecast_ar, forecast_arima, forecast_naive, kpss_select_d, kpss_statistic)
from .core import (Panel, PanelError, QuantileGrid, RngStream, SeriesWindow, adjusted_r_squared,
                   center_rows, check_loss, huber_check_grad, huber_check_loss, standardize_rows)
from .factors import (FactorDecomposition, IcCurve, QfmOptions, fit_pca_factors,
                      fit_quantile_factors, ic_penalty, select_r_bai_ng, select_r_quantile)
from .forecasting import (CombinedForecast, ForecastError, QuantileForecastModel, StateMap,
                          SwForecastModel, assign_state, combine, estimate_transition,
                          fit_extended_forecaster, fit_quantile_forecaster, fit_sw2002,
                          forecast_sw2002, rearrange)
from .pipeline import (EvaluationConfig, EvaluationError, EvaluationPlan, ForecastReport,
                       ImputationResult, StationMeta, export_report, forecast_latest,
                       haversine_km, impute_em, load_meta, load_panel, nearest_stations,
                       read_panel, run_evaluation)
from .quantreg import (GroupLassoFit, GroupSpec, QrConvergenceError, QrFit, QrOptions,
                       fit_group_lasso_qr, fit_huber_quantile_regression, fit_quantile_regression,
                       select_lambda)
from .simulation import (ExperimentReport, SimulationConfig, SimulationError, TrueFactors,
                         generate_panel, run_extension_experiment, run_mae_experiment,
                         run_r2_experiment, synthetic_stations)

__version__ = "0.1.0"
