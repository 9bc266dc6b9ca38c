"""
Building cooling-load forecasting behind one forecaster contract.

Every forecaster maps a history window (load plus weather) to a non-negative
trajectory over the horizon. The receding-horizon controller only sees the contract,
so a heavier sequence model can be dropped in later without touching the controller.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from chiller_horizon.core.config import FORECASTER_IDS, ForecastConfig, WeatherParams
from chiller_horizon.core.errors import ConfigError, ContractError, InputError, NormalizationError, SeriesError

logger = logging.getLogger(__name__)

EXOG_COLUMNS = ("wind_mps", "wind_deg", "temp_c", "rh_pct", "ghi_wm2")
TABLE_COLUMNS = ("timestamp", "load_kw") + EXOG_COLUMNS
STEP = pd.Timedelta(minutes=30)


def _check_timestamps(timestamps: pd.DatetimeIndex) -> None:
    if len(timestamps) > 1:
        deltas = np.diff(timestamps.asi8)
        if np.any(deltas <= 0):
            raise SeriesError("timestamps must be strictly increasing")
        if np.any(deltas != deltas[0]):
            raise SeriesError("timestamps must lie on a gap-free uniform grid")


@dataclass(frozen=True)
class LoadSeries:
    timestamps: pd.DatetimeIndex
    load: np.ndarray

    def __post_init__(self) -> None:
        load = np.asarray(self.load, dtype=float)
        object.__setattr__(self, "load", load)
        object.__setattr__(self, "timestamps", pd.DatetimeIndex(self.timestamps))
        if len(self.timestamps) != len(load):
            raise SeriesError("timestamps and loads differ in length")
        if not np.all(np.isfinite(load)) or np.any(load < 0):
            raise SeriesError("loads must be finite and non-negative")
        _check_timestamps(self.timestamps)

    def __len__(self) -> int:
        return len(self.load)

    def slice(self, start: int, stop: int) -> "LoadSeries":
        return LoadSeries(self.timestamps[start:stop], self.load[start:stop])


@dataclass(frozen=True)
class ExogSeries:
    """Per-step weather aligned with a load series, columns as ``EXOG_COLUMNS``."""
    timestamps: pd.DatetimeIndex
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float).reshape(-1, len(EXOG_COLUMNS))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", pd.DatetimeIndex(self.timestamps))
        if len(self.timestamps) != len(values):
            raise SeriesError("timestamps and weather rows differ in length")
        if not np.all(np.isfinite(values)):
            raise SeriesError("weather values must be finite")
        rh = values[:, EXOG_COLUMNS.index("rh_pct")]
        if np.any(rh < 0) or np.any(rh > 100):
            raise SeriesError("relative humidity must lie in [0, 100]")
        _check_timestamps(self.timestamps)

    def __len__(self) -> int:
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, EXOG_COLUMNS.index(name)]

    def slice(self, start: int, stop: int) -> "ExogSeries":
        return ExogSeries(self.timestamps[start:stop], self.values[start:stop])


def check_aligned(load: LoadSeries, exog: ExogSeries) -> None:
    if len(load) != len(exog) or not load.timestamps.equals(exog.timestamps):
        raise SeriesError("load and weather series are not aligned step for step")


@dataclass(frozen=True)
class ForecastRequest:
    load_window: np.ndarray
    horizon: int = 48
    exog_window: Optional[np.ndarray] = None
    timestamps: Optional[pd.DatetimeIndex] = None
    # Weather over the horizon; None falls back to the last observed weather.
    exog_future: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "load_window", np.asarray(self.load_window, dtype=float))
        if self.horizon < 1:
            raise InputError("horizon must be >= 1")

    @property
    def issue_time(self) -> Optional[pd.Timestamp]:
        if self.timestamps is None or len(self.timestamps) == 0:
            return None
        return self.timestamps[-1]

    def target_times(self) -> Optional[pd.DatetimeIndex]:
        issue = self.issue_time
        if issue is None:
            return None
        step = self.timestamps[-1] - self.timestamps[-2] if len(self.timestamps) > 1 else STEP
        return pd.DatetimeIndex([issue + step * h for h in range(1, self.horizon + 1)])


@dataclass(frozen=True)
class Forecast:
    predicted: np.ndarray
    model_id: str
    issue_time: Optional[pd.Timestamp] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "predicted", np.maximum(np.asarray(self.predicted, dtype=float), 0.0))


def make_request(
    load: LoadSeries,
    exog: Optional[ExogSeries],
    end: int,
    window: int = 336,
    horizon: int = 48,
    future_weather: bool = True,
) -> ForecastRequest:
    """Request issued with history ``[end - window, end)`` of the given series."""
    start = max(0, end - window)
    exog_window = exog_future = None
    if exog is not None:
        exog_window = exog.values[start:end]
        if future_weather:
            rows = np.arange(end, end + horizon)
            rows = np.minimum(rows, len(exog) - 1)
            exog_future = exog.values[rows]
    return ForecastRequest(
        load_window=load.load[start:end],
        horizon=horizon,
        exog_window=exog_window,
        timestamps=load.timestamps[start:end],
        exog_future=exog_future,
    )


def persistence_forecast(req: ForecastRequest) -> Forecast:
    if req.load_window.size == 0:
        raise InputError("persistence forecast needs a non-empty window")
    return Forecast(np.full(req.horizon, req.load_window[-1]), "persistence", req.issue_time)


def _seasonal_index(window_len: int, h: np.ndarray, period: int) -> np.ndarray:
    """Window index of the same slot one or more periods before target step ``h``."""
    return window_len - 1 + h - period * np.ceil(h / period).astype(int)


def seasonal_naive_forecast(req: ForecastRequest, period: int = 48) -> Forecast:
    if period < 1 or req.load_window.size < period:
        raise InputError(f"seasonal naive forecast needs at least {period} steps of history")
    h = np.arange(1, req.horizon + 1)
    idx = _seasonal_index(req.load_window.size, h, period)
    return Forecast(req.load_window[idx], "seasonal_naive", req.issue_time)


def mean_profile_forecast(req: ForecastRequest, period: int = 48) -> Forecast:
    """Average of every earlier occurrence of each target slot inside the window."""
    n = req.load_window.size
    if period < 1 or n < period:
        raise InputError(f"mean-profile forecast needs at least {period} steps of history")
    usable = req.load_window[n - (n // period) * period:]
    profile = usable.reshape(-1, period).mean(axis=0)
    h = np.arange(1, req.horizon + 1)
    slot = (_seasonal_index(n, h, period) - (n - usable.size)) % period
    return Forecast(profile[slot], "mean_profile", req.issue_time)


def nmae(predicted: Sequence[float], actual: Sequence[float]) -> float:
    """Mean absolute error normalised by the mean absolute actual value."""
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape or p.size == 0:
        raise ContractError("nmae needs equal-length, non-empty sequences")
    scale = float(np.mean(np.abs(a)))
    if scale <= 0:
        raise NormalizationError("nmae is undefined when the actual series has zero mean magnitude")
    return float(np.mean(np.abs(p - a)) / scale)


def _feature_names(lags: Tuple[int, ...], period: int) -> Tuple[str, ...]:
    names = [f"lag_{lag}" for lag in lags]
    names += list(EXOG_COLUMNS)
    names += [f"hour_{h:02d}" for h in range(24)]
    return tuple(names)


@dataclass(frozen=True)
class LagRegressionModel:
    """Direct multi-step ridge regression, one linear model per horizon step."""
    lags: Tuple[int, ...]
    period: int
    window: int
    feature_names: Tuple[str, ...]
    coef: np.ndarray
    intercept: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    alpha: float = 1.0

    @property
    def horizon(self) -> int:
        return int(self.coef.shape[0])

    @classmethod
    def zeros(cls, cfg: ForecastConfig) -> "LagRegressionModel":
        names = _feature_names(cfg.lags, cfg.period)
        d = len(names)
        return cls(
            lags=cfg.lags, period=cfg.period, window=cfg.window, feature_names=names,
            coef=np.zeros((cfg.horizon, d)), intercept=np.zeros(cfg.horizon),
            mean=np.zeros((cfg.horizon, d)), scale=np.ones((cfg.horizon, d)), alpha=cfg.ridge_alpha,
        )


def _lag_columns(loads: np.ndarray, issue: np.ndarray, h: int, lags: Tuple[int, ...], period: int) -> np.ndarray:
    cols = []
    for lag in lags:
        if lag < period:
            # Short lags look back from the issue step.
            cols.append(loads[issue - (lag - 1)])
        else:
            cols.append(loads[issue + h - lag * math.ceil(h / lag)])
    return np.column_stack(cols)


def _hour_one_hot(times: pd.DatetimeIndex) -> np.ndarray:
    onehot = np.zeros((len(times), 24))
    onehot[np.arange(len(times)), np.asarray(times.hour)] = 1.0
    return onehot


def fit_lag_regression(
    load: LoadSeries,
    exog: ExogSeries,
    cfg: Optional[ForecastConfig] = None,
) -> LagRegressionModel:
    cfg = cfg or ForecastConfig()
    check_aligned(load, exog)
    n = len(load)
    issue = np.arange(cfg.window - 1, n - cfg.horizon)
    if issue.size < 2:
        raise SeriesError(f"need more than {cfg.window + cfg.horizon} steps to fit a lag regression")
    names = _feature_names(cfg.lags, cfg.period)
    d = len(names)
    coef = np.zeros((cfg.horizon, d))
    intercept = np.zeros(cfg.horizon)
    mean = np.zeros((cfg.horizon, d))
    scale = np.ones((cfg.horizon, d))
    for h in range(1, cfg.horizon + 1):
        target = issue + h
        x = np.hstack([
            _lag_columns(load.load, issue, h, cfg.lags, cfg.period),
            exog.values[target],
            _hour_one_hot(load.timestamps[target]),
        ])
        y = load.load[target]
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        xs = (x - mu) / sd
        gram = xs.T @ xs + cfg.ridge_alpha * np.eye(d)
        coef[h - 1] = np.linalg.solve(gram, xs.T @ (y - y.mean()))
        intercept[h - 1] = y.mean()
        mean[h - 1] = mu
        scale[h - 1] = sd
    logger.info("fitted lag regression on %d issue steps, horizon %d", issue.size, cfg.horizon)
    return LagRegressionModel(cfg.lags, cfg.period, cfg.window, names, coef, intercept, mean, scale, cfg.ridge_alpha)


def lag_regression_forecast(req: ForecastRequest, model: LagRegressionModel) -> Forecast:
    if model.feature_names != _feature_names(model.lags, model.period):
        raise ContractError("model feature layout does not match the lag/weather/hour layout")
    if model.coef.shape[1] != len(model.feature_names):
        raise ContractError("model weights do not match its feature layout")
    if req.horizon > model.horizon:
        raise ContractError(f"model covers {model.horizon} steps, {req.horizon} requested")
    if req.load_window.size < model.window:
        raise ContractError(f"model needs a {model.window}-step window, got {req.load_window.size}")
    if req.exog_window is None or req.timestamps is None:
        raise ContractError("lag regression needs weather and timestamps in the request")
    exog_window = np.asarray(req.exog_window, dtype=float)
    if exog_window.ndim != 2 or exog_window.shape[1] != len(EXOG_COLUMNS):
        raise ContractError(f"weather must carry {len(EXOG_COLUMNS)} channels")

    loads = req.load_window
    issue = np.array([loads.size - 1])
    targets = req.target_times()
    future = req.exog_future
    if future is None:
        future = np.repeat(exog_window[-1:], req.horizon, axis=0)
    future = np.asarray(future, dtype=float)
    if future.shape != (req.horizon, len(EXOG_COLUMNS)):
        raise ContractError("future weather must be horizon x channels")

    out = np.empty(req.horizon)
    for h in range(1, req.horizon + 1):
        x = np.hstack([
            _lag_columns(loads, issue, h, model.lags, model.period)[0],
            future[h - 1],
            _hour_one_hot(targets[h - 1:h])[0],
        ])
        xs = (x - model.mean[h - 1]) / model.scale[h - 1]
        out[h - 1] = model.intercept[h - 1] + xs @ model.coef[h - 1]
    return Forecast(out, "lag_regression", req.issue_time)


class Forecaster(Protocol):
    model_id: str
    history: int

    def predict(self, request: ForecastRequest) -> Forecast:
        ...


@dataclass
class PersistenceForecaster:
    model_id: str = "persistence"
    history: int = 1

    def predict(self, request: ForecastRequest) -> Forecast:
        return persistence_forecast(request)


@dataclass
class SeasonalNaiveForecaster:
    period: int = 48
    model_id: str = "seasonal_naive"

    @property
    def history(self) -> int:
        return self.period

    def predict(self, request: ForecastRequest) -> Forecast:
        return seasonal_naive_forecast(request, self.period)


@dataclass
class MeanProfileForecaster:
    period: int = 48
    model_id: str = "mean_profile"

    @property
    def history(self) -> int:
        return self.period

    def predict(self, request: ForecastRequest) -> Forecast:
        return mean_profile_forecast(request, self.period)


@dataclass
class LagRegressionForecaster:
    model: LagRegressionModel
    model_id: str = "lag_regression"

    @property
    def history(self) -> int:
        return self.model.window

    def predict(self, request: ForecastRequest) -> Forecast:
        return lag_regression_forecast(request, self.model)


@dataclass
class PerfectForesightForecaster:
    """Reads the true future from the trace; past the trace end the last load repeats."""
    series: LoadSeries
    model_id: str = "perfect"
    history: int = 0
    _positions: Dict[pd.Timestamp, int] = field(default_factory=dict, repr=False)

    def predict(self, request: ForecastRequest) -> Forecast:
        if request.issue_time is None:
            start = 0
        else:
            try:
                start = int(self.series.timestamps.get_loc(request.issue_time)) + 1
            except KeyError as exc:
                raise ContractError(f"issue time {request.issue_time} is not on the trace") from exc
        return Forecast(self.window(start, request.horizon), self.model_id, request.issue_time)

    def window(self, start: int, horizon: int) -> np.ndarray:
        rows = np.minimum(np.arange(start, start + horizon), len(self.series) - 1)
        return self.series.load[rows]


def make_forecaster(
    model_id: str,
    cfg: Optional[ForecastConfig] = None,
    model: Optional[LagRegressionModel] = None,
    trace: Optional[LoadSeries] = None,
) -> Forecaster:
    cfg = cfg or ForecastConfig()
    if model_id == "persistence":
        return PersistenceForecaster()
    if model_id == "seasonal_naive":
        return SeasonalNaiveForecaster(cfg.period)
    if model_id == "mean_profile":
        return MeanProfileForecaster(cfg.period)
    if model_id == "lag_regression":
        if model is None:
            raise ConfigError("lag_regression forecaster needs a fitted model")
        return LagRegressionForecaster(model)
    if model_id == "perfect":
        if trace is None:
            raise ConfigError("perfect forecaster needs the true trace")
        return PerfectForesightForecaster(trace)
    raise ConfigError(f"unknown forecaster {model_id!r}; expected one of {FORECASTER_IDS}")


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    out = np.zeros(n)
    if sigma == 0 or n == 0:
        return out
    shocks = rng.normal(0.0, sigma * math.sqrt(1 - phi ** 2), size=n)
    out[0] = rng.normal(0.0, sigma)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + shocks[i]
    return out


def synthetic_campus_load(
    days: int,
    seed: int = 0,
    weather_params: Optional[WeatherParams] = None,
) -> Tuple[LoadSeries, ExogSeries]:
    """
    Deterministic synthetic campus trace at half-hourly resolution.

    Load is a diurnal sinusoid plus a weekday working-hours block, a cooling-degree
    term on ambient temperature, a solar term and autocorrelated noise. All random
    parts scale with ``weather_params.noise``; with zero noise the weather repeats
    daily and the load repeats weekly.
    """
    if days < 1:
        raise InputError("days must be >= 1")
    wp = weather_params or WeatherParams()
    rng = np.random.default_rng(seed)
    steps = days * 48
    timestamps = pd.date_range(pd.Timestamp(wp.start), periods=steps, freq="30min")
    hour = (np.arange(steps) % 48) / 2.0
    day = np.arange(steps) // 48
    eta = wp.noise

    temp_anomaly = _ar1(rng, days, 0.7, 1.5 * eta)[day]
    temp = (
        wp.mean_temp_c
        + wp.temp_amplitude_c * np.sin(2 * np.pi * (hour - 9) / 24)
        + temp_anomaly
        + _ar1(rng, steps, 0.9, 0.3 * eta)
    )
    cloud = (np.clip(rng.beta(2.0, 5.0, size=days), 0.0, 0.8) * min(eta, 1.0))[day]
    ghi = wp.peak_ghi_wm2 * np.maximum(0.0, np.sin(np.pi * (hour - 6) / 12)) * (1 - cloud)
    rh = np.clip(wp.mean_rh_pct - 2.5 * (temp - wp.mean_temp_c) + rng.normal(0.0, 3.0 * eta, steps), 5.0, 100.0)
    wind = np.maximum(0.0, wp.mean_wind_mps + np.sin(2 * np.pi * (hour - 14) / 24) + rng.normal(0.0, 0.8 * eta, steps))
    wind_dir = np.mod(200.0 + 40.0 * np.sin(2 * np.pi * hour / 24) + rng.normal(0.0, 20.0 * eta, steps), 360.0)

    start_h, end_h = wp.working_hours
    occupied = (np.asarray(timestamps.dayofweek) < 5) & (hour >= start_h) & (hour < end_h)
    load = (
        wp.base_load_kw
        + wp.diurnal_amplitude_kw * np.sin(2 * np.pi * (hour - 9) / 24)
        + wp.occupancy_load_kw * occupied
        + wp.temp_coeff_kw_per_c * np.maximum(temp - wp.temp_balance_c, 0.0)
        + wp.ghi_coeff * ghi
        + _ar1(rng, steps, 0.8, wp.noise_kw * eta)
    )
    load = np.clip(load, wp.min_load_kw, wp.max_load_kw)
    exog = np.column_stack([wind, wind_dir, temp, rh, ghi])
    return LoadSeries(timestamps, load), ExogSeries(timestamps, exog)


def read_load_csv(path: Union[str, Path]) -> Tuple[LoadSeries, ExogSeries]:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise ConfigError(f"cannot read load table {path}: {exc}") from exc
    missing = [c for c in TABLE_COLUMNS if c not in frame.columns]
    if missing:
        raise SeriesError(f"{path} is missing columns {missing}")
    timestamps = pd.DatetimeIndex(pd.to_datetime(frame["timestamp"]))
    load = LoadSeries(timestamps, frame["load_kw"].to_numpy(dtype=float))
    exog = ExogSeries(timestamps, frame[list(EXOG_COLUMNS)].to_numpy(dtype=float))
    return load, exog


def load_frame(load: LoadSeries, exog: ExogSeries) -> pd.DataFrame:
    check_aligned(load, exog)
    frame = pd.DataFrame(exog.values, columns=list(EXOG_COLUMNS))
    frame.insert(0, "load_kw", load.load)
    frame.insert(0, "timestamp", load.timestamps.strftime("%Y-%m-%dT%H:%M:%S"))
    return frame


def write_load_csv(path: Union[str, Path], load: LoadSeries, exog: ExogSeries) -> None:
    load_frame(load, exog).to_csv(path, index=False, float_format="%.6f")


def write_forecast_csv(path: Union[str, Path], forecast: Forecast, targets: pd.DatetimeIndex) -> None:
    frame = pd.DataFrame({
        "timestamp": targets.strftime("%Y-%m-%dT%H:%M:%S"),
        "load_kw": forecast.predicted,
        "model_id": forecast.model_id,
    })
    frame.to_csv(path, index=False, float_format="%.6f")
