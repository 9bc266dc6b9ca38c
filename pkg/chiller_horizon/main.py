from dataclasses import asdict
from datetime import datetime
from functools import lru_cache
from pathlib import Path
from typing import List, Literal, Optional
import os

import pandas as pd
from fastapi import BackgroundTasks, FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from chiller_horizon.core.bench import TrainingStatus, fit_forecast_model, run_training_job
from chiller_horizon.core.config import BenchConfig, load_bench_config
from chiller_horizon.core.errors import ChillerHorizonError, ConfigError, ContractError, InputError
from chiller_horizon.core.forecast import ForecastRequest, LoadSeries, make_forecaster
from chiller_horizon.core.oracle import DispatchSolution, optimal_dispatch
from chiller_horizon.core.plant import ConstraintReport, check_constraints, decode_flows, steady_state_dispatch

app = FastAPI(title="Chiller Horizon")

OUT_DIR = Path(os.environ.get("CHILLER_HORIZON_OUT", "out"))


@lru_cache()
def get_config() -> BenchConfig:
    return load_bench_config(os.environ.get("CHILLER_HORIZON_CONFIG"))


@lru_cache()
def get_forecast_model():
    return fit_forecast_model(get_config())


def _status_for(exc: ChillerHorizonError) -> int:
    if isinstance(exc, (InputError, ContractError)):
        return 422
    if isinstance(exc, ConfigError):
        return 400
    return 500


@app.exception_handler(ChillerHorizonError)
async def domain_error_handler(request: Request, exc: ChillerHorizonError):
    return JSONResponse(content={"error": str(exc)}, status_code=_status_for(exc))


class DispatchRequest(BaseModel):
    flows: List[float]
    building_load: float


class OracleRequest(BaseModel):
    building_load: float


class ForecastBody(BaseModel):
    model_id: str = "persistence"
    load_window: List[float]
    exog_window: Optional[List[List[float]]] = None
    exog_future: Optional[List[List[float]]] = None
    timestamps: Optional[List[str]] = None
    horizon: int = Field(48, ge=1)


class TrainRequest(BaseModel):
    variant: Literal["receding_horizon", "one_step"] = "receding_horizon"
    smoke: bool = True


def _report_dict(report: ConstraintReport) -> dict:
    return {
        "all_satisfied": report.all_satisfied,
        "violated": report.violated(),
        "entries": {cid: asdict(e) for cid, e in report.entries.items()},
    }


def _solution_dict(solution: DispatchSolution) -> dict:
    return {
        "feasible": solution.feasible,
        "total_power": solution.total_power,
        "total_flow": solution.total_flow,
        "telemetry": asdict(solution.telemetry),
        "constraints": _report_dict(solution.report),
    }


@app.get("/api/plant")
async def get_plant():
    """Return the configured plant."""
    return get_config().resolved_plant().model_dump(mode="json")


@app.post("/api/dispatch")
async def dispatch_route(body: DispatchRequest):
    """Decode flows and resolve one step of plant physics."""
    plant = get_config().resolved_plant()
    action = decode_flows(plant, body.flows)
    telemetry = steady_state_dispatch(plant, action, body.building_load)
    report = check_constraints(plant, telemetry, action, get_config().reward.tolerances)
    return {"telemetry": asdict(telemetry), "constraints": _report_dict(report)}


@app.post("/api/oracle")
async def oracle_route(body: OracleRequest):
    """Minimum-power dispatch for one load."""
    cfg = get_config()
    solution = optimal_dispatch(cfg.resolved_plant(), cfg.oracle, body.building_load, cfg.reward.tolerances)
    return _solution_dict(solution)


@app.post("/api/forecast")
async def forecast_route(body: ForecastBody):
    """Forecast the next ``horizon`` steps from a history window."""
    if body.model_id == "perfect":
        raise ContractError("the perfect-foresight forecaster is not available over HTTP")
    timestamps = pd.DatetimeIndex(pd.to_datetime(body.timestamps)) if body.timestamps else None
    if timestamps is not None and len(timestamps) != len(body.load_window):
        raise ContractError("timestamps and load_window differ in length")
    if body.timestamps:
        LoadSeries(timestamps, body.load_window)
    request = ForecastRequest(
        load_window=body.load_window,
        horizon=body.horizon,
        exog_window=body.exog_window,
        timestamps=timestamps,
        exog_future=body.exog_future,
    )
    model = get_forecast_model() if body.model_id == "lag_regression" else None
    forecaster = make_forecaster(body.model_id, get_config().forecast, model=model)
    forecast = forecaster.predict(request)
    return {
        "model_id": forecast.model_id,
        "issue_time": forecast.issue_time.isoformat() if forecast.issue_time is not None else None,
        "predicted": forecast.predicted.tolist(),
    }


@app.post("/api/train")
async def train_route(body: TrainRequest, background_tasks: BackgroundTasks):
    """Start a background training run."""
    status = TrainingStatus()
    if status.is_running:
        return JSONResponse(content={"error": "Training is already running"}, status_code=409)
    status.is_running = True
    status.variant = body.variant
    status.batches = []
    status.checkpoint_path = None
    status.error = None
    status.started_at = datetime.now()
    status.finished_at = None
    background_tasks.add_task(run_training_job, get_config(), OUT_DIR, body.variant, body.smoke)
    return {"status": "started", "variant": body.variant}


@app.get("/api/train-status")
async def train_status_route():
    """Return the current training job status."""
    return TrainingStatus().to_dict()
