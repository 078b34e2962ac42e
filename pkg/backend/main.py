"""
SIP Overload Simulator - FastAPI service
Runs scenarios, comparisons and the fluid model on request
"""

import logging
from typing import Dict, List, Optional

from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

# Load environment variables from .env file
load_dotenv()

from .catalog import ControllerCatalog
from .config import ScenarioConfig, parse_scenario, with_overrides
from .errors import ConfigError, SimulationError
from .fluid import run_fluid
from .network import compare, run_scenario

logger = logging.getLogger(__name__)

app = FastAPI(
    title="SIP Overload Simulator",
    description="Discrete-event and fluid simulation of SIP overload control",
    version="1.0.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

catalog = ControllerCatalog()


# Pydantic models
class ScenarioRequest(BaseModel):
    scenario: Optional[str] = None  # scenario document text
    name: Optional[str] = None  # or a bundled scenario
    seed: Optional[int] = Field(None, ge=0)


class RunRequest(ScenarioRequest):
    include_series: bool = False


class RunResponse(BaseModel):
    summary: Dict[str, Optional[float]]
    series: Optional[List[dict]] = None


class CompareRequest(BaseModel):
    scenarios: List[str] = Field(min_length=1)
    seeds: int = Field(3, ge=1, le=50)
    first_seed: Optional[int] = Field(None, ge=0)


class CompareRow(BaseModel):
    config: str
    goodput: List[float]
    goodput_mean: float
    means: Dict[str, Optional[float]]


class CompareResponse(BaseModel):
    seeds: List[int]
    rows: List[CompareRow]


class FluidRequest(ScenarioRequest):
    dt: Optional[float] = Field(None, gt=0)


class FluidResponse(BaseModel):
    t: List[float]
    q1: List[float]
    q2: List[float]
    r2_prime: List[float]


def _resolve(request: ScenarioRequest) -> ScenarioConfig:
    if request.scenario is not None:
        cfg = parse_scenario(request.scenario)
    elif request.name is not None:
        cfg = catalog.load_scenario(request.name)
    else:
        raise ConfigError("scenario", "give a scenario document or a bundled scenario name")
    if request.seed is not None:
        cfg = with_overrides(cfg, run={"seed": request.seed})
    return cfg


def _http_error(exc: SimulationError) -> HTTPException:
    status = 422 if isinstance(exc, ConfigError) else 500
    return HTTPException(status_code=status, detail=str(exc))


# Routes
@app.get("/health")
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "service": "sip-overload-sim"}


@app.get("/api/controllers")
async def get_controllers():
    """Registered controllers with descriptions and default parameters"""
    return catalog.list_controllers()


@app.get("/api/scenarios")
async def get_scenarios():
    return catalog.list_scenarios()


@app.post("/api/run", response_model=RunResponse)
def run(request: RunRequest):
    """
    Simulate one scenario and return its summary
    """
    try:
        report = run_scenario(_resolve(request), write=False, keep_forwarding=False)
    except SimulationError as e:
        raise _http_error(e)
    series = [vars(sample) for sample in report.series] if request.include_series else None
    return RunResponse(summary=report.summary, series=series)


@app.post("/api/compare", response_model=CompareResponse)
def compare_scenarios(request: CompareRequest):
    """
    Run several scenarios on the same seeds
    """
    try:
        cfgs = [parse_scenario(text) for text in request.scenarios]
        base = request.first_seed if request.first_seed is not None else cfgs[0].run.seed
        seeds = [base + i for i in range(request.seeds)]
        rows = compare(cfgs, seeds)
    except SimulationError as e:
        raise _http_error(e)
    return CompareResponse(
        seeds=seeds,
        rows=[CompareRow(config=r.config, goodput=r.goodput, goodput_mean=r.goodput_mean, means=r.means) for r in rows],
    )


@app.post("/api/fluid", response_model=FluidResponse)
def fluid(request: FluidRequest):
    """
    Integrate the fluid model, sampled at the scenario's sample interval
    """
    try:
        cfg = _resolve(request)
        trajectory = run_fluid(cfg, request.dt).resample(cfg.run.sample_interval)
    except SimulationError as e:
        raise _http_error(e)
    return FluidResponse(
        t=trajectory.t.tolist(),
        q1=trajectory.q1.tolist(),
        q2=trajectory.q2.tolist(),
        r2_prime=trajectory.r2_prime.tolist(),
    )
