"""FastAPI service exposing the experiment stages.

The CLI mounts this app in-process by default; `peerwatch serve` runs the
same app under uvicorn for remote use. Error mapping: malformed request
bodies are FastAPI's usual 422, semantically bad configs (unknown preset,
mismatched route) are 400, missing artifacts are 404, and anything that
breaks mid-stage is a 500 with the reason in `detail`.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from . import __version__, experiments
from .events import FormatError
from .nn import CheckpointError, TrainingDiverged
from .schemas import (
    HealthResponse,
    MetricsPayload,
    PresetInfo,
    RunExperimentRequest,
    RunExperimentResponse,
    StageRequest,
    StageResponse,
)

app = FastAPI(title="peerwatch", version=__version__)


def _run_stage(stage: str, request: StageRequest) -> StageResponse:
    config = request.effective_config()
    try:
        summary = experiments.STAGES[stage](config, request.out_dir)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=f"missing artifact: {e}") from None
    except (FormatError, CheckpointError, TrainingDiverged, ValueError) as e:
        raise HTTPException(status_code=500, detail=f"{stage} failed: {e}") from None
    return StageResponse(stage=stage, out_dir=request.out_dir, summary=summary)


@app.post("/simulate", response_model=StageResponse)
def simulate(request: StageRequest) -> StageResponse:
    return _run_stage("simulate", request)


@app.post("/prepare", response_model=StageResponse)
def prepare(request: StageRequest) -> StageResponse:
    return _run_stage("prepare", request)


@app.post("/train", response_model=StageResponse)
def train(request: StageRequest) -> StageResponse:
    return _run_stage("train", request)


@app.post("/detect", response_model=StageResponse)
def detect(request: StageRequest) -> StageResponse:
    return _run_stage("detect", request)


@app.post("/evaluate", response_model=StageResponse)
def evaluate(request: StageRequest) -> StageResponse:
    return _run_stage("evaluate", request)


@app.post("/experiments/run", response_model=RunExperimentResponse)
def run_experiment(request: RunExperimentRequest) -> RunExperimentResponse:
    if request.preset is not None:
        try:
            config = experiments.get_preset(request.preset)
        except KeyError as e:
            raise HTTPException(status_code=400, detail=str(e.args[0])) from None
    else:
        config = request.config
    if request.seed is not None:
        config = config.with_seed(request.seed)
    try:
        result = experiments.run_experiment(config, request.out_dir)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=f"missing artifact: {e}") from None
    except (FormatError, CheckpointError, TrainingDiverged, ValueError) as e:
        raise HTTPException(status_code=500, detail=f"experiment failed: {e}") from None
    return RunExperimentResponse(
        name=result["name"],
        out_dir=result["out_dir"],
        stages=result["stages"],
        metrics=MetricsPayload(**result["metrics"]),
    )


@app.get("/presets", response_model=list[PresetInfo])
def presets() -> list[PresetInfo]:
    out = []
    for name, cfg in sorted(experiments.build_presets().items()):
        out.append(
            PresetInfo(
                name=name,
                scenario=cfg.sim.scenario,
                attackers=cfg.sim.n_attackers,
                victims=cfg.sim.n_victims,
                detector_mode=cfg.detector.mode,
            )
        )
    return out


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)
