"""HTTP facade over the pipeline.

One endpoint per concern: health probe, stage discovery, and stage execution.
The CLI talks to this app (remotely or in-process), so every run goes through
the same validation and manifest path regardless of entry point.

Domain and validation failures map to structured error JSON of the shape
`{"error": {"type": ..., "message": ...}}` rather than bare 500s, so callers
can branch on the type without scraping messages.
"""

from __future__ import annotations

import logging
from typing import Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from . import __version__
from .errors import CortexencError
from .pipeline import STAGES, run_stage

logger = logging.getLogger("cortexenc.service")

app = FastAPI(title="cortexenc", version=__version__)


class StageRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict
    out_dir: str
    threads: Optional[int] = None
    seed: Optional[int] = None


def error_payload(exc: Exception) -> dict:
    return {"error": {"type": type(exc).__name__, "message": str(exc)}}


# caller mistakes (bad config, missing/corrupt files) vs genuine server faults
_CLIENT_ERRORS = (CortexencError, OSError)


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/stages")
def stages() -> dict:
    return {"stages": sorted(STAGES)}


@app.post("/stages/{stage}")
def post_stage(stage: str, req: StageRequest):
    if stage not in STAGES:
        return JSONResponse(status_code=404, content=error_payload(
            CortexencError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")))
    try:
        manifest = run_stage(stage, req.config, req.out_dir,
                             threads=req.threads, seed=req.seed)
    except Exception as exc:  # noqa: BLE001 - boundary: everything becomes error JSON
        status = 422 if isinstance(exc, _CLIENT_ERRORS) else 500
        if status == 500:
            logger.exception("stage %s failed", stage)
        return JSONResponse(status_code=status, content=error_payload(exc))
    return manifest
