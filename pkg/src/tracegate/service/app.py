"""FastAPI surface over an ``Engine``."""

from __future__ import annotations

from contextlib import asynccontextmanager

from fastapi import FastAPI, HTTPException

from ..artifacts import ReportBundle
from ..router import Engine, TeacherError
from ..traces import TraceError
from .schemas import (
    ClassifyRequest,
    ClassifyResponse,
    IngestRequest,
    IngestResponse,
    RefitRequest,
    StateResponse,
    VerdictSummary,
)


def create_app(engine: Engine, persist: bool = True) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        if persist:
            engine.save()  # flush deferral traces on shutdown

    app = FastAPI(title="tracegate", lifespan=lifespan)
    app.state.engine = engine

    @app.post("/classify", response_model=ClassifyResponse)
    def classify(req: ClassifyRequest):
        try:
            label, decision, version = engine.classify(req.id, req.embedding, req.text)
        except (ValueError, TraceError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except TeacherError as exc:
            raise HTTPException(status_code=502, detail=str(exc))
        return ClassifyResponse(label=label, decision=decision.kind, score=decision.score, version=version)

    @app.post("/traces", response_model=IngestResponse)
    def ingest(req: IngestRequest):
        records = [t.model_dump(exclude_none=True) for t in req.traces]
        try:
            size = engine.ingest(records)
        except TraceError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return IngestResponse(ingested=len(records), size=size)

    @app.post("/refit", response_model=VerdictSummary)
    def refit(req: RefitRequest | None = None):
        records = [t.model_dump(exclude_none=True) for t in req.traces] if req else []
        if not records and len(engine.buffer) == 0:
            raise HTTPException(status_code=409, detail="buffer is empty; ingest traces first")
        try:
            result = engine.refit(records, persist=persist, command="serve/refit")
        except TraceError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return verdict_summary(engine, result.verdict, result.state.version)

    @app.get("/report/latest")
    def latest_report() -> dict:
        report: ReportBundle | None = engine.latest_report
        if report is None:
            raise HTTPException(status_code=404, detail="no report yet")
        return report.to_dict()

    @app.get("/state", response_model=StateResponse)
    def state():
        st = engine.state
        pipe = st.pipeline
        return StateResponse(
            version=st.version,
            mode=st.mode,
            family=None if pipe is None else pipe.family.value,
            tau=None if pipe is None else pipe.tau,
            fitted_at_day=st.fitted_at_day,
            n_traces=len(engine.buffer),
            n_labels=len(engine.buffer.labels),
            alpha=engine.cfg.alpha,
            floor=engine.cfg.floor,
        )

    return app


def verdict_summary(engine: Engine, verdict, version: int) -> VerdictSummary:
    shadow = verdict.shadow
    return VerdictSummary(
        version=version,
        promoted=verdict.promoted,
        summary=verdict.summary(),
        family=None if not verdict.promoted else verdict.candidate.family.value,
        reason=None if verdict.reason is None else verdict.reason.value,
        tau=None if not verdict.promoted else verdict.candidate.tau,
        coverage=None if shadow is None else shadow.coverage,
        ta=None if shadow is None else shadow.ta,
        n_traces=len(engine.buffer),
    )
