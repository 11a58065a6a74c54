"""Request and response bodies for the routing service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class TraceRecord(BaseModel):
    id: str
    text: Optional[str] = None
    embedding: list[float] = Field(min_length=1)
    teacher_label: str
    day: int = Field(default=0, ge=0)
    ground_truth: Optional[str] = None


class ClassifyRequest(BaseModel):
    id: str
    embedding: list[float] = Field(min_length=1)
    text: Optional[str] = None


class ClassifyResponse(BaseModel):
    label: str
    decision: Literal["handled", "deferred"]
    score: float
    version: int


class IngestRequest(BaseModel):
    traces: list[TraceRecord]


class IngestResponse(BaseModel):
    ingested: int
    size: int


class RefitRequest(BaseModel):
    traces: list[TraceRecord] = Field(default_factory=list)


class VerdictSummary(BaseModel):
    version: int
    promoted: bool
    summary: str
    family: Optional[str] = None
    reason: Optional[str] = None
    tau: Optional[float] = None
    coverage: Optional[float] = None
    ta: Optional[float] = None
    n_traces: int


class StateResponse(BaseModel):
    version: int
    mode: str
    family: Optional[str] = None
    tau: Optional[float] = None
    fitted_at_day: Optional[int] = None
    n_traces: int
    n_labels: int
    alpha: float
    floor: float
