"""Live routing state and the per-input hybrid decision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gatekeeper import PipelineCandidate, PipelineFamily

STATE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RouteDecision:
    handled: bool
    score: float
    label: int | None = None

    @property
    def kind(self) -> str:
        return "handled" if self.handled else "deferred"


@dataclass(frozen=True, eq=False)
class RoutingState:
    """TeacherOnly when ``pipeline`` is None, otherwise Active.

    ``version`` counts fits and updates; it is 0 only before the first fit.
    """

    version: int = 0
    pipeline: PipelineCandidate | None = None
    fitted_at_day: int | None = None

    @property
    def active(self) -> bool:
        return self.pipeline is not None

    @property
    def mode(self) -> str:
        if self.pipeline is None:
            return "TeacherOnly"
        return f"Active({self.pipeline.family.value})"

    @property
    def dim(self) -> int | None:
        return None if self.pipeline is None else self.pipeline.surrogate.dim

    def to_dict(self) -> dict:
        return {
            "format_version": STATE_FORMAT_VERSION,
            "version": self.version,
            "fitted_at_day": self.fitted_at_day,
            "pipeline": None if self.pipeline is None else self.pipeline.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RoutingState":
        if doc.get("format_version") != STATE_FORMAT_VERSION:
            raise ValueError(f"unsupported state format {doc.get('format_version')!r}")
        pipe = doc.get("pipeline")
        return cls(
            version=int(doc["version"]),
            pipeline=None if pipe is None else PipelineCandidate.from_dict(pipe),
            fitted_at_day=doc.get("fitted_at_day"),
        )


def route_batch(state: RoutingState, X: np.ndarray) -> list[RouteDecision]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if state.pipeline is None:
        return [RouteDecision(False, 0.0) for _ in range(X.shape[0])]
    pipe = state.pipeline
    scores, labels = pipe.scores_and_labels(X)
    handled = pipe.handled_mask(scores)
    return [
        RouteDecision(bool(h), float(s), int(lab) if h else None)
        for h, s, lab in zip(handled, scores, labels)
    ]


def route(state: RoutingState, embedding: Sequence[float]) -> RouteDecision:
    """Surrogate label when the acceptor score clears tau (always for Global), else defer."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 1:
        raise ValueError("expected a single flat embedding")
    if state.pipeline is not None and emb.shape[0] != state.dim:
        raise ValueError(f"embedding dimension {emb.shape[0]} != pipeline dimension {state.dim}")
    return route_batch(state, emb[None, :])[0]


def is_global(state: RoutingState) -> bool:
    return state.pipeline is not None and state.pipeline.family is PipelineFamily.GLOBAL
