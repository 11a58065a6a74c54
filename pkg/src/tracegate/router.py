"""Routing, the teacher fallback, and the fit/update flywheel."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from .acceptor import feature_matrix, fit_acceptor
from .artifacts import ReportBundle, build_report, emit_report
from .config import RunConfig
from .gatekeeper import (
    DEFAULT_FLOOR,
    GateVerdict,
    RefusalReason,
    agreement_bits,
    build_global_candidate,
    build_l2d_candidate,
    parity_gate,
)
from .state import RouteDecision, RoutingState, route
from .surrogate import DegenerateTaskError, TrainConfig, fit_pool, select_best
from .traces import (
    DEFAULT_FRACTIONS,
    Split,
    TraceBuffer,
    embeddings_of,
    ingest_traces,
    load_buffer,
    read_trace_records,
    split_all,
    teacher_labels_of,
    write_traces,
)

log = logging.getLogger(__name__)


class TeacherError(RuntimeError):
    """The teacher could not label a deferred input."""


class TeacherClient(Protocol):
    def classify(self, trace_id: str, text: str | None, embedding: Sequence[float]) -> str: ...


class CachedOracle:
    """Teacher answers replayed from a trace file (or an id -> label mapping)."""

    def __init__(self, answers: dict[str, str]):
        self.answers = dict(answers)

    @classmethod
    def from_file(cls, path: str | Path) -> "CachedOracle":
        return cls({str(r["id"]): str(r["teacher_label"]) for r in read_trace_records(path)})

    def classify(self, trace_id, text, embedding):
        try:
            return self.answers[trace_id]
        except KeyError:
            raise TeacherError(f"oracle has no cached label for id {trace_id!r}") from None


class RemoteEndpoint:
    """POSTs ``{"id", "text"}`` and expects ``{"label": ...}`` back."""

    def __init__(self, url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self.url = url
        self.timeout = timeout
        self._client = client

    def classify(self, trace_id, text, embedding):
        payload = {"id": trace_id, "text": text}
        try:
            if self._client is not None:
                resp = self._client.post(self.url, json=payload, timeout=self.timeout)
            else:
                resp = httpx.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
            label = resp.json()["label"]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise TeacherError(f"teacher endpoint failed for id {trace_id!r}: {exc}") from exc
        if not isinstance(label, str) or not label:
            raise TeacherError(f"teacher endpoint returned no label for id {trace_id!r}")
        return label


def teacher_from_config(cfg: RunConfig) -> TeacherClient | None:
    if cfg.teacher_oracle:
        return CachedOracle.from_file(cfg.teacher_oracle)
    if cfg.teacher_url:
        return RemoteEndpoint(cfg.teacher_url)
    return None


def classify(
    state: RoutingState,
    trace_id: str,
    embedding: Sequence[float],
    teacher: TeacherClient | None,
    buffer: TraceBuffer,
    text: str | None = None,
    day: int | None = None,
) -> tuple[str, RouteDecision]:
    """Answer one input; deferrals call the teacher and log a new trace.

    A teacher failure propagates and nothing is appended.
    """
    decision = route(state, embedding)
    if decision.handled:
        return state.pipeline.surrogate.labels[decision.label], decision
    if teacher is None:
        raise TeacherError("input deferred but no teacher is configured")
    label = teacher.classify(trace_id, text, embedding)
    record = {"id": trace_id, "embedding": list(map(float, embedding)), "teacher_label": label,
              "day": buffer.last_day if day is None else day}
    if text is not None:
        record["text"] = text
    ingest_traces([record], buffer)
    return label, decision


@dataclass(frozen=True, eq=False)
class FitResult:
    state: RoutingState
    report: ReportBundle
    verdict: GateVerdict


def fit(
    buffer: TraceBuffer,
    alpha: float,
    cfg: TrainConfig,
    floor: float = DEFAULT_FLOOR,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    previous: RoutingState | None = None,
    pair_cap: int = 5,
    disagreement_cap: int = 10,
) -> FitResult:
    """Full refit from scratch: split, train the pool, select, fit the acceptor, gate.

    The new state's version is one past ``previous``; a refusal yields TeacherOnly.
    """
    if len(buffer) == 0:
        raise ValueError("cannot fit on an empty buffer")
    version = (previous.version if previous else 0) + 1
    splits = split_all(buffer, fractions)
    labels = buffer.labels
    train, val, cal, shadow = (splits[s] for s in (Split.TRAIN, Split.VALIDATION, Split.CALIBRATION, Split.SHADOW))

    def refuse(reason: RefusalReason) -> FitResult:
        verdict = GateVerdict(alpha, floor, reason=reason)
        state = RoutingState(version, None, buffer.last_day)
        return FitResult(state, build_report(state, verdict, shadow, labels, previous), verdict)

    if len(set(teacher_labels_of(train).tolist())) < 2:
        return refuse(RefusalReason.DEGENERATE_TASK)
    if not (val and cal and shadow):
        return refuse(RefusalReason.NO_CANDIDATES)
    try:
        pool = fit_pool(train, cfg, labels.names)
    except DegenerateTaskError:
        return refuse(RefusalReason.DEGENERATE_TASK)
    best = select_best(pool, val)
    val_features = feature_matrix(best.predict_proba(embeddings_of(val)))
    acceptor = fit_acceptor(val_features, agreement_bits(best, val), cfg)
    candidates = [
        c for c in (
            build_global_candidate(best, cal, alpha),
            build_l2d_candidate(best, acceptor, cal, alpha),
        ) if c is not None
    ]
    if not candidates:
        # both families were dropped because no tau reaches alpha on Calibration
        return refuse(RefusalReason.NO_FEASIBLE_TAU)
    verdict = parity_gate(candidates, shadow, alpha, floor)
    state = RoutingState(version, verdict.candidate, buffer.last_day)
    report = build_report(state, verdict, shadow, labels, previous, pair_cap, disagreement_cap)
    log.info("refit v%d on %d traces: %s", version, len(buffer), verdict.summary())
    return FitResult(state, report, verdict)


def update(
    state: RoutingState,
    new_records: Sequence[dict],
    buffer: TraceBuffer,
    alpha: float,
    cfg: TrainConfig,
    **kwargs,
) -> FitResult:
    """Merge new traces into the buffer and refit from scratch."""
    ingest_traces(new_records, buffer)
    return fit(buffer, alpha, cfg, previous=state, **kwargs)


# -- stateful engine --------------------------------------------------------

class Engine:
    """Thread-safe owner of a buffer, the live routing state and its reports.

    Classification reads the current immutable state; refits run one at a
    time and publish a new state with a single reference swap.
    """

    STATE_FILE = "state.json"
    BUFFER_FILE = "buffer.jsonl"
    RUN_LOG = "runlog.jsonl"
    REPORT_DIR = "reports"

    def __init__(self, cfg: RunConfig, buffer: TraceBuffer | None = None,
                 state: RoutingState | None = None, teacher: TeacherClient | None = None):
        self.cfg = cfg
        self.buffer = buffer if buffer is not None else TraceBuffer()
        self.state = state if state is not None else RoutingState()
        self.teacher = teacher
        self.latest_report: ReportBundle | None = None
        self._refit_lock = threading.Lock()

    # persistence
    @classmethod
    def open(cls, cfg: RunConfig, teacher: TeacherClient | None = None) -> "Engine":
        out = cfg.out_dir
        buffer = TraceBuffer()
        if (out / cls.BUFFER_FILE).exists():
            load_buffer(out / cls.BUFFER_FILE, buffer)
        state = RoutingState()
        if (out / cls.STATE_FILE).exists():
            state = RoutingState.from_dict(json.loads((out / cls.STATE_FILE).read_text()))
        engine = cls(cfg, buffer, state, teacher)
        latest = out / cls.REPORT_DIR / f"report-v{state.version}.json"
        if latest.exists():
            engine.latest_report = ReportBundle.from_dict(json.loads(latest.read_text()))
        return engine

    def save(self) -> None:
        out = self.cfg.out_dir
        out.mkdir(parents=True, exist_ok=True)
        write_traces(out / self.BUFFER_FILE, self.buffer.snapshot(), self.buffer.labels)
        (out / self.STATE_FILE).write_text(json.dumps(self.state.to_dict()))

    def write_report(self, report: ReportBundle) -> dict[str, str]:
        rdir = self.cfg.out_dir / self.REPORT_DIR
        rdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "json": str(rdir / f"report-v{report.version}.json"),
            "markdown": str(rdir / f"report-v{report.version}.md"),
        }
        Path(paths["json"]).write_text(emit_report(report, "json"))
        Path(paths["markdown"]).write_text(emit_report(report, "markdown"))
        return paths

    def append_log(self, entry: dict) -> None:
        out = self.cfg.out_dir
        out.mkdir(parents=True, exist_ok=True)
        entry = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "config": self.cfg.to_dict(), **entry}
        with open(out / self.RUN_LOG, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")

    # operations
    def classify(self, trace_id: str, embedding: Sequence[float], text: str | None = None):
        state = self.state  # pin the version for this request
        label, decision = classify(state, trace_id, embedding, self.teacher, self.buffer, text)
        return label, decision, state.version

    def ingest(self, records: Sequence[dict]) -> int:
        ingest_traces(records, self.buffer)
        return len(self.buffer)

    def refit(self, new_records: Sequence[dict] = (), persist: bool = True, command: str = "refit") -> FitResult:
        with self._refit_lock:
            cfg = self.cfg
            if new_records:
                ingest_traces(new_records, self.buffer)
            result = fit(
                self.buffer, cfg.alpha, cfg.train_config(), cfg.floor, cfg.splits,
                previous=self.state if self.state.version else None,
                pair_cap=cfg.pair_cap, disagreement_cap=cfg.disagreement_cap,
            )
            self.state = result.state
            self.latest_report = result.report
            if persist:
                paths = self.write_report(result.report)
                self.save()
                self.append_log({
                    "command": command,
                    "version": result.state.version,
                    "n_traces": len(self.buffer),
                    "day_counts": {str(k): v for k, v in self.buffer.day_counts.items()},
                    "verdict": result.verdict.record(),
                    "reports": paths,
                })
            return result
