"""Trace records, the append-only label buffer and deterministic data splits."""

from __future__ import annotations

import enum
import hashlib
import json
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_FRACTIONS = (0.70, 0.10, 0.10, 0.10)


class TraceError(ValueError):
    """Raised when records cannot be ingested into a buffer."""


class Split(str, enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    CALIBRATION = "calibration"
    SHADOW = "shadow"


SPLIT_ORDER = (Split.TRAIN, Split.VALIDATION, Split.CALIBRATION, Split.SHADOW)


@dataclass(frozen=True)
class Trace:
    id: str
    embedding: np.ndarray
    teacher_label: int
    day: int = 0
    text: str | None = None
    ground_truth: int | None = None

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


class LabelDictionary:
    """Open-ended bijection between label strings and contiguous indices."""

    def __init__(self, labels: Iterable[str] = ()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in labels:
            self.register(name)

    def register(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self._names)
            self._names.append(name)
            self._index[name] = idx
        return idx

    def index(self, name: str) -> int:
        return self._index[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LabelDictionary) and self._names == other._names

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def copy(self) -> "LabelDictionary":
        return LabelDictionary(self._names)


def _unit_hash(trace_id: str) -> float:
    digest = hashlib.blake2b(trace_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def check_fractions(fractions: Sequence[float]) -> tuple[float, float, float, float]:
    if len(fractions) != 4:
        raise ValueError(f"expected 4 split fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be non-negative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1: {fractions}")
    return tuple(float(f) for f in fractions)  # type: ignore[return-value]


def assign_split(trace_id: str, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Split:
    """Map a trace id to a split via a 64-bit hash bucketed by cumulative fractions.

    The assignment depends on the id alone, so it is stable under buffer growth.
    """
    fractions = check_fractions(fractions)
    u = _unit_hash(trace_id)
    edge = 0.0
    for split, frac in zip(SPLIT_ORDER, fractions):
        edge += frac
        if u < edge and frac > 0:
            return split
    # u lands above the float-rounded total; fall back to the last non-empty split
    for split, frac in zip(reversed(SPLIT_ORDER), reversed(fractions)):
        if frac > 0:
            return split
    raise AssertionError("unreachable: fractions sum to 1")


@dataclass(eq=False)
class TraceBuffer:
    """Append-only trace list with a fixed embedding dimension and label dictionary."""

    dim: int | None = None
    labels: LabelDictionary = field(default_factory=LabelDictionary)
    _traces: list[Trace] = field(default_factory=list, repr=False)
    _ids: set[str] = field(default_factory=set, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self._traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.snapshot())

    def __contains__(self, trace_id: object) -> bool:
        return trace_id in self._ids

    def snapshot(self) -> list[Trace]:
        # readers see a consistent prefix; the list object is only ever appended to
        n = len(self._traces)
        return self._traces[:n]

    @property
    def day_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(t.day for t in self._traces).items()))

    @property
    def days(self) -> list[int]:
        return sorted({t.day for t in self._traces})

    @property
    def last_day(self) -> int:
        return max((t.day for t in self._traces), default=0)

    def _validate(self, traces: Sequence[Trace], n_labels: int) -> int | None:
        dim = self.dim
        seen: set[str] = set()
        for t in traces:
            if t.embedding.ndim != 1:
                raise TraceError(f"trace {t.id!r}: embedding must be a flat vector")
            if dim is None:
                dim = t.embedding.shape[0]
            if t.embedding.shape[0] != dim:
                raise TraceError(
                    f"trace {t.id!r}: embedding dimension {t.embedding.shape[0]} != {dim}"
                )
            if t.id in self._ids or t.id in seen:
                raise TraceError(f"trace {t.id!r}: duplicate id")
            seen.add(t.id)
            for lab in (t.teacher_label, t.ground_truth):
                if lab is not None and not 0 <= lab < n_labels:
                    raise TraceError(f"trace {t.id!r}: label index {lab} not registered")
        return dim

    def append(self, traces: Sequence[Trace], new_labels: Sequence[str] = ()) -> None:
        """Validate then append already-indexed traces atomically.

        ``new_labels`` are registered in the same step, after validation.
        """
        with self._lock:
            dim = self._validate(traces, len(self.labels) + len(new_labels))
            for name in new_labels:
                self.labels.register(name)
            self.dim = dim
            self._traces.extend(traces)
            self._ids.update(t.id for t in traces)


def ingest_traces(records: Iterable[dict], buffer: TraceBuffer) -> TraceBuffer:
    """Ingest raw records (string labels) into the buffer.

    All records are validated before anything is appended; an invalid record
    rejects the whole batch and leaves the buffer and its dictionary unchanged.
    """
    records = list(records)
    if not records:
        return buffer
    # staging indexes new labels from the current size, so hold the lock throughout
    with buffer._lock:
        staged = buffer.labels.copy()
        traces = []
        for rec in records:
            try:
                tid = str(rec["id"])
                emb = np.asarray(rec["embedding"], dtype=np.float64)
                teacher = staged.register(str(rec["teacher_label"]))
            except KeyError as exc:
                raise TraceError(f"record {rec.get('id')!r}: missing field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                raise TraceError(f"record {rec.get('id')!r}: {exc}") from None
            gt = rec.get("ground_truth")
            traces.append(
                Trace(
                    id=tid,
                    embedding=emb,
                    teacher_label=teacher,
                    day=int(rec.get("day", 0)),
                    text=rec.get("text"),
                    ground_truth=None if gt is None else staged.register(str(gt)),
                )
            )
        buffer.append(traces, new_labels=staged.names[len(buffer.labels):])
        return buffer


def traces_for(
    buffer: TraceBuffer | Sequence[Trace],
    split: Split,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> list[Trace]:
    """Traces whose id hashes into ``split``, in ingestion order."""
    items = buffer.snapshot() if isinstance(buffer, TraceBuffer) else buffer
    return [t for t in items if assign_split(t.id, fractions) == split]


def split_all(
    buffer: TraceBuffer | Sequence[Trace],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> dict[Split, list[Trace]]:
    items = buffer.snapshot() if isinstance(buffer, TraceBuffer) else buffer
    out: dict[Split, list[Trace]] = {s: [] for s in SPLIT_ORDER}
    for t in items:
        out[assign_split(t.id, fractions)].append(t)
    return out


def embeddings_of(traces: Sequence[Trace]) -> np.ndarray:
    if not traces:
        return np.zeros((0, 0))
    return np.stack([t.embedding for t in traces])


def teacher_labels_of(traces: Sequence[Trace]) -> np.ndarray:
    return np.fromiter((t.teacher_label for t in traces), dtype=np.int64, count=len(traces))


# -- trace files ------------------------------------------------------------

def trace_to_record(trace: Trace, labels: LabelDictionary) -> dict:
    rec: dict = {"id": trace.id}
    if trace.text is not None:
        rec["text"] = trace.text
    rec["embedding"] = trace.embedding.tolist()
    rec["teacher_label"] = labels.name(trace.teacher_label)
    rec["day"] = trace.day
    if trace.ground_truth is not None:
        rec["ground_truth"] = labels.name(trace.ground_truth)
    return rec


def read_trace_records(path: str | Path) -> list[dict]:
    """Parse a line-delimited JSON trace file, reporting the line of any defect."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}, line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceError(f"{path}, line {lineno}: expected an object")
            missing = [k for k in ("id", "embedding", "teacher_label") if k not in rec]
            if missing:
                raise TraceError(f"{path}, line {lineno}: missing field(s) {', '.join(missing)}")
            if not isinstance(rec["embedding"], list):
                raise TraceError(f"{path}, line {lineno}: embedding must be an array of numbers")
            records.append(rec)
    return records


def load_buffer(path: str | Path, buffer: TraceBuffer | None = None) -> TraceBuffer:
    return ingest_traces(read_trace_records(path), buffer if buffer is not None else TraceBuffer())


def write_traces(path: str | Path, traces: Iterable[Trace], labels: LabelDictionary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(trace_to_record(t, labels)) + "\n")
