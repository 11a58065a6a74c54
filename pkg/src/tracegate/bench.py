"""Synthetic worlds, the day-by-day protocol, alpha sweeps, the baseline and cost projection."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .gatekeeper import EvalMetrics, calibrate_tau
from .router import FitResult, fit
from .state import RoutingState, route_batch
from .surrogate import fit_multinomial_lr
from .traces import (
    Split,
    Trace,
    TraceBuffer,
    embeddings_of,
    ingest_traces,
    teacher_labels_of,
    trace_to_record,
    traces_for,
)

_WORDS = (
    "card account transfer payment balance refund cash limit fee app pin top up "
    "exchange rate pending declined verify identity phone lost stolen travel abroad "
    "please help why how when can i my the is not working still charged twice"
).split()


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 10
    dim: int = 32
    separation: float = 8.0
    teacher_noise: float = 0.02
    n_per_day: int = 1000
    days: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.dim < 2 or self.days < 1 or self.n_per_day < 1:
            raise ValueError("need n_classes >= 2, dim >= 2, days >= 1, n_per_day >= 1")
        if not 0.0 <= self.teacher_noise < 1.0:
            raise ValueError("teacher_noise must lie in [0, 1)")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")

    @property
    def label_names(self) -> list[str]:
        width = len(str(self.n_classes - 1))
        return [f"intent_{k:0{width}d}" for k in range(self.n_classes)]


class SyntheticWorld:
    """K unit-variance Gaussian clusters; the teacher is ground truth with uniform flips."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.centroids = _place_centroids(spec, np.random.default_rng([spec.seed, 0]))

    def sample(self, n: int, rng: np.random.Generator, prefix: str, day: int) -> list[dict]:
        spec = self.spec
        gt = rng.integers(0, spec.n_classes, size=n)
        X = self.centroids[gt] + rng.standard_normal((n, spec.dim))
        flip = rng.random(n) < spec.teacher_noise
        # a flip moves to one of the other K-1 classes uniformly
        offset = rng.integers(1, spec.n_classes, size=n)
        teacher = np.where(flip, (gt + offset) % spec.n_classes, gt)
        n_words = rng.integers(3, 25, size=n)
        names = spec.label_names
        records = []
        for i in range(n):
            words = rng.choice(_WORDS, size=n_words[i])
            records.append({
                "id": f"{prefix}-d{day}-{i:06d}",
                "text": f"{names[gt[i]].replace('_', ' ')} " + " ".join(words),
                "embedding": X[i].tolist(),
                "teacher_label": names[teacher[i]],
                "day": day,
                "ground_truth": names[gt[i]],
            })
        return records

    def daily_records(self) -> list[dict]:
        rng = np.random.default_rng([self.spec.seed, 1])
        out = []
        for day in range(1, self.spec.days + 1):
            out.extend(self.sample(self.spec.n_per_day, rng, "tr", day))
        return out

    def test_records(self, n: int | None = None) -> list[dict]:
        spec = self.spec
        n = n if n is not None else max(1, round(0.3 * spec.n_per_day * spec.days))
        return self.sample(n, np.random.default_rng([spec.seed, 2]), "te", 0)


def _place_centroids(spec: SyntheticSpec, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    s = spec.separation
    if s == 0:
        return np.zeros((spec.n_classes, spec.dim))
    centroids: list[np.ndarray] = []
    for _ in range(spec.n_classes):
        for _ in range(max_tries):
            u = rng.standard_normal(spec.dim)
            c = s * u / np.linalg.norm(u)
            if all(np.linalg.norm(c - o) >= s for o in centroids):
                centroids.append(c)
                break
        else:
            raise ValueError(f"cannot place {spec.n_classes} centroids {s} apart in {spec.dim} dimensions")
    return np.stack(centroids)


def _labelled(names: Sequence[str]) -> TraceBuffer:
    buf = TraceBuffer()
    for name in names:
        buf.labels.register(name)
    return buf


def generate_synthetic(spec: SyntheticSpec) -> TraceBuffer:
    """Deterministic day-tagged buffer with ground truth, labels registered in class order."""
    buf = _labelled(spec.label_names)
    return ingest_traces(SyntheticWorld(spec).daily_records(), buf)


def generate_test_set(spec: SyntheticSpec, labels_from: TraceBuffer, n: int | None = None) -> list[Trace]:
    """A fresh held-out sample from the same world, indexed with ``labels_from``'s dictionary."""
    buf = _labelled(labels_from.labels.names)
    return ingest_traces(SyntheticWorld(spec).test_records(n), buf).snapshot()


# -- protocol ---------------------------------------------------------------

def evaluate_state(state: RoutingState, data: Sequence[Trace]) -> EvalMetrics:
    """Coverage/TA/GT accuracy of a routing state, TeacherOnly included (coverage 0)."""
    if not data:
        raise ValueError("cannot evaluate on an empty set")
    decisions = route_batch(state, embeddings_of(data))
    handled = np.array([d.handled for d in decisions])
    teacher = teacher_labels_of(data)
    pred = np.array([d.label if d.handled else -1 for d in decisions])
    agreed = int((pred[handled] == teacher[handled]).sum())
    has_gt = np.array([t.ground_truth is not None for t in data])
    gt_acc = None
    if has_gt.any():
        gt = np.array([-2 if t.ground_truth is None else t.ground_truth for t in data])
        final = np.where(handled, pred, teacher)
        gt_acc = float((final[has_gt] == gt[has_gt]).mean())
    return EvalMetrics.from_counts(len(data), int(handled.sum()), agreed, gt_acc)


@dataclass
class DayRecord:
    day: int
    traces: int
    version: int
    promoted: bool
    family: str | None
    reason: str | None
    cal_coverage: float | None
    cal_ta: float | None
    shadow_coverage: float | None
    shadow_ta: float | None


@dataclass
class ProtocolResult:
    alpha: float
    days: list[DayRecord]
    test: EvalMetrics | None
    final_state: RoutingState = field(repr=False)
    fits: list[FitResult] = field(default_factory=list, repr=False)


def _day_record(day: int, n: int, res: FitResult) -> DayRecord:
    v = res.verdict
    cal = v.candidate.calibration if v.promoted else None
    return DayRecord(
        day=day,
        traces=n,
        version=res.state.version,
        promoted=v.promoted,
        family=None if not v.promoted else v.candidate.family.value,
        reason=None if v.reason is None else v.reason.value,
        cal_coverage=None if cal is None else cal.coverage,
        cal_ta=None if cal is None else cal.ta,
        shadow_coverage=None if v.shadow is None else v.shadow.coverage,
        shadow_ta=None if v.shadow is None else v.shadow.ta,
    )


def _records_by_day(buffer: TraceBuffer, days: int) -> tuple[list[int], dict[int, list[dict]]]:
    tags = buffer.days
    if len(tags) < days:
        raise ValueError(f"protocol needs {days} distinct day tags, buffer has {len(tags)}: {tags}")
    used = tags[:days]
    by_day: dict[int, list[dict]] = {d: [] for d in used}
    for t in buffer.snapshot():
        if t.day in by_day:
            by_day[t.day].append(trace_to_record(t, buffer.labels))
    return used, by_day


def run_protocol(
    buffer: TraceBuffer,
    days: int,
    alpha: float,
    cfg: RunConfig,
    test: Sequence[Trace] | None = None,
) -> ProtocolResult:
    """Fit on the first day's batch, update with each later batch, evaluate on ``test``."""
    used, by_day = _records_by_day(buffer, days)
    work = _labelled(buffer.labels.names)
    tcfg = cfg.train_config()
    state: RoutingState | None = None
    records, fits = [], []
    for day in used:
        ingest_traces(by_day[day], work)
        res = fit(work, alpha, tcfg, cfg.floor, cfg.splits, previous=state,
                  pair_cap=cfg.pair_cap, disagreement_cap=cfg.disagreement_cap)
        state = res.state
        fits.append(res)
        records.append(_day_record(day, len(work), res))
    metrics = evaluate_state(state, test) if test else None
    return ProtocolResult(alpha, records, metrics, state, fits)


# -- baseline ---------------------------------------------------------------

class ConfidenceBaseline:
    """One softmax regression trained on the whole Train split at once.

    Inputs are deferred when the max class probability falls below a threshold
    swept on the Calibration split; fitting is alpha-independent, so one
    instance serves a whole sweep.
    """

    def __init__(self, buffer: TraceBuffer | Sequence[Trace], cfg: RunConfig, labels: Sequence[str]):
        train = traces_for(buffer, Split.TRAIN, cfg.splits)
        self.calibration = traces_for(buffer, Split.CALIBRATION, cfg.splits)
        self.model = fit_multinomial_lr(train, cfg.train_config(), labels)
        P = self.model.predict_proba(embeddings_of(self.calibration))
        self._cal_conf = P.max(axis=1)
        self._cal_agree = (P.argmax(axis=1) == teacher_labels_of(self.calibration)).astype(np.int64)

    def threshold(self, alpha: float) -> float | None:
        cal = calibrate_tau(self._cal_conf, self._cal_agree, alpha)
        return None if cal is None else cal.tau

    def evaluate(self, alpha: float, data: Sequence[Trace]) -> EvalMetrics:
        tau = self.threshold(alpha)
        P = self.model.predict_proba(embeddings_of(data))
        pred = P.argmax(axis=1)
        handled = np.zeros(len(data), dtype=bool) if tau is None else P.max(axis=1) >= tau
        teacher = teacher_labels_of(data)
        agreed = int((pred[handled] == teacher[handled]).sum())
        has_gt = np.array([t.ground_truth is not None for t in data])
        gt_acc = None
        if has_gt.any():
            gt = np.array([-2 if t.ground_truth is None else t.ground_truth for t in data])
            gt_acc = float((np.where(handled, pred, teacher)[has_gt] == gt[has_gt]).mean())
        return EvalMetrics.from_counts(len(data), int(handled.sum()), agreed, gt_acc)


def baseline_confidence_threshold(
    buffer: TraceBuffer,
    alpha: float,
    cfg: RunConfig,
    test: Sequence[Trace] | None = None,
) -> EvalMetrics:
    if len(buffer) == 0:
        raise ValueError("baseline needs a non-empty buffer")
    base = ConfidenceBaseline(buffer, cfg, buffer.labels.names)
    return base.evaluate(alpha, test if test else base.calibration)


# -- sweep ------------------------------------------------------------------

SWEEP_COLUMNS = ("alpha", "cov", "ta", "gt_acc", "baseline_cov", "baseline_ta")
DEFAULT_ALPHAS = (0.80, 0.85, 0.90, 0.95)


@dataclass
class SweepRow:
    alpha: float
    cov: float
    ta: float | None
    gt_acc: float | None
    baseline_cov: float
    baseline_ta: float | None
    days: list[DayRecord] = field(default_factory=list)


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def to_dict(self) -> dict:
        return {"rows": [
            {**{c: getattr(r, c) for c in SWEEP_COLUMNS}, "days": [d.__dict__ for d in r.days]}
            for r in self.rows
        ]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow(["" if getattr(r, c) is None else f"{getattr(r, c):.6g}" for c in SWEEP_COLUMNS])
        return buf.getvalue()

    def table(self) -> str:
        """Fixed-width summary in the coverage / TA / baseline / GT column layout."""
        head = f"{'alpha':>6} | {'Cov':>7} {'TA':>6} | {'B.Cov':>7} {'B.TA':>6} | {'GT':>6}"
        lines = [head, "-" * len(head)]
        fmt_ta = lambda x: "--" if x is None else f"{x:.3f}"
        for r in self.rows:
            lines.append(
                f"{r.alpha:>6.2f} | {100 * r.cov:>6.1f}% {fmt_ta(r.ta):>6} | "
                f"{100 * r.baseline_cov:>6.1f}% {fmt_ta(r.baseline_ta):>6} | {fmt_ta(r.gt_acc):>6}"
            )
        return "\n".join(lines)


def run_alpha_sweep(
    buffer: TraceBuffer,
    alphas: Sequence[float],
    cfg: RunConfig,
    test: Sequence[Trace] | None = None,
    days: int | None = None,
) -> SweepResult:
    """Independent protocol run per alpha with identical seed and splits, plus the baseline.

    Without a test set, both columns are measured on the final buffer's Shadow split.
    """
    if not alphas:
        raise ValueError("need at least one alpha")
    days = days if days is not None else len(buffer.days)
    used, _ = _records_by_day(buffer, days)
    hist = [t for t in buffer.snapshot() if t.day in set(used)]
    evalset = list(test) if test else traces_for(hist, Split.SHADOW, cfg.splits)
    baseline = ConfidenceBaseline(hist, cfg, buffer.labels.names)
    rows = []
    for alpha in alphas:
        res = run_protocol(buffer, days, alpha, replace(cfg, alpha=alpha))
        m = evaluate_state(res.final_state, evalset)
        b = baseline.evaluate(alpha, evalset)
        rows.append(SweepRow(alpha, m.coverage, m.ta, m.gt_accuracy, b.coverage, b.ta, res.days))
    return SweepResult(rows)


# -- cost -------------------------------------------------------------------

@dataclass(frozen=True)
class PriceModel:
    per_1k_calls: float = 2.60
    daily_volume: float = 10_000

    def __post_init__(self):
        if self.per_1k_calls < 0 or self.daily_volume < 0:
            raise ValueError("prices and volumes must be non-negative")


@dataclass(frozen=True)
class CostProjection:
    daily_cost: float
    yearly_cost: float
    saving_fraction: float
    teacher_only_daily: float
    yearly_saving: float


def cost_projection(coverage: float, price: PriceModel = PriceModel()) -> CostProjection:
    """Teacher spend when the surrogate absorbs ``coverage`` of the traffic."""
    if not 0.0 <= coverage <= 1.0 or math.isnan(coverage):
        raise ValueError("coverage must lie in [0, 1]")
    full = price.daily_volume / 1000.0 * price.per_1k_calls
    daily = full * (1.0 - coverage)
    return CostProjection(
        daily_cost=daily,
        yearly_cost=daily * 365,
        saving_fraction=coverage,
        teacher_only_daily=full,
        yearly_saving=(full - daily) * 365,
    )
