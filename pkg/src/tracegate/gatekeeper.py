"""Threshold calibration, pipeline candidates and the shadow-split parity gate."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .acceptor import AcceptorModel, feature_matrix
from .surrogate import SurrogateModel
from .traces import Trace, embeddings_of, teacher_labels_of

DEFAULT_FLOOR = 0.05


class PipelineFamily(str, enum.Enum):
    GLOBAL = "Global"
    L2D = "L2D"


class RefusalReason(str, enum.Enum):
    NO_FEASIBLE_TAU = "no-feasible-tau"
    BELOW_COVERAGE_FLOOR = "below-coverage-floor"
    NO_CANDIDATES = "no-candidates"
    DEGENERATE_TASK = "degenerate-task"


@dataclass(frozen=True)
class TauCalibration:
    tau: float
    coverage: float
    ta: float


@dataclass(frozen=True)
class EvalMetrics:
    n: int
    handled: int
    agreed: int
    coverage: float
    ta: float | None
    gt_accuracy: float | None = None

    @classmethod
    def from_counts(cls, n: int, handled: int, agreed: int, gt_accuracy: float | None = None) -> "EvalMetrics":
        return cls(
            n=n,
            handled=handled,
            agreed=agreed,
            coverage=handled / n if n else 0.0,
            ta=agreed / handled if handled else None,
            gt_accuracy=gt_accuracy,
        )

    def meets(self, alpha: float) -> bool:
        # an empty handled set cannot certify anything
        return self.ta is not None and self.ta >= alpha

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalMetrics":
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class PipelineCandidate:
    family: PipelineFamily
    surrogate: SurrogateModel
    calibration: EvalMetrics
    acceptor: AcceptorModel | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.family is PipelineFamily.L2D and (self.acceptor is None or self.tau is None):
            raise ValueError("L2D candidates need an acceptor and a threshold")
        if self.family is PipelineFamily.GLOBAL and self.acceptor is not None:
            raise ValueError("Global candidates carry no acceptor")

    def scores_and_labels(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Acceptor scores (1.0 for Global) and surrogate labels for a batch."""
        P = self.surrogate.predict_proba(X)
        labels = np.argmax(P, axis=1)
        if self.family is PipelineFamily.GLOBAL:
            return np.ones(len(labels)), labels
        return self.acceptor.score_matrix(feature_matrix(P)), labels

    def handled_mask(self, scores: np.ndarray) -> np.ndarray:
        if self.family is PipelineFamily.GLOBAL:
            return np.ones(len(scores), dtype=bool)
        return scores >= self.tau

    def sort_key(self) -> tuple:
        # preference among equal coverage: Global first, then the larger threshold
        return (self.family is PipelineFamily.GLOBAL, self.tau if self.tau is not None else np.inf)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "tau": self.tau,
            "calibration": self.calibration.to_dict(),
            "surrogate": self.surrogate.to_dict(),
            "acceptor": None if self.acceptor is None else self.acceptor.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineCandidate":
        return cls(
            family=PipelineFamily(doc["family"]),
            surrogate=SurrogateModel.from_dict(doc["surrogate"]),
            calibration=EvalMetrics.from_dict(doc["calibration"]),
            acceptor=None if doc["acceptor"] is None else AcceptorModel.from_dict(doc["acceptor"]),
            tau=doc["tau"],
        )


def calibrate_tau(scores: Sequence[float], agreement: Sequence[int], alpha: float) -> TauCalibration | None:
    """Largest-coverage threshold among the unique scores whose handled TA is at least alpha.

    Handled means ``score >= tau``. Returns None when no threshold is feasible.
    """
    s = np.asarray(scores, dtype=np.float64)
    a = np.asarray(agreement, dtype=np.int64)
    if s.shape != a.shape or s.size == 0:
        raise ValueError("scores and agreement must be equal-length and non-empty")
    order = np.argsort(-s, kind="stable")
    s_sorted, a_sorted = s[order], a[order]
    handled = np.arange(1, s.size + 1)
    agreed = np.cumsum(a_sorted)
    # a threshold at a unique value handles every item down to its last occurrence
    last = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    taus, n_h, n_a = s_sorted[last], handled[last], agreed[last]
    feasible = n_a / n_h >= alpha
    if not feasible.any():
        return None
    # coverage strictly grows as tau falls, so the last feasible entry is the unique optimum
    i = np.flatnonzero(feasible)[-1]
    return TauCalibration(tau=float(taus[i]), coverage=float(n_h[i] / s.size), ta=float(n_a[i] / n_h[i]))


def agreement_bits(model: SurrogateModel, traces: Sequence[Trace]) -> np.ndarray:
    return (model.predict(embeddings_of(traces)) == teacher_labels_of(traces)).astype(np.int64)


def build_global_candidate(model: SurrogateModel, calibration: Sequence[Trace], alpha: float) -> PipelineCandidate | None:
    if not calibration:
        raise ValueError("calibration split is empty")
    agree = agreement_bits(model, calibration)
    metrics = EvalMetrics.from_counts(len(agree), len(agree), int(agree.sum()))
    if not metrics.meets(alpha):
        return None
    return PipelineCandidate(PipelineFamily.GLOBAL, model, metrics)


def build_l2d_candidate(
    model: SurrogateModel,
    acceptor: AcceptorModel,
    calibration: Sequence[Trace],
    alpha: float,
) -> PipelineCandidate | None:
    if not calibration:
        raise ValueError("calibration split is empty")
    X = embeddings_of(calibration)
    P = model.predict_proba(X)
    scores = acceptor.score_matrix(feature_matrix(P))
    agree = (np.argmax(P, axis=1) == teacher_labels_of(calibration)).astype(np.int64)
    cal = calibrate_tau(scores, agree, alpha)
    if cal is None:
        return None
    handled = scores >= cal.tau
    metrics = EvalMetrics.from_counts(len(agree), int(handled.sum()), int(agree[handled].sum()))
    return PipelineCandidate(PipelineFamily.L2D, model, metrics, acceptor=acceptor, tau=cal.tau)


def evaluate_pipeline(candidate: PipelineCandidate, data: Sequence[Trace]) -> EvalMetrics:
    """Coverage and TA on ``data``; GT accuracy over traces that carry ground truth.

    GT accuracy scores the surrogate on handled items and the teacher label on
    deferred ones.
    """
    if not data:
        raise ValueError("cannot evaluate on an empty set")
    scores, pred = candidate.scores_and_labels(embeddings_of(data))
    handled = candidate.handled_mask(scores)
    teacher = teacher_labels_of(data)
    agreed = int((pred[handled] == teacher[handled]).sum())
    return EvalMetrics.from_counts(len(data), int(handled.sum()), agreed, _gt_accuracy(data, pred, handled))


def _gt_accuracy(data: Sequence[Trace], pred: np.ndarray, handled: np.ndarray) -> float | None:
    has_gt = np.array([t.ground_truth is not None for t in data])
    if not has_gt.any():
        return None
    gt = np.array([t.ground_truth if t.ground_truth is not None else -1 for t in data])
    final = np.where(handled, pred, teacher_labels_of(data))
    return float((final[has_gt] == gt[has_gt]).mean())


@dataclass(frozen=True)
class CandidateEvaluation:
    family: PipelineFamily
    tau: float | None
    calibration: EvalMetrics
    shadow: EvalMetrics
    feasible: bool

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "tau": self.tau,
            "calibration": self.calibration.to_dict(),
            "shadow": self.shadow.to_dict(),
            "feasible": self.feasible,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CandidateEvaluation":
        return cls(
            PipelineFamily(doc["family"]),
            doc["tau"],
            EvalMetrics.from_dict(doc["calibration"]),
            EvalMetrics.from_dict(doc["shadow"]),
            doc["feasible"],
        )


@dataclass(frozen=True, eq=False)
class GateVerdict:
    alpha: float
    floor: float
    candidate: PipelineCandidate | None = None
    shadow: EvalMetrics | None = None
    reason: RefusalReason | None = None
    evaluations: tuple[CandidateEvaluation, ...] = field(default_factory=tuple)

    @property
    def promoted(self) -> bool:
        return self.candidate is not None

    def summary(self) -> str:
        if not self.promoted:
            return f"Refused: {self.reason.value}"
        return f"Promoted: {self.candidate.family.value}, cov={self.shadow.coverage:.3f}"

    def record(self) -> dict:
        """The verdict without model parameters, as written to run logs and reports."""
        return {
            "promoted": self.promoted,
            "alpha": self.alpha,
            "floor": self.floor,
            "reason": None if self.reason is None else self.reason.value,
            "family": None if self.candidate is None else self.candidate.family.value,
            "tau": None if self.candidate is None else self.candidate.tau,
            "calibration": None if self.candidate is None else self.candidate.calibration.to_dict(),
            "shadow": None if self.shadow is None else self.shadow.to_dict(),
            "candidates": [e.to_dict() for e in self.evaluations],
        }


def parity_gate(
    candidates: Sequence[PipelineCandidate],
    shadow: Sequence[Trace],
    alpha: float,
    floor: float = DEFAULT_FLOOR,
) -> GateVerdict:
    """Promote the feasible candidate with the largest shadow coverage, or refuse.

    Feasible means shadow TA >= alpha and shadow coverage >= floor.
    """
    if not 0.0 <= floor <= 1.0:
        raise ValueError("coverage floor must lie in [0, 1]")
    if not candidates:
        return GateVerdict(alpha, floor, reason=RefusalReason.NO_CANDIDATES)
    if not shadow:
        raise ValueError("shadow split is empty")
    evals = []
    for cand in candidates:
        m = evaluate_pipeline(cand, shadow)
        ok = m.meets(alpha) and m.coverage >= floor
        evals.append(CandidateEvaluation(cand.family, cand.tau, cand.calibration, m, ok))
    feasible = [(e.shadow, c) for e, c in zip(evals, candidates) if e.feasible]
    if not feasible:
        meets_ta = any(e.shadow.meets(alpha) for e in evals)
        reason = RefusalReason.BELOW_COVERAGE_FLOOR if meets_ta else RefusalReason.NO_FEASIBLE_TAU
        return GateVerdict(alpha, floor, reason=reason, evaluations=tuple(evals))
    metrics, best = max(feasible, key=lambda mc: (mc[0].coverage, *mc[1].sort_key()))
    return GateVerdict(alpha, floor, candidate=best, shadow=metrics, evaluations=tuple(evals))
