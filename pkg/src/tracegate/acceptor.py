"""Confidence features over a probability vector and the agreement predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .surrogate import TrainConfig, _descend

CONSTANT_BIAS = 10.0


class ConfidenceFeatures(NamedTuple):
    top1: float
    top2: float
    margin: float
    norm_entropy: float


def confidence_features(p: Sequence[float]) -> ConfidenceFeatures:
    p = np.asarray(p, dtype=np.float64)
    return ConfidenceFeatures(*feature_matrix(p[None, :])[0])


def feature_matrix(P: np.ndarray) -> np.ndarray:
    """Row-wise (top1, top2, margin, normalized entropy) for an (n, K) probability matrix."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("confidence features need probability vectors with K >= 2")
    top2_idx = P.shape[1] - 2
    part = np.partition(P, top2_idx, axis=1)
    top1 = part[:, -1]
    top2 = part[:, -2]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(P), 0.0)
    ent = -plogp.sum(axis=1) / math.log(P.shape[1])
    ent = np.clip(ent, 0.0, 1.0)
    return np.column_stack([top1, top2, top1 - top2, ent])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class AcceptorModel:
    weights: tuple[float, float, float, float]
    bias: float
    seed: int = 0

    def score_matrix(self, F: np.ndarray) -> np.ndarray:
        return _sigmoid(np.asarray(F, dtype=np.float64) @ np.asarray(self.weights) + self.bias)

    @property
    def is_constant(self) -> bool:
        return not any(self.weights)

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "bias": self.bias, "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "AcceptorModel":
        return cls(tuple(float(w) for w in doc["weights"]), float(doc["bias"]), int(doc["seed"]))


def acceptor_score(model: AcceptorModel, features: Sequence[float]) -> float:
    return float(model.score_matrix(np.asarray(features, dtype=np.float64)[None, :])[0])


def fit_acceptor(features: np.ndarray, agreement: Sequence[int], cfg: TrainConfig | None = None) -> AcceptorModel:
    """Logistic regression of agreement bits on the four confidence features.

    Uses the surrogate optimizer contract on standardized features, then folds
    the standardization into the returned weights and bias. A single-valued
    agreement vector yields the constant model (bias +/-10, zero weights).
    """
    cfg = cfg or TrainConfig()
    F = np.asarray(features, dtype=np.float64)
    a = np.asarray(agreement, dtype=np.float64)
    if F.shape[0] == 0:
        raise ValueError("cannot fit an acceptor on empty input")
    if F.shape[0] != a.shape[0]:
        raise ValueError("features and agreement lengths differ")
    if np.all(a == 1):
        return AcceptorModel((0.0, 0.0, 0.0, 0.0), CONSTANT_BIAS, cfg.seed)
    if np.all(a == 0):
        return AcceptorModel((0.0, 0.0, 0.0, 0.0), -CONSTANT_BIAS, cfg.seed)

    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd == 0.0] = 1.0
    Z = (F - mu) / sd
    params = {"w": np.zeros(F.shape[1]), "b": np.zeros(1)}

    def lg(p, idx):
        Fi, ai = Z[idx], a[idx]
        s = _sigmoid(Fi @ p["w"] + p["b"][0])
        eps = 1e-12
        loss = -np.mean(ai * np.log(s + eps) + (1 - ai) * np.log(1 - s + eps)) + 0.5 * cfg.l2 * float(p["w"] @ p["w"])
        r = (s - ai) / len(idx)
        return loss, {"w": Fi.T @ r + cfg.l2 * p["w"], "b": np.array([r.sum()])}

    _descend(params, lg, F.shape[0], cfg)
    w = params["w"] / sd
    b = float(params["b"][0] - w @ mu)
    return AcceptorModel(tuple(float(x) for x in w), b, cfg.seed)
