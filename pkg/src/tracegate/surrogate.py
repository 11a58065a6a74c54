"""Surrogate classifier pool: training, prediction and macro-F1 model selection.

All families operate on per-feature standardized embeddings. The shift and
scale vectors are stored with the model so prediction is self-contained.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .traces import Trace, embeddings_of, teacher_labels_of

FORMAT_VERSION = 1


class DegenerateTaskError(ValueError):
    """Training data has fewer than two distinct teacher labels."""


class Family(str, enum.Enum):
    LR = "MultinomialLR"
    MLP = "MLP"
    CENTROID = "NearestCentroid"


# tie-break preference in select_best
FAMILY_ORDER = (Family.LR, Family.MLP, Family.CENTROID)
POOL_ALIASES = {"lr": Family.LR, "mlp": Family.MLP, "centroid": Family.CENTROID}


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 200
    learning_rate: float = 0.1
    l2: float = 1e-4
    batch_size: int = 256
    hidden: int = 64
    temperature: float = 1.0
    pool: tuple[str, ...] = ("lr", "mlp", "centroid")

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.batch_size < 1 or self.hidden < 1 or self.temperature <= 0:
            raise ValueError("batch_size, hidden and temperature must be positive")
        unknown = [p for p in self.pool if p not in POOL_ALIASES]
        if unknown or not self.pool:
            raise ValueError(f"pool must be a non-empty subset of {sorted(POOL_ALIASES)}")

    @property
    def families(self) -> list[Family]:
        return [POOL_ALIASES[p] for p in self.pool]


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    family: Family
    params: dict[str, np.ndarray]
    labels: tuple[str, ...]
    seed: int
    temperature: float = 1.0
    final_loss: float = math.nan
    initial_loss: float = math.nan

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return int(self.params["shift"].shape[0])

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.params["shift"]) / self.params["scale"]

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"embedding dimension {X.shape[1]} != model dimension {self.dim}")
        Z = self._normalize(X)
        p = self.params
        if self.family is Family.LR:
            return Z @ p["W"].T + p["b"]
        if self.family is Family.MLP:
            H = np.maximum(Z @ p["W1"].T + p["b1"], 0.0)
            return H @ p["W2"].T + p["b2"]
        dist = np.sqrt(np.maximum(_sq_dists(Z, p["centroids"]), 0.0))
        out = -dist / self.temperature
        out[:, ~p["present"].astype(bool)] = -np.inf
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def same_parameters(self, other: "SurrogateModel") -> bool:
        return (
            self.family is other.family
            and self.labels == other.labels
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "family": self.family.value,
            "seed": self.seed,
            "temperature": self.temperature,
            "labels": list(self.labels),
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "params": {k: v.ravel().tolist() for k, v in self.params.items()},
            "final_loss": self.final_loss,
            "initial_loss": self.initial_loss,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SurrogateModel":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
        params = {
            k: np.asarray(doc["params"][k], dtype=np.float64).reshape(shape)
            for k, shape in doc["shapes"].items()
        }
        return cls(
            family=Family(doc["family"]),
            params=params,
            labels=tuple(doc["labels"]),
            seed=int(doc["seed"]),
            temperature=float(doc["temperature"]),
            final_loss=float(doc.get("final_loss", math.nan)),
            initial_loss=float(doc.get("initial_loss", math.nan)),
        )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return (A * A).sum(1)[:, None] - 2.0 * A @ B.T + (B * B).sum(1)[None, :]


def predict_proba(model: SurrogateModel, embedding: Sequence[float]) -> np.ndarray:
    """Class probabilities for a single embedding."""
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 1:
        raise ValueError("expected a single flat embedding")
    return model.predict_proba(emb[None, :])[0]


# -- training ---------------------------------------------------------------

def _training_arrays(train: Sequence[Trace], labels: Sequence[str]):
    if not train:
        raise ValueError("training set is empty")
    y = teacher_labels_of(train)
    if len(np.unique(y)) < 2:
        raise DegenerateTaskError("need at least 2 distinct teacher labels to fit a surrogate")
    X = embeddings_of(train)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    return X, y, shift, scale, len(labels)


def lr_loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float):
    """L2-regularized mean cross-entropy of a softmax-linear model and its gradient."""
    n = X.shape[0]
    P = softmax(X @ W.T + b)
    loss = -np.mean(np.log(np.maximum(P[np.arange(n), y], 1e-300))) + 0.5 * l2 * float((W * W).sum())
    G = P
    G[np.arange(n), y] -= 1.0
    G /= n
    return loss, G.T @ X + l2 * W, G.sum(axis=0)


def _mlp_loss_and_grad(p: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray, l2: float):
    n = X.shape[0]
    pre = X @ p["W1"].T + p["b1"]
    H = np.maximum(pre, 0.0)
    P = softmax(H @ p["W2"].T + p["b2"])
    loss = -np.mean(np.log(np.maximum(P[np.arange(n), y], 1e-300)))
    loss += 0.5 * l2 * float((p["W1"] ** 2).sum() + (p["W2"] ** 2).sum())
    G = P
    G[np.arange(n), y] -= 1.0
    G /= n
    dH = (G @ p["W2"]) * (pre > 0)
    grads = {
        "W2": G.T @ H + l2 * p["W2"],
        "b2": G.sum(axis=0),
        "W1": dH.T @ X + l2 * p["W1"],
        "b1": dH.sum(axis=0),
    }
    return loss, grads


def _descend(params: dict[str, np.ndarray], loss_and_grad, n: int, cfg: TrainConfig) -> tuple[float, float]:
    """Mini-batch gradient descent with a 1/sqrt(epoch) step decay. Updates in place."""
    rng = np.random.default_rng(cfg.seed)
    initial = loss_and_grad(params, np.arange(n))[0]
    for epoch in range(1, cfg.epochs + 1):
        step = cfg.learning_rate / math.sqrt(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            _, grads = loss_and_grad(params, order[start:start + cfg.batch_size])
            for k, g in grads.items():
                params[k] -= step * g
    final = loss_and_grad(params, np.arange(n))[0]
    return float(initial), float(final)


def fit_multinomial_lr(train: Sequence[Trace], cfg: TrainConfig, labels: Sequence[str]) -> SurrogateModel:
    """Softmax regression on teacher labels, zero-initialized."""
    X, y, shift, scale, K = _training_arrays(train, labels)
    Z = (X - shift) / scale
    params = {"W": np.zeros((K, Z.shape[1])), "b": np.zeros(K)}

    def lg(p, idx):
        loss, gW, gb = lr_loss_and_grad(p["W"], p["b"], Z[idx], y[idx], cfg.l2)
        return loss, {"W": gW, "b": gb}

    initial, final = _descend(params, lg, len(y), cfg)
    params.update(shift=shift, scale=scale)
    return SurrogateModel(Family.LR, params, tuple(labels), cfg.seed, cfg.temperature, final, initial)


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def fit_mlp(train: Sequence[Trace], cfg: TrainConfig, labels: Sequence[str]) -> SurrogateModel:
    """One hidden ReLU layer of width ``cfg.hidden`` feeding a softmax head."""
    X, y, shift, scale, K = _training_arrays(train, labels)
    Z = (X - shift) / scale
    d = Z.shape[1]
    init_rng = np.random.default_rng([cfg.seed, 1])
    params = {
        "W1": _glorot(init_rng, cfg.hidden, d),
        "b1": np.zeros(cfg.hidden),
        "W2": _glorot(init_rng, K, cfg.hidden),
        "b2": np.zeros(K),
    }
    initial, final = _descend(params, lambda p, idx: _mlp_loss_and_grad(p, Z[idx], y[idx], cfg.l2), len(y), cfg)
    params.update(shift=shift, scale=scale)
    return SurrogateModel(Family.MLP, params, tuple(labels), cfg.seed, cfg.temperature, final, initial)


def fit_nearest_centroid(train: Sequence[Trace], cfg: TrainConfig, labels: Sequence[str]) -> SurrogateModel:
    """Class means in normalized space; classes absent from training get probability 0."""
    X, y, shift, scale, K = _training_arrays(train, labels)
    Z = (X - shift) / scale
    centroids = np.zeros((K, Z.shape[1]))
    counts = np.bincount(y, minlength=K)
    np.add.at(centroids, y, Z)
    present = counts > 0
    centroids[present] /= counts[present, None]
    params = {"centroids": centroids, "present": present.astype(np.float64), "shift": shift, "scale": scale}
    return SurrogateModel(Family.CENTROID, params, tuple(labels), cfg.seed, cfg.temperature)


FITTERS = {Family.LR: fit_multinomial_lr, Family.MLP: fit_mlp, Family.CENTROID: fit_nearest_centroid}


def fit_pool(train: Sequence[Trace], cfg: TrainConfig, labels: Sequence[str]) -> list[SurrogateModel]:
    return [FITTERS[fam](train, cfg, labels) for fam in cfg.families]


# -- selection --------------------------------------------------------------

def macro_f1(predicted: Sequence[int], reference: Sequence[int], n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over classes that occur in ``reference``."""
    pred = np.asarray(predicted, dtype=np.int64)
    ref = np.asarray(reference, dtype=np.int64)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape[0]} predicted vs {ref.shape[0]} reference")
    if pred.size == 0:
        raise ValueError("macro_f1 needs at least one item")
    K = max(int(pred.max()), int(ref.max())) + 1 if n_classes is None else n_classes
    tp = np.bincount(ref[pred == ref], minlength=K)
    pred_n = np.bincount(pred, minlength=K)
    ref_n = np.bincount(ref, minlength=K)
    support = ref_n > 0
    f1 = 2.0 * tp[support] / (pred_n[support] + ref_n[support])
    return float(f1.mean())


def validation_f1(model: SurrogateModel, validation: Sequence[Trace]) -> float:
    return macro_f1(model.predict(embeddings_of(validation)), teacher_labels_of(validation), model.n_classes)


def select_best(candidates: Sequence[SurrogateModel], validation: Sequence[Trace]) -> SurrogateModel:
    """Highest validation macro-F1; ties go to the family order LR, MLP, centroid, then lower seed."""
    if not candidates:
        raise ValueError("no candidate surrogates")
    if not validation:
        raise ValueError("validation split is empty")
    scored = [(validation_f1(m, validation), m) for m in candidates]
    best = max(f for f, _ in scored)
    tied = [m for f, m in scored if f == best]
    return min(tied, key=lambda m: (FAMILY_ORDER.index(m.family), m.seed))
