import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tracegate.acceptor import (
    AcceptorModel,
    acceptor_score,
    confidence_features,
    feature_matrix,
    fit_acceptor,
)
from tracegate.surrogate import TrainConfig


def auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize(
    "p, expected",
    [
        ((1, 0, 0, 0), (1, 0, 1, 0)),
        ((0.5, 0.5), (0.5, 0.5, 0, 1)),
        ((0.7, 0.2, 0.1), (0.7, 0.2, 0.5, -(0.7 * math.log(0.7) + 0.2 * math.log(0.2) + 0.1 * math.log(0.1)) / math.log(3))),
    ],
)
def test_feature_examples(p, expected):
    assert confidence_features(p) == pytest.approx(expected, abs=1e-12)


def test_entropy_example_value():
    assert confidence_features((0.7, 0.2, 0.1)).norm_entropy == pytest.approx(0.7299, abs=1e-4)


prob_vectors = st.integers(2, 8).flatmap(
    lambda k: arrays(np.float64, k, elements=st.floats(0, 1, allow_nan=False))
).filter(lambda a: a.sum() > 1e-6).map(lambda a: a / a.sum())


@given(prob_vectors, st.randoms())
@settings(max_examples=200)
def test_feature_invariants(p, rnd):
    f = confidence_features(p)
    assert f.margin == f.top1 - f.top2
    assert 0.0 <= f.norm_entropy <= 1.0
    assert f.top1 >= f.top2
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    assert confidence_features(p[perm]) == pytest.approx(f, abs=1e-12)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        feature_matrix(np.ones((3, 1)))


def test_all_agree_gives_constant_high_scores():
    F = np.random.default_rng(0).uniform(size=(50, 4))
    m = fit_acceptor(F, np.ones(50))
    assert m.is_constant
    assert (m.score_matrix(F) > 0.999).all()


def test_margin_rule_learned():
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.ones(5) * 0.6, size=1200)
    F = feature_matrix(P)
    agree = (F[:, 2] > 0.5).astype(int)
    m = fit_acceptor(F[:800], agree[:800], TrainConfig(epochs=300))
    assert auc(m.score_matrix(F[800:]), agree[800:]) >= 0.99


def test_fit_deterministic():
    rng = np.random.default_rng(4)
    F = rng.uniform(size=(300, 4))
    a = (rng.uniform(size=300) < F[:, 0]).astype(int)
    assert fit_acceptor(F, a, TrainConfig(seed=2)) == fit_acceptor(F, a, TrainConfig(seed=2))


def test_zero_model_scores_half():
    assert acceptor_score(AcceptorModel((0, 0, 0, 0), 0.0), (0.3, 0.2, 0.1, 0.9)) == 0.5


@pytest.mark.parametrize("entropy, expected", [(0.0, 1 / (1 + math.exp(-4))), (1.0, 1 / (1 + math.exp(4)))])
def test_entropy_weighted_model(entropy, expected):
    m = AcceptorModel((0, 0, 0, -8), 4.0)
    assert acceptor_score(m, (0.5, 0.2, 0.3, entropy)) == pytest.approx(expected, abs=1e-12)


def test_round_trip():
    m = AcceptorModel((0.1, -0.2, 3.0, -4.0), 0.5, seed=9)
    assert AcceptorModel.from_dict(m.to_dict()) == m
