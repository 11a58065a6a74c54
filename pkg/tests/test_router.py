import json
import math
import threading
from statistics import NormalDist

import numpy as np
import pytest

from tracegate.acceptor import AcceptorModel
from tracegate.bench import SyntheticSpec, SyntheticWorld
from tracegate.config import RunConfig
from tracegate.gatekeeper import EvalMetrics, PipelineCandidate, PipelineFamily, RefusalReason
from tracegate.router import CachedOracle, Engine, TeacherError, classify, fit, update
from tracegate.state import RoutingState, route, route_batch
from tracegate.surrogate import Family, SurrogateModel, TrainConfig
from tracegate.traces import TraceBuffer, ingest_traces

from conftest import make_buffer

FAST = TrainConfig(epochs=60)


def two_class_lr(dim=2):
    """Logit gap equals the first coordinate: p(c1) = sigmoid(x0)."""
    W = np.zeros((2, dim))
    W[1, 0] = 1.0
    return SurrogateModel(Family.LR, {"W": W, "b": np.zeros(2), "shift": np.zeros(dim), "scale": np.ones(dim)},
                          ("c0", "c1"), 0)


def active(family, acceptor=None, tau=None, dim=2):
    cand = PipelineCandidate(family, two_class_lr(dim), EvalMetrics.from_counts(1, 1, 1), acceptor, tau)
    return RoutingState(1, cand, 0)


def constant_acceptor(score):
    return AcceptorModel((0, 0, 0, 0), math.log(score / (1 - score)))


class Recorder:
    def __init__(self, label="c1"):
        self.label, self.calls = label, []

    def classify(self, trace_id, text, embedding):
        self.calls.append(trace_id)
        return self.label


def test_teacher_only_defers():
    d = route(RoutingState(), [1.0, 2.0])
    assert not d.handled and d.kind == "deferred"


def test_global_handles():
    assert all(d.handled for d in route_batch(active(PipelineFamily.GLOBAL), np.random.default_rng(0).normal(size=(50, 2))))


@pytest.mark.parametrize("score, handled", [(0.95, True), (0.85, False)])
def test_l2d_threshold(score, handled):
    state = active(PipelineFamily.L2D, constant_acceptor(score), 0.9)
    d = route(state, [0.3, 0.0])
    assert d.score == pytest.approx(score) and d.handled is handled


def test_route_rejects_wrong_dimension():
    with pytest.raises(ValueError, match="dimension"):
        route(active(PipelineFamily.GLOBAL), [1.0, 2.0, 3.0])


def test_deferred_input_appends_one_trace():
    buf = make_buffer(np.zeros((3, 2)), [0, 1, 0], names=["c0", "c1"], day=4)
    teacher = Recorder()
    label, d = classify(RoutingState(), "q1", [0.5, 0.5], teacher, buf, text="hello")
    assert (label, d.kind, len(buf)) == ("c1", "deferred", 4)
    new = buf.snapshot()[-1]
    assert new.id == "q1" and new.day == 4 and new.text == "hello"


def test_handled_input_leaves_buffer():
    buf = make_buffer(np.zeros((3, 2)), [0, 1, 0], names=["c0", "c1"])
    teacher = Recorder()
    label, d = classify(active(PipelineFamily.GLOBAL), "q1", [3.0, 0.0], teacher, buf)
    assert (label, d.kind, len(buf), teacher.calls) == ("c1", "handled", 3, [])


def test_teacher_failure_appends_nothing():
    class Broken:
        def classify(self, *a):
            raise TeacherError("down")

    buf = make_buffer(np.zeros((2, 2)), [0, 1])
    with pytest.raises(TeacherError):
        classify(RoutingState(), "q", [0.0, 0.0], Broken(), buf)
    assert len(buf) == 2


def test_novel_teacher_label_registers():
    buf = make_buffer(np.zeros((2, 2)), [0, 1], names=["c0", "c1"])
    classify(RoutingState(), "q", [0.0, 0.0], Recorder("brand_new"), buf)
    assert buf.labels.names == ["c0", "c1", "brand_new"]


def test_deferral_rate_binomial():
    # handled iff |x0| >= q where P(|Z| >= q) = 0.8; margin = |2 sigmoid(x0) - 1| is monotone in |x0|
    q = NormalDist().inv_cdf(0.6)
    tau_margin = abs(2 / (1 + math.exp(-q)) - 1)
    acc = AcceptorModel((0, 0, 50.0, 0), -50.0 * tau_margin)
    state = active(PipelineFamily.L2D, acc, 0.5)
    buf = make_buffer(np.zeros((2, 2)), [0, 1], names=["c0", "c1"])
    rng = np.random.default_rng(5)
    teacher = Recorder()
    for i, x in enumerate(rng.normal(size=(1000, 2))):
        classify(state, f"in-{i}", x, teacher, buf)
    grown = len(buf) - 2
    assert abs(grown - 200) <= 3 * math.sqrt(1000 * 0.2 * 0.8)


def test_random_labels_stay_teacher_only(random_label_buffer):
    res = fit(random_label_buffer, 0.85, FAST)
    assert not res.state.active and not res.verdict.promoted
    assert res.report.is_stub


def test_separable_promotes_global(separable_buffer):
    res = fit(separable_buffer, 0.80, FAST)
    assert res.state.mode == "Active(Global)"
    assert res.verdict.shadow.coverage == 1.0
    assert res.state.version == 1


def test_single_label_buffer_is_degenerate():
    res = fit(make_buffer(np.random.default_rng(0).normal(size=(50, 2)), [0] * 50), 0.9, FAST)
    assert res.verdict.reason is RefusalReason.DEGENERATE_TASK


def test_tiny_buffer_without_shadow_refuses():
    buf = make_buffer(np.random.default_rng(0).normal(size=(4, 2)), [0, 1, 0, 1])
    res = fit(buf, 0.9, FAST, fractions=(1, 0, 0, 0))
    assert res.verdict.reason is RefusalReason.NO_CANDIDATES


def test_empty_buffer_is_an_error():
    with pytest.raises(ValueError):
        fit(TraceBuffer(), 0.9, FAST)


def test_update_with_no_traces_matches_fit(separable_buffer):
    first = fit(separable_buffer, 0.8, FAST)
    again = update(first.state, [], separable_buffer, 0.8, FAST)
    assert again.state.version == 2
    assert again.verdict.record() == first.verdict.record()
    assert again.state.pipeline.surrogate.same_parameters(first.state.pipeline.surrogate)


def test_refused_then_promoted_as_buffer_grows():
    world = SyntheticWorld(SyntheticSpec(n_classes=40, dim=64, separation=5, teacher_noise=0.0, seed=0))
    recs = world.sample(4000, np.random.default_rng([0, 9]), "x", 1)
    buf = ingest_traces(recs[:400], TraceBuffer())
    day1 = fit(buf, 0.9, FAST)
    assert not day1.verdict.promoted
    day2 = update(day1.state, recs[400:], buf, 0.9, FAST)
    assert day2.verdict.promoted and day2.state.version == 2


def test_state_round_trip(separable_buffer):
    state = fit(separable_buffer, 0.8, FAST).state
    back = RoutingState.from_dict(json.loads(json.dumps(state.to_dict())))
    X = np.random.default_rng(1).normal(size=(20, separable_buffer.dim))
    assert [d.label for d in route_batch(back, X)] == [d.label for d in route_batch(state, X)]
    assert back.mode == state.mode and back.version == state.version


# -- engine -----------------------------------------------------------------

def test_engine_persists_and_reopens(tmp_path, separable_buffer):
    cfg = RunConfig(alpha=0.8, epochs=60, out=str(tmp_path / "run"))
    eng = Engine(cfg, separable_buffer)
    res = eng.refit(command="fit")
    assert res.verdict.promoted
    out = tmp_path / "run"
    assert (out / "state.json").exists() and (out / "reports" / "report-v1.md").exists()
    log = [json.loads(line) for line in (out / "runlog.jsonl").read_text().splitlines()]
    assert log[-1]["config"] == cfg.to_dict() and log[-1]["version"] == 1
    back = Engine.open(cfg)
    assert back.state.version == 1 and len(back.buffer) == len(separable_buffer)
    assert back.latest_report.version == 1


def test_engine_classify_pins_version():
    eng = Engine(RunConfig(), make_buffer(np.zeros((2, 2)), [0, 1], names=["c0", "c1"]),
                 RoutingState(3), teacher=CachedOracle({"a": "c1"}))
    label, decision, version = eng.classify("a", [0.0, 0.0])
    assert (label, decision.kind, version) == ("c1", "deferred", 3)


def test_oracle_unknown_id():
    with pytest.raises(TeacherError):
        CachedOracle({}).classify("nope", None, [0.0])


def test_concurrent_classify_during_refit(tmp_path, separable_buffer):
    eng = Engine(RunConfig(alpha=0.8, epochs=30, out=str(tmp_path / "r")))
    ingest_traces([{"id": t.id, "embedding": t.embedding.tolist(), "teacher_label": separable_buffer.labels.name(t.teacher_label)}
                   for t in separable_buffer], eng.buffer)
    eng.teacher = Recorder(separable_buffer.labels.name(0))
    errors = []

    def hammer():
        rng = np.random.default_rng(0)
        for i in range(200):
            try:
                _, _, v = eng.classify(f"live-{threading.get_ident()}-{i}", rng.normal(size=separable_buffer.dim))
                assert v in (0, 1)
            except Exception as exc:  # noqa: BLE001
                errors.append(exc)

    threads = [threading.Thread(target=hammer) for _ in range(3)]
    for t in threads:
        t.start()
    eng.refit(persist=False)
    for t in threads:
        t.join()
    assert not errors
    assert eng.state.version == 1
