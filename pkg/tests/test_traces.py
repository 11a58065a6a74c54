import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracegate.traces import (
    DEFAULT_FRACTIONS,
    LabelDictionary,
    Split,
    SPLIT_ORDER,
    TraceBuffer,
    TraceError,
    assign_split,
    ingest_traces,
    load_buffer,
    read_trace_records,
    split_all,
    traces_for,
    write_traces,
)

from conftest import make_records


def rec(i, label="a", dim=3, **kw):
    return {"id": f"r{i}", "embedding": [float(i)] * dim, "teacher_label": label, **kw}


def test_empty_record_list_leaves_buffer_unchanged():
    buf = ingest_traces([rec(0)], TraceBuffer())
    ingest_traces([], buf)
    assert len(buf) == 1


def test_day_one_batch_size():
    recs = [rec(i, label=f"l{i % 7}") for i in range(2001)]
    assert len(ingest_traces(recs, TraceBuffer())) == 2001


def test_novel_label_extends_dictionary():
    buf = ingest_traces([rec(i, label=f"l{i}") for i in range(150)], TraceBuffer())
    assert len(buf.labels) == 150
    ingest_traces([rec(999, label="hotel_launchpad")], buf)
    assert len(buf.labels) == 151
    assert buf.labels.index("hotel_launchpad") == 150


def test_ground_truth_registers_labels():
    buf = ingest_traces([rec(0, label="a", ground_truth="b")], TraceBuffer())
    t = buf.snapshot()[0]
    assert buf.labels.names == ["a", "b"] and t.ground_truth == 1


@pytest.mark.parametrize(
    "bad",
    [
        [rec(0), rec(0)],
        [rec(0, dim=3), rec(1, dim=4)],
        [rec(0), {"id": "x", "embedding": [1, 2, 3]}],
        [rec(0), {"id": "x", "embedding": "nope", "teacher_label": "a"}],
        [rec(0), {"id": "x", "embedding": [[1, 2, 3]], "teacher_label": "a"}],
    ],
    ids=["duplicate-id", "dim-mismatch", "missing-label", "non-numeric", "nested"],
)
def test_invalid_batch_is_atomic(bad):
    buf = ingest_traces([rec(100, label="z")], TraceBuffer())
    with pytest.raises(TraceError):
        # fresh label names would leak into the dictionary if staging were not atomic
        ingest_traces([{**r, "teacher_label": f"new-{i}"} if "teacher_label" in r else r
                       for i, r in enumerate(bad)], buf)
    assert len(buf) == 1 and buf.labels.names == ["z"]


def test_duplicate_of_existing_id_rejected():
    buf = ingest_traces([rec(0)], TraceBuffer())
    with pytest.raises(TraceError, match="duplicate"):
        ingest_traces([rec(0)], buf)


def test_assignment_deterministic():
    assert assign_split("abc-123") is assign_split("abc-123")


def test_degenerate_fractions_all_train():
    assert all(assign_split(f"id{i}", (1, 0, 0, 0)) is Split.TRAIN for i in range(500))


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.7, 0.1, 0.1, 0.2), (1.2, -0.2, 0, 0)])
def test_bad_fractions(fractions):
    with pytest.raises(ValueError):
        assign_split("x", fractions)


def test_bucket_counts_binomial():
    n = 10_000
    counts = {s: 0 for s in SPLIT_ORDER}
    for i in range(n):
        counts[assign_split(f"trace-{i}")] += 1
    for split, p in zip(SPLIT_ORDER, DEFAULT_FRACTIONS):
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(counts[split] - n * p) <= 3 * sigma, (split, counts[split])


def test_train_size_on_10003_buffer():
    n = 10_003
    buf = ingest_traces([rec(i, label="a", dim=2) for i in range(n)], TraceBuffer())
    train = traces_for(buf, Split.TRAIN)
    sigma = math.sqrt(n * 0.7 * 0.3)
    assert abs(len(train) - 7002.1) <= 3 * sigma


def test_zero_fraction_split_empty():
    buf = ingest_traces([rec(i) for i in range(200)], TraceBuffer())
    assert traces_for(buf, Split.CALIBRATION, (0.8, 0.2, 0.0, 0.0)) == []


@given(st.lists(st.text(min_size=1, max_size=12), min_size=1, max_size=60, unique=True))
@settings(max_examples=60, deadline=None)
def test_splits_partition_buffer(ids):
    buf = ingest_traces([{"id": i, "embedding": [0.0], "teacher_label": "a"} for i in ids], TraceBuffer())
    parts = split_all(buf)
    seen = [t.id for s in SPLIT_ORDER for t in parts[s]]
    assert sorted(seen) == sorted(ids)


def test_split_stable_under_growth():
    buf = ingest_traces([rec(i) for i in range(300)], TraceBuffer())
    before = {t.id for t in traces_for(buf, Split.SHADOW)}
    ingest_traces([rec(i) for i in range(300, 900)], buf)
    after = {t.id for t in traces_for(buf, Split.SHADOW)}
    assert before <= after


def test_embeddings_are_read_only():
    t = ingest_traces([rec(0)], TraceBuffer()).snapshot()[0]
    with pytest.raises(ValueError):
        t.embedding[0] = 5.0


def test_file_round_trip(tmp_path):
    recs = make_records(np.eye(3), [0, 1, 2], ["x", "y", "z"], day=2, texts=["a b", "c", "d e f"])
    src = ingest_traces(recs, TraceBuffer())
    path = tmp_path / "b.jsonl"
    write_traces(path, src.snapshot(), src.labels)
    back = load_buffer(path)
    assert back.labels == src.labels
    assert [t.id for t in back] == [t.id for t in src]
    assert back.day_counts == {2: 3}
    assert back.snapshot()[2].text == "d e f"


def test_malformed_file_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec(0)) + "\n\n" + "{not json\n")
    with pytest.raises(TraceError, match="line 3"):
        read_trace_records(path)


def test_label_dictionary_bijection():
    d = LabelDictionary(["b", "a", "b"])
    assert d.names == ["b", "a"]
    assert d.name(d.index("a")) == "a"
    assert d.copy() == d and d.copy() is not d
