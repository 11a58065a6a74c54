import numpy as np
import pytest

from tracegate.bench import SyntheticSpec, SyntheticWorld, generate_synthetic
from tracegate.config import RunConfig
from tracegate.traces import TraceBuffer, ingest_traces


def make_records(X, y, names=None, day=0, prefix="t", texts=None):
    """Raw trace records from an embedding matrix and integer labels."""
    names = names or [f"c{k}" for k in range(int(max(y)) + 1)]
    out = []
    for i, (x, lab) in enumerate(zip(np.asarray(X, dtype=float), y)):
        rec = {"id": f"{prefix}-{i:05d}", "embedding": x.tolist(), "teacher_label": names[int(lab)], "day": day}
        if texts is not None:
            rec["text"] = texts[i]
        out.append(rec)
    return out


def make_buffer(X, y, names=None, **kw) -> TraceBuffer:
    return ingest_traces(make_records(X, y, names, **kw), TraceBuffer())


@pytest.fixture(scope="session")
def separable_buffer() -> TraceBuffer:
    return generate_synthetic(SyntheticSpec(n_classes=5, dim=8, separation=8.0, teacher_noise=0.0,
                                            n_per_day=600, days=2, seed=3))


@pytest.fixture(scope="session")
def random_label_buffer() -> TraceBuffer:
    return generate_synthetic(SyntheticSpec(n_classes=3, dim=8, separation=0.0, teacher_noise=0.0,
                                            n_per_day=1000, days=1, seed=4))


@pytest.fixture(scope="session")
def partial_world() -> SyntheticWorld:
    return SyntheticWorld(SyntheticSpec(n_classes=6, dim=8, separation=2.5, teacher_noise=0.0,
                                        n_per_day=2000, days=1, seed=11))


@pytest.fixture
def fast_cfg(tmp_path) -> RunConfig:
    return RunConfig(epochs=60, out=str(tmp_path / "run"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    RESULTS = getattr(mod, "RESULTS", [])
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
