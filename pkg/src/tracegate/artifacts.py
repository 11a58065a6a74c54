"""Per-refit interpretability artifacts over a routed reference set.

Five artifact kinds describe the deferral boundary: slice summaries,
representative example cards, contrastive boundary pairs, temporal deltas
and disagreement cards. They are bundled into a ``ReportBundle`` that
serializes to JSON (round-trip exact) or renders as Markdown.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .gatekeeper import GateVerdict, PipelineFamily
from .state import RoutingState, route_batch
from .surrogate import SurrogateModel
from .traces import LabelDictionary, Trace, embeddings_of, teacher_labels_of

DEFAULT_PAIR_CAP = 5
DEFAULT_DISAGREEMENT_CAP = 10
LENGTH_BINS = ("short", "medium", "long")
BUNDLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RoutedExample:
    trace: Trace
    handled: bool
    score: float
    surrogate_label: int | None
    teacher_label: int


@dataclass
class SliceSummary:
    scheme: str  # "label" or "length"
    key: str
    n: int
    handled: int
    handled_rate: float
    ta: float | None


@dataclass
class ExampleCard:
    label: str
    group: str
    trace_id: str
    text: str
    distance: float


@dataclass
class BoundaryPair:
    label: str
    handled_id: str
    handled_text: str
    handled_score: float
    deferred_id: str
    deferred_text: str
    deferred_score: float


@dataclass
class TemporalDelta:
    label: str
    n: int
    previous: float
    current: float
    delta: float


@dataclass
class Disagreement:
    trace_id: str
    text: str | None
    teacher_label: str


@dataclass
class DisagreementCard:
    predicted: str
    count: int
    items: list[Disagreement] = field(default_factory=list)


@dataclass
class ReportBundle:
    version: int
    alpha: float
    verdict: dict
    family: str | None = None
    tau: float | None = None
    metrics: dict = field(default_factory=dict)
    length_edges: list[float] = field(default_factory=list)
    slices: list[SliceSummary] = field(default_factory=list)
    cards: list[ExampleCard] = field(default_factory=list)
    pairs: list[BoundaryPair] = field(default_factory=list)
    deltas: list[TemporalDelta] = field(default_factory=list)
    overall_delta: float | None = None
    disagreements: list[DisagreementCard] = field(default_factory=list)

    @property
    def is_stub(self) -> bool:
        return not self.verdict.get("promoted", False)

    def to_dict(self) -> dict:
        doc = {"format_version": BUNDLE_FORMAT_VERSION, **asdict(self)}
        if self.is_stub:
            keep = ("format_version", "version", "alpha", "verdict")
            doc = {k: doc[k] for k in keep}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ReportBundle":
        if doc.get("format_version") != BUNDLE_FORMAT_VERSION:
            raise ValueError(f"unsupported report format {doc.get('format_version')!r}")
        return cls(
            version=doc["version"],
            alpha=doc["alpha"],
            verdict=doc["verdict"],
            family=doc.get("family"),
            tau=doc.get("tau"),
            metrics=doc.get("metrics", {}),
            length_edges=doc.get("length_edges", []),
            slices=[SliceSummary(**s) for s in doc.get("slices", [])],
            cards=[ExampleCard(**c) for c in doc.get("cards", [])],
            pairs=[BoundaryPair(**p) for p in doc.get("pairs", [])],
            deltas=[TemporalDelta(**d) for d in doc.get("deltas", [])],
            overall_delta=doc.get("overall_delta"),
            disagreements=[
                DisagreementCard(c["predicted"], c["count"], [Disagreement(**i) for i in c["items"]])
                for c in doc.get("disagreements", [])
            ],
        )


def route_examples(state: RoutingState, reference: Sequence[Trace]) -> list[RoutedExample]:
    if not reference:
        return []
    decisions = route_batch(state, embeddings_of(reference))
    surrogate_labels: Sequence[int | None]
    if state.pipeline is None:
        surrogate_labels = [None] * len(reference)
    else:
        surrogate_labels = state.pipeline.surrogate.predict(embeddings_of(reference)).tolist()
    return [
        RoutedExample(t, d.handled, d.score, s, t.teacher_label)
        for t, d, s in zip(reference, decisions, surrogate_labels)
    ]


def _summarize(scheme: str, key: str, group: Sequence[RoutedExample]) -> SliceSummary:
    handled = [r for r in group if r.handled]
    agreed = sum(r.surrogate_label == r.teacher_label for r in handled)
    return SliceSummary(
        scheme=scheme,
        key=key,
        n=len(group),
        handled=len(handled),
        handled_rate=len(handled) / len(group),
        ta=agreed / len(handled) if handled else None,
    )


def length_edges(routed: Sequence[RoutedExample]) -> list[float]:
    lengths = [len(r.trace.text) for r in routed if r.trace.text is not None]
    if not lengths:
        return []
    return [float(q) for q in np.quantile(lengths, [1 / 3, 2 / 3])]


def length_bin(text: str, edges: Sequence[float]) -> str:
    n = len(text)
    if n <= edges[0]:
        return "short"
    return "medium" if n <= edges[1] else "long"


def slice_summaries(
    routed: Sequence[RoutedExample],
    labels: LabelDictionary,
    edges: Sequence[float] | None = None,
) -> list[SliceSummary]:
    """One summary per teacher label present, then non-empty length terciles over texted traces."""
    by_label: dict[int, list[RoutedExample]] = defaultdict(list)
    for r in routed:
        by_label[r.teacher_label].append(r)
    out = [_summarize("label", labels.name(k), by_label[k]) for k in sorted(by_label)]
    edges = length_edges(routed) if edges is None else edges
    if edges:
        by_bin: dict[str, list[RoutedExample]] = defaultdict(list)
        for r in routed:
            if r.trace.text is not None:
                by_bin[length_bin(r.trace.text, edges)].append(r)
        out.extend(_summarize("length", b, by_bin[b]) for b in LENGTH_BINS if by_bin[b])
    return out


def representative_cards(routed: Sequence[RoutedExample], labels: LabelDictionary) -> list[ExampleCard]:
    """Per (label, routing group), the texted trace nearest the group's embedding centroid."""
    cells: dict[tuple[int, bool], list[RoutedExample]] = defaultdict(list)
    for r in routed:
        if r.trace.text is not None:
            cells[(r.teacher_label, r.handled)].append(r)
    cards = []
    for (label, handled), members in sorted(cells.items(), key=lambda kv: (kv[0][0], not kv[0][1])):
        X = embeddings_of([m.trace for m in members])
        dist = np.linalg.norm(X - X.mean(axis=0), axis=1)
        best = min(range(len(members)), key=lambda i: (dist[i], members[i].trace.id))
        m = members[best]
        cards.append(
            ExampleCard(labels.name(label), "handled" if handled else "deferred", m.trace.id, m.trace.text, float(dist[best]))
        )
    return cards


def boundary_pairs(
    routed: Sequence[RoutedExample],
    labels: LabelDictionary,
    k: int = DEFAULT_PAIR_CAP,
) -> list[BoundaryPair]:
    """Max-score handled vs min-score deferred per label, the k most contrasting labels first."""
    cells: dict[int, tuple[list[RoutedExample], list[RoutedExample]]] = defaultdict(lambda: ([], []))
    for r in routed:
        if r.trace.text is not None:
            cells[r.teacher_label][0 if r.handled else 1].append(r)
    pairs = []
    for label, (handled, deferred) in cells.items():
        if not handled or not deferred:
            continue
        h = min(handled, key=lambda r: (-r.score, r.trace.id))
        d = min(deferred, key=lambda r: (r.score, r.trace.id))
        pairs.append(
            BoundaryPair(labels.name(label), h.trace.id, h.trace.text, h.score, d.trace.id, d.trace.text, d.score)
        )
    pairs.sort(key=lambda p: (-(p.handled_score - p.deferred_score), p.label))
    return pairs[:k]


def _handled_rates(state: RoutingState, reference: Sequence[Trace]) -> tuple[dict[int, float], float]:
    routed = route_examples(state, reference)
    groups: dict[int, list[bool]] = defaultdict(list)
    for r in routed:
        groups[r.teacher_label].append(r.handled)
    overall = sum(r.handled for r in routed) / len(routed) if routed else 0.0
    return {k: sum(v) / len(v) for k, v in groups.items()}, overall


def temporal_deltas(
    previous: RoutingState | None,
    current: RoutingState,
    reference: Sequence[Trace],
    labels: LabelDictionary,
) -> tuple[list[TemporalDelta], float | None]:
    """Per-label handled-rate change between two states on the same reference set.

    Returns the deltas and the overall handled-rate delta; both are empty/None
    when there is no predecessor (the first fit).
    """
    if previous is None or previous.version == 0 or not reference:
        return [], None
    prev, prev_all = _handled_rates(previous, reference)
    cur, cur_all = _handled_rates(current, reference)
    counts = np.bincount(teacher_labels_of(reference))
    deltas = [
        TemporalDelta(labels.name(k), int(counts[k]), prev[k], cur[k], cur[k] - prev[k])
        for k in sorted(cur)
    ]
    return deltas, cur_all - prev_all


def disagreement_cards(
    model: SurrogateModel,
    heldout: Sequence[Trace],
    labels: LabelDictionary,
    cap: int = DEFAULT_DISAGREEMENT_CAP,
) -> list[DisagreementCard]:
    """Surrogate/teacher disagreements grouped by predicted class, largest group first."""
    if not heldout:
        return []
    pred = model.predict(embeddings_of(heldout))
    groups: dict[int, list[Trace]] = defaultdict(list)
    for t, p in zip(heldout, pred):
        if p != t.teacher_label:
            groups[int(p)].append(t)
    cards = [
        DisagreementCard(
            predicted=model.labels[p],
            count=len(items),
            items=[Disagreement(t.id, t.text, labels.name(t.teacher_label)) for t in items[:cap]],
        )
        for p, items in groups.items()
    ]
    cards.sort(key=lambda c: (-c.count, c.predicted))
    return cards


def build_report(
    state: RoutingState,
    verdict: GateVerdict,
    reference: Sequence[Trace],
    labels: LabelDictionary,
    previous: RoutingState | None = None,
    pair_cap: int = DEFAULT_PAIR_CAP,
    disagreement_cap: int = DEFAULT_DISAGREEMENT_CAP,
) -> ReportBundle:
    """Assemble the bundle for a refit; refused verdicts yield the verdict-only stub."""
    bundle = ReportBundle(version=state.version, alpha=verdict.alpha, verdict=verdict.record())
    if not verdict.promoted:
        return bundle
    pipe = verdict.candidate
    routed = route_examples(state, reference)
    edges = length_edges(routed)
    bundle.family = pipe.family.value
    bundle.tau = pipe.tau
    bundle.metrics = {"calibration": pipe.calibration.to_dict(), "shadow": verdict.shadow.to_dict()}
    bundle.length_edges = edges
    bundle.slices = slice_summaries(routed, labels, edges)
    bundle.cards = representative_cards(routed, labels)
    if pipe.family is PipelineFamily.L2D:
        bundle.pairs = boundary_pairs(routed, labels, pair_cap)
    bundle.deltas, bundle.overall_delta = temporal_deltas(previous, state, reference, labels)
    bundle.disagreements = disagreement_cards(pipe.surrogate, reference, labels, disagreement_cap)
    return bundle


# -- emission ---------------------------------------------------------------

def emit_report(bundle: ReportBundle, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(bundle.to_dict(), indent=2)
    if fmt in ("markdown", "md", "text"):
        return render_markdown(bundle)
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(document: str) -> ReportBundle:
    return ReportBundle.from_dict(json.loads(document))


def _pct(x: float | None) -> str:
    return "--" if x is None else f"{100 * x:.1f}%"


def _ta(x: float | None) -> str:
    return "--" if x is None else f"{x:.3f}".lstrip("0")


def render_markdown(bundle: ReportBundle) -> str:
    v = bundle.verdict
    lines = [f"# Routing report, pipeline version {bundle.version}", "", f"alpha = {bundle.alpha}"]
    if bundle.is_stub:
        lines += [
            "",
            f"**Refused** ({v.get('reason')}). The parity gate did not promote any candidate;",
            "all traffic stays with the teacher. No artifacts are generated for a refused refit.",
        ]
        return "\n".join(lines) + "\n"
    shadow = bundle.metrics.get("shadow", {})
    cal = bundle.metrics.get("calibration", {})
    tau = "n/a" if bundle.tau is None else f"{bundle.tau:.4f}"
    lines += [
        f"Promoted: **{bundle.family}** (tau = {tau})",
        f"Calibration: cov {_pct(cal.get('coverage'))}, TA {_ta(cal.get('ta'))}. "
        f"Shadow: cov {_pct(shadow.get('coverage'))}, TA {_ta(shadow.get('ta'))}.",
        "",
        "## Slice summaries",
        "",
        "| Label | Handled | TA | n |",
        "|---|---:|---:|---:|",
    ]
    label_slices = sorted((s for s in bundle.slices if s.scheme == "label"), key=lambda s: (s.handled_rate, s.key))
    lines += [f"| `{s.key}` | {_pct(s.handled_rate)} | {_ta(s.ta)} | {s.n} |" for s in label_slices]
    length_slices = [s for s in bundle.slices if s.scheme == "length"]
    if length_slices:
        edges = ", ".join(f"{e:g}" for e in bundle.length_edges)
        lines += ["", f"Length bins (character-length tercile edges: {edges})", "", "| Bin | Handled | TA | n |", "|---|---:|---:|---:|"]
        lines += [f"| {s.key} | {_pct(s.handled_rate)} | {_ta(s.ta)} | {s.n} |" for s in length_slices]
    lines += ["", "## Boundary pairs", ""]
    if not bundle.pairs:
        lines.append("No boundary pairs (none exist at this coverage).")
    for i, p in enumerate(bundle.pairs, 1):
        lines += [
            f"{i}. **{p.label}**",
            f"   Handled ({p.handled_score:.2f}): \"{p.handled_text}\"",
            f"   Deferred ({p.deferred_score:.2f}): \"{p.deferred_text}\"",
        ]
    lines += ["", "## Representative examples", ""]
    lines += [f"- `{c.label}` / {c.group}: \"{c.text}\" (distance {c.distance:.3f})" for c in bundle.cards] or ["None."]
    lines += ["", "## Temporal deltas", ""]
    if not bundle.deltas:
        lines.append("Not available before the second refit.")
    else:
        lines += [f"Overall handled-rate change: {100 * bundle.overall_delta:+.1f} pts", "", "| Label | Previous | Current | Delta |", "|---|---:|---:|---:|"]
        moved = sorted(bundle.deltas, key=lambda d: (-abs(d.delta), d.label))
        lines += [f"| `{d.label}` | {_pct(d.previous)} | {_pct(d.current)} | {100 * d.delta:+.1f} |" for d in moved]
    lines += ["", "## Disagreements", ""]
    if not bundle.disagreements:
        lines.append("The surrogate agrees with the teacher on every held-out trace.")
    for c in bundle.disagreements:
        lines.append(f"- predicted `{c.predicted}`: {c.count} disagreement(s)")
        lines += [f"    - teacher `{d.teacher_label}`: \"{d.text}\"" if d.text else f"    - teacher `{d.teacher_label}` ({d.trace_id})" for d in c.items]
    return "\n".join(lines) + "\n"
