"""Fit cheap surrogates on teacher traces and route traffic behind a parity gate."""

from .config import RunConfig, resolve_config
from .gatekeeper import GateVerdict, PipelineFamily, RefusalReason, calibrate_tau, parity_gate
from .router import Engine, classify, fit, update
from .state import RoutingState, route
from .traces import Trace, TraceBuffer, ingest_traces

__version__ = "0.1.0"

__all__ = [
    "Engine", "GateVerdict", "PipelineFamily", "RefusalReason", "RoutingState", "RunConfig",
    "Trace", "TraceBuffer", "calibrate_tau", "classify", "fit", "ingest_traces", "parity_gate",
    "resolve_config", "route", "update",
]
