"""Command-line entry point.

Exit codes: 0 promoted/success, 2 gate refusal, 1 operational error
(including usage errors). Every ``--flag`` can be overridden by a
``TRACEGATE_<FLAG>`` environment variable.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import asdict

import click
import httpx

from .artifacts import emit_report, parse_report
from .bench import (
    DEFAULT_ALPHAS,
    PriceModel,
    SyntheticSpec,
    SyntheticWorld,
    cost_projection,
    evaluate_state,
    run_alpha_sweep,
)
from .config import RunConfig, resolve_config
from .router import Engine, teacher_from_config
from .traces import TraceBuffer, TraceError, ingest_traces, read_trace_records

EXIT_OK, EXIT_ERROR, EXIT_REFUSED = 0, 1, 2


class Refused(Exception):
    pass


def config_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON config file."),
        click.option("--alpha", type=float, help="Target teacher agreement."),
        click.option("--floor", type=float, help="Minimum shadow coverage for promotion."),
        click.option("--seed", type=int),
        click.option("--splits", help="train,validation,calibration,shadow fractions."),
        click.option("--teacher-oracle", type=click.Path(dir_okay=False), help="Trace file used as a cached teacher."),
        click.option("--teacher-url", help="Remote teacher endpoint."),
        click.option("--pool", help="Comma list from lr,mlp,centroid."),
        click.option("--out", type=click.Path(file_okay=False), help="Run directory (state, buffer, reports, log)."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)

    @functools.wraps(fn)
    def wrapper(*args, config_file=None, alpha=None, floor=None, seed=None, splits=None,
                teacher_oracle=None, teacher_url=None, pool=None, out=None, **kwargs):
        flags = dict(alpha=alpha, floor=floor, seed=seed, splits=splits, teacher_oracle=teacher_oracle,
                     teacher_url=teacher_url, pool=pool, out=out)
        try:
            cfg = resolve_config(config_file, flags)
        except (ValueError, TypeError) as exc:
            raise click.UsageError(f"invalid configuration: {exc}")
        return fn(*args, cfg=cfg, **kwargs)

    return wrapper


def _read_records(path: str) -> list[dict]:
    try:
        records = read_trace_records(path)
    except TraceError as exc:
        raise click.ClickException(str(exc))
    if not records:
        raise click.UsageError(f"{path}: trace file is empty")
    return records


def _finish(result) -> None:
    v = result.verdict
    click.echo(v.summary())
    if v.promoted:
        cal = v.candidate.calibration
        click.echo(f"version {result.state.version}; calibration cov={cal.coverage:.3f} ta={cal.ta:.3f}; "
                   f"shadow ta={v.shadow.ta:.3f}")
    else:
        raise Refused()


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def cli(verbose):
    """Trace-driven surrogate routing behind a parity gate."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@config_options
def fit(traces, cfg: RunConfig):
    """Fit a first pipeline on TRACES and apply the parity gate."""
    records = _read_records(traces)
    engine = Engine(cfg, TraceBuffer(), teacher=None)
    try:
        ingest_traces(records, engine.buffer)
    except TraceError as exc:
        raise click.ClickException(str(exc))
    _finish(engine.refit(command="fit"))


@cli.command()
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@config_options
def update(traces, cfg: RunConfig):
    """Merge TRACES into the run's buffer and refit from scratch."""
    records = read_trace_records(traces)
    engine = Engine.open(cfg)
    if len(engine.buffer) == 0 and not records:
        raise click.UsageError("nothing to fit: the run has no buffer and the trace file is empty")
    try:
        result = engine.refit(records, command="update")
    except TraceError as exc:
        raise click.ClickException(str(exc))
    _finish(result)


def _indexed(records: list[dict], labels) -> list:
    buf = TraceBuffer()
    for name in labels.names:
        buf.labels.register(name)
    return ingest_traces(records, buf).snapshot()


@cli.command()
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@click.option("--rate", type=float, default=None, help="Teacher cost per 1,000 calls.")
@click.option("--volume", type=float, default=None, help="Daily query volume.")
@config_options
def evaluate(traces, rate, volume, cfg: RunConfig):
    """Score the persisted routing state on TRACES (with a cost projection)."""
    engine = Engine.open(cfg)
    if engine.state.version == 0:
        raise click.ClickException(f"no fitted state in {cfg.out}")
    try:
        data = _indexed(_read_records(traces), engine.buffer.labels)
    except TraceError as exc:
        raise click.ClickException(str(exc))
    m = evaluate_state(engine.state, data)
    price = PriceModel(rate if rate is not None else cfg.price_per_1k, volume if volume is not None else cfg.daily_volume)
    cost = cost_projection(m.coverage, price)
    click.echo(json.dumps({"mode": engine.state.mode, "version": engine.state.version,
                           "metrics": m.to_dict(), "cost": asdict(cost)}, indent=2))


@cli.command()
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@click.option("--alphas", default=",".join(str(a) for a in DEFAULT_ALPHAS), show_default=True)
@click.option("--test", "test_file", type=click.Path(exists=True, dir_okay=False), help="Held-out test traces.")
@click.option("--days", type=int, default=None, help="Number of daily batches (default: all day tags).")
@config_options
def sweep(traces, alphas, test_file, days, cfg: RunConfig):
    """Run the day-by-day protocol at each alpha and print the coverage/TA table."""
    try:
        alpha_list = [float(a) for a in alphas.split(",") if a.strip()]
    except ValueError:
        raise click.UsageError(f"bad --alphas value {alphas!r}")
    if not alpha_list:
        raise click.UsageError("--alphas is empty")
    records = _read_records(traces)
    try:
        buf = ingest_traces(records, TraceBuffer())
        test = _indexed(_read_records(test_file), buf.labels) if test_file else None
        result = run_alpha_sweep(buf, alpha_list, cfg, test=test, days=days)
    except (TraceError, ValueError) as exc:
        raise click.ClickException(str(exc))
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(result.to_csv())
    (out / "sweep.json").write_text(json.dumps(result.to_dict(), indent=2))
    engine = Engine(cfg)
    for row in result.rows:
        engine.append_log({"command": "sweep", "alpha": row.alpha, "days": [d.__dict__ for d in row.days]})
    if test is None:
        click.echo("(no --test file: columns measured on the final Shadow split)")
    click.echo(result.table())


@cli.command()
@click.option("--format", "fmt", type=click.Choice(["json", "markdown"]), default="markdown", show_default=True)
@click.option("--version", "version", type=int, default=None, help="Pipeline version (default: latest).")
@config_options
def report(fmt, version, cfg: RunConfig):
    """Print a stored report bundle."""
    rdir = cfg.out_dir / Engine.REPORT_DIR
    if version is None:
        engine = Engine.open(cfg)
        version = engine.state.version
    path = rdir / f"report-v{version}.json"
    if not path.exists():
        raise click.ClickException(f"no report at {path}")
    click.echo(emit_report(parse_report(path.read_text()), fmt), nl=False)


@cli.command()
@click.option("--coverage", type=float, required=True)
@click.option("--rate", type=float, default=2.60, show_default=True)
@click.option("--volume", type=float, default=10_000, show_default=True)
def cost(coverage, rate, volume):
    """Project teacher spend at a given surrogate coverage."""
    try:
        c = cost_projection(coverage, PriceModel(rate, volume))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    click.echo(f"daily ${c.daily_cost:,.2f} (teacher-only ${c.teacher_only_daily:,.2f}); "
               f"yearly ${c.yearly_cost:,.0f}; saving {100 * c.saving_fraction:.1f}% (${c.yearly_saving:,.0f}/year)")


@cli.command()
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--separation", type=float, default=8.0, show_default=True)
@click.option("--noise", type=float, default=0.02, show_default=True)
@click.option("--per-day", type=int, default=1000, show_default=True)
@click.option("--days", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", type=click.Path(dir_okay=False), required=True, help="Trace file to write.")
@click.option("--test-output", type=click.Path(dir_okay=False), help="Also write a held-out test file.")
def generate(classes, dim, separation, noise, per_day, days, seed, output, test_output):
    """Write a synthetic day-tagged trace file."""
    try:
        world = SyntheticWorld(SyntheticSpec(classes, dim, separation, noise, per_day, days, seed))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    _write_jsonl(output, world.daily_records())
    if test_output:
        _write_jsonl(test_output, world.test_records())
    click.echo(f"wrote {per_day * days} traces to {output}")


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@config_options
def serve(host, port, cfg: RunConfig):
    """Serve /classify, /traces, /refit, /report/latest and /state."""
    import uvicorn

    from .service import create_app

    engine = Engine.open(cfg, teacher=teacher_from_config(cfg))
    if engine.teacher is None and not engine.state.active:
        raise click.ClickException("no promoted state and no teacher configured; nothing could answer")
    uvicorn.run(create_app(engine), host=host, port=port)


# -- thin HTTP client -------------------------------------------------------

@cli.group()
@click.option("--url", envvar="TRACEGATE_URL", default="http://127.0.0.1:8000", show_default=True)
@click.pass_context
def client(ctx, url):
    """Talk to a running service."""
    ctx.obj = url.rstrip("/")


def _call(method: str, url: str, **kwargs) -> dict:
    try:
        resp = httpx.request(method, url, timeout=600, **kwargs)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"{url}: {exc}")
    if resp.status_code >= 400:
        raise click.ClickException(f"{resp.status_code}: {resp.text}")
    return resp.json()


@client.command("state")
@click.pass_obj
def client_state(url):
    click.echo(json.dumps(_call("GET", f"{url}/state"), indent=2))


@client.command("classify")
@click.argument("trace_id")
@click.option("--embedding", required=True, help="JSON array of numbers.")
@click.option("--text")
@click.pass_obj
def client_classify(url, trace_id, embedding, text):
    body = {"id": trace_id, "embedding": json.loads(embedding), "text": text}
    click.echo(json.dumps(_call("POST", f"{url}/classify", json=body)))


@client.command("ingest")
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def client_ingest(url, traces):
    click.echo(json.dumps(_call("POST", f"{url}/traces", json={"traces": _read_records(traces)})))


@client.command("refit")
@click.option("--traces", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def client_refit(url, traces):
    body = {"traces": read_trace_records(traces) if traces else []}
    res = _call("POST", f"{url}/refit", json=body)
    click.echo(json.dumps(res))
    if not res["promoted"]:
        raise Refused()


@client.command("report")
@click.option("--format", "fmt", type=click.Choice(["json", "markdown"]), default="markdown")
@click.pass_obj
def client_report(url, fmt):
    doc = _call("GET", f"{url}/report/latest")
    click.echo(emit_report(parse_report(json.dumps(doc)), fmt), nl=False)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except Refused:
        return EXIT_REFUSED
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_ERROR
    except click.UsageError as exc:
        exc.show()
        return EXIT_ERROR
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
