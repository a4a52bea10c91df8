"""Command-line interface.

Subcommands: ``run`` (QA datasets), ``iq`` (sequence tasks), ``eval``
(re-score an existing trace directory offline), ``export-rationales``,
``cache-stats``, and ``inspect-trace``. Exit codes: 0 clean, 1 for
configuration or usage problems, 2 when a run completed but some instances
failed.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from .cache import CallCache
from .config import AppConfig, apply_overrides, load_config
from .core import QaInstance
from .datasets import (
    FORMAT_AOKVQA,
    FORMAT_GQA,
    FORMAT_MATRIX,
    FORMAT_OKVQA,
    FORMAT_UNIFIED,
    FORMAT_VQA_V2,
    export_rationales,
    load_matrix,
    load_qa,
    read_traces,
    write_traces,
)
from .errors import ConfigError, EmptyReportError, RethinkError
from .evaluation import (
    EvalReport,
    METRIC_CHOICE,
    METRIC_EXACT,
    METRIC_VQA_SOFT,
    VARIANT_MIN_OVER_3,
    VARIANT_SUBSET_AVERAGED,
    aggregate,
    exact_match,
    random_choice_accuracy,
    render_report_table,
    report_to_json,
    select_choice,
    vqa_soft_accuracy,
)
from .pipeline import Runner


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this CLI reserves 2 for partial run
    # failures, so usage problems are rethrown as config errors (exit 1).
    def error(self, message: str):
        raise ConfigError(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="rethink",
        description="Caption an image, reason over the caption, then re-read "
        "the image to answer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="TOML config file")
        p.add_argument("--limit", type=int, help="take at most N instances")
        p.add_argument("--seed", type=int, help="seed for subsampling and baselines")
        p.add_argument("--concurrency", type=int, help="max concurrent instances")
        p.add_argument("--no-cache", action="store_true", help="bypass the call cache")
        p.add_argument("--out", help="output directory (traces, report)")

    p_run = sub.add_parser("run", help="run a QA dataset through the pipeline")
    common(p_run)
    p_iq = sub.add_parser("iq", help="run a sequence-completion dataset")
    common(p_iq)
    p_iq.add_argument(
        "--with-random-baseline",
        action="store_true",
        help="add a uniform-random row to the report table",
    )
    p_iq.add_argument(
        "--baseline-trials",
        type=int,
        default=20000,
        help="minimum trials for the random baseline (default 20000)",
    )
    p_eval = sub.add_parser("eval", help="re-score an existing trace directory")
    common(p_eval)
    p_eval.add_argument("--traces", required=True, help="trace directory from a run")
    p_export = sub.add_parser(
        "export-rationales", help="export per-instance rationales from traces"
    )
    common(p_export)
    p_export.add_argument("--traces", required=True, help="trace directory from a run")
    p_cache = sub.add_parser("cache-stats", help="show (and optionally compact) the cache")
    p_cache.add_argument("--config", help="TOML config file naming the cache directory")
    p_cache.add_argument("--cache-dir", help="cache directory (overrides config)")
    p_cache.add_argument("--compact", action="store_true", help="drop superseded log records")
    p_inspect = sub.add_parser("inspect-trace", help="pretty-print one trace file")
    p_inspect.add_argument("trace", help="path to a trace JSON file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "run": cmd_run,
            "iq": cmd_iq,
            "eval": cmd_eval,
            "export-rationales": cmd_export_rationales,
            "cache-stats": cmd_cache_stats,
            "inspect-trace": cmd_inspect_trace,
        }[args.command]
        return handler(args)
    except RethinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:  # console_scripts target
    sys.exit(main())


def _load_app(args: argparse.Namespace) -> AppConfig:
    app = load_config(args.config)
    return apply_overrides(
        app,
        limit=args.limit,
        seed=args.seed,
        concurrency=args.concurrency,
        no_cache=args.no_cache,
    )


def _out_root(args: argparse.Namespace) -> Path:
    # Layout: <out>/traces/<instance>.json plus <out>/report.json. Keeping the
    # report outside the trace directory lets read_traces stay strict about
    # what a trace directory may contain.
    return Path(args.out) if args.out else Path("out")


def auto_metric(fmt: str, instances: Sequence[QaInstance]) -> str:
    """The metric a dataset format is conventionally scored with."""
    if fmt in (FORMAT_VQA_V2, FORMAT_OKVQA):
        return METRIC_VQA_SOFT
    if fmt == FORMAT_GQA:
        return METRIC_EXACT
    if fmt in (FORMAT_AOKVQA, FORMAT_MATRIX):
        return METRIC_CHOICE
    if fmt == FORMAT_UNIFIED:
        if instances and all(instance.choices is not None for instance in instances):
            return METRIC_CHOICE
        return METRIC_VQA_SOFT
    raise ConfigError(f"no default metric for dataset format {fmt!r}")


def score_qa_traces(
    traces,
    instances: Sequence[QaInstance],
    metric: str,
    *,
    subset_averaged: bool = False,
) -> tuple[dict[str, float], int, int]:
    """Score each instance that has a gold label and a successful trace.

    Returns (scores by instance id, failed count, skipped count); failures
    are traces with a failure marker or missing entirely, skips are
    instances with nothing to score against.
    """
    by_id = {trace.instance_id: trace for trace in traces}
    scores: dict[str, float] = {}
    failed = skipped = 0
    for instance in instances:
        trace = by_id.get(instance.instance_id)
        if trace is None or trace.final is None:
            failed += 1
            continue
        if metric == METRIC_VQA_SOFT:
            if not instance.gold_answers:
                skipped += 1
                continue
            scores[instance.instance_id] = vqa_soft_accuracy(
                trace.final.raw, instance.gold_answers, subset_averaged=subset_averaged
            )
        elif metric == METRIC_EXACT:
            if not instance.gold_answers:
                skipped += 1
                continue
            scores[instance.instance_id] = max(
                exact_match(trace.final.raw, text) for text, _ in instance.gold_answers
            )
        elif metric == METRIC_CHOICE:
            if instance.choices is None or instance.gold_choice_index is None:
                skipped += 1
                continue
            chosen = trace.final.chosen_index
            if chosen is None:
                chosen = select_choice(trace.final.raw, instance.choices)
            scores[instance.instance_id] = (
                1.0 if chosen == instance.gold_choice_index else 0.0
            )
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    return scores, failed, skipped


def _vqa_variant(metric: str, subset_averaged: bool) -> str:
    if metric != METRIC_VQA_SOFT:
        return ""
    return VARIANT_SUBSET_AVERAGED if subset_averaged else VARIANT_MIN_OVER_3


def _emit_report(
    report: EvalReport, app: AppConfig, out_dir: Path | None, extra_rows=()
) -> None:
    rows = [*extra_rows, (app.report_name, {report.dataset: report.aggregate})]
    print(render_report_table(rows))
    print(
        f"evaluated={report.evaluated} failed={report.failed} skipped={report.skipped} "
        f"metric={report.metric}" + (f" variant={report.variant}" if report.variant else "")
    )
    if out_dir is not None:
        (out_dir / "report.json").write_text(report_to_json([report]), encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    app = _load_app(args)
    if app.dataset.format == FORMAT_MATRIX:
        raise ConfigError("the run command handles QA datasets; use iq for matrix_dir")
    instances = load_qa(app.dataset)
    runner = Runner(app.run)
    traces = runner.run_many(instances)
    out_root = _out_root(args)
    write_traces(traces, out_root / "traces")
    metric = app.metric or auto_metric(app.dataset.format, instances)
    scores, failed, skipped = score_qa_traces(
        traces, instances, metric, subset_averaged=app.vqa_subset_averaged
    )
    if scores:
        report = aggregate(
            scores,
            dataset=app.dataset.name,
            metric=metric,
            variant=_vqa_variant(metric, app.vqa_subset_averaged),
            failed=failed,
            skipped=skipped,
        )
        _emit_report(report, app, out_root)
    else:
        print(
            f"wrote {len(traces)} traces to {out_root / 'traces'}; "
            "no labeled instances to score"
        )
    return 2 if any(trace.failure for trace in traces) else 0


def cmd_iq(args: argparse.Namespace) -> int:
    app = _load_app(args)
    if app.dataset.format != FORMAT_MATRIX:
        raise ConfigError(f"the iq command needs a {FORMAT_MATRIX!r} dataset")
    instances = load_matrix(app.dataset)
    runner = Runner(app.run)
    traces = runner.run_many(instances)
    out_root = _out_root(args)
    write_traces(traces, out_root / "traces")
    by_id = {trace.instance_id: trace for trace in traces}
    scores: dict[str, float] = {}
    failed = skipped = 0
    for instance in instances:
        trace = by_id.get(instance.instance_id)
        if trace is None or trace.final is None:
            failed += 1
        elif instance.gold_candidate_index is None:
            skipped += 1
        else:
            scores[instance.instance_id] = (
                1.0 if trace.final.chosen_index == instance.gold_candidate_index else 0.0
            )
    extra_rows = []
    if args.with_random_baseline:
        labeled = sum(1 for i in instances if i.gold_candidate_index is not None)
        if labeled:
            repeats = math.ceil(args.baseline_trials / labeled)
            baseline = random_choice_accuracy(
                instances, repeats=repeats, seed=args.seed if args.seed is not None else 0
            )
            extra_rows.append(("random", {app.dataset.name: 100.0 * baseline}))
    if scores:
        report = aggregate(
            scores,
            dataset=app.dataset.name,
            metric=METRIC_CHOICE,
            failed=failed,
            skipped=skipped,
        )
        _emit_report(report, app, out_root, extra_rows=extra_rows)
    else:
        for instance in instances:
            trace = by_id.get(instance.instance_id)
            chosen = trace.final.chosen_index if trace and trace.final else None
            print(f"{instance.instance_id}\tchosen={chosen if chosen is not None else '-'}")
        print(
            f"wrote {len(traces)} traces to {out_root / 'traces'}; "
            "no labeled instances to score"
        )
    return 2 if any(trace.failure for trace in traces) else 0


def cmd_eval(args: argparse.Namespace) -> int:
    app = _load_app(args)
    traces = read_traces(args.traces)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if app.dataset.format == FORMAT_MATRIX:
        instances: Sequence = load_matrix(app.dataset)
        by_id = {trace.instance_id: trace for trace in traces}
        scores = {}
        failed = skipped = 0
        for instance in instances:
            trace = by_id.get(instance.instance_id)
            if trace is None or trace.final is None:
                failed += 1
            elif instance.gold_candidate_index is None:
                skipped += 1
            else:
                scores[instance.instance_id] = (
                    1.0 if trace.final.chosen_index == instance.gold_candidate_index else 0.0
                )
        metric = METRIC_CHOICE
        variant = ""
    else:
        qa_instances = load_qa(app.dataset)
        metric = app.metric or auto_metric(app.dataset.format, qa_instances)
        scores, failed, skipped = score_qa_traces(
            traces, qa_instances, metric, subset_averaged=app.vqa_subset_averaged
        )
        variant = _vqa_variant(metric, app.vqa_subset_averaged)
    if not scores:
        raise EmptyReportError("no instances could be scored against these traces")
    report = aggregate(
        scores,
        dataset=app.dataset.name,
        metric=metric,
        variant=variant,
        failed=failed,
        skipped=skipped,
    )
    _emit_report(report, app, out_dir)
    return 0


def cmd_export_rationales(args: argparse.Namespace) -> int:
    app = _load_app(args)
    if app.dataset.format == FORMAT_MATRIX:
        raise ConfigError("rationale export applies to QA datasets")
    traces = read_traces(args.traces)
    instances = load_qa(app.dataset)
    metric = app.metric or auto_metric(app.dataset.format, instances)
    scores, _, _ = score_qa_traces(
        traces, instances, metric, subset_averaged=app.vqa_subset_averaged
    )
    out = Path(args.out) if args.out else Path("rationales.jsonl")
    if out.is_dir():
        out = out / "rationales.jsonl"
    result = export_rationales(traces, instances, out, scores=scores or None)
    print(f"wrote {result.written} rationale records to {out} (skipped {result.skipped})")
    return 0


def cmd_cache_stats(args: argparse.Namespace) -> int:
    cache_dir = args.cache_dir
    if cache_dir is None:
        if not args.config:
            raise ConfigError("cache-stats needs --cache-dir or --config")
        app = load_config(args.config)
        cache_dir = app.run.cache_dir
    if not cache_dir:
        raise ConfigError("no cache directory configured")
    cache = CallCache(cache_dir)
    if args.compact:
        removed = cache.compact()
        print(f"compacted: dropped {removed} superseded record(s)")
    stats = cache.stats()
    print(f"cache_dir: {cache_dir}")
    print(f"entries: {stats.entries}")
    print(f"log_records: {stats.log_records}")
    return 0


def cmd_inspect_trace(args: argparse.Namespace) -> int:
    from .datasets import read_trace

    trace = read_trace(args.trace)
    print(f"instance: {trace.instance_id}")
    print(f"config_digest: {trace.config_digest}")
    if trace.failure is not None:
        print(f"failure: {trace.failure}")
    if trace.final is not None:
        chosen = "" if trace.final.chosen_index is None else f" chosen_index={trace.final.chosen_index}"
        print(f"final: {trace.final.raw!r} (normalized {trace.final.normalized!r}){chosen}")
    for position, record in enumerate(trace.records):
        bits = [f"backend={record.backend_id}"]
        if record.image_id is not None:
            bits.append(f"image={record.image_id}")
        bits.append(f"cache_hit={record.cache_hit}")
        bits.append(f"latency_ms={record.latency_ms}")
        if record.prompt.flags:
            bits.append(f"flags={','.join(record.prompt.flags)}")
        print(f"[{position}] {record.stage}: " + " ".join(bits))
        print(f"    template: {record.prompt.template_id}")
        for line in record.prompt.rendered.splitlines() or [""]:
            print(f"    | {line}")
        if record.error is not None:
            print(f"    error: {record.error}")
        else:
            print(f"    -> {record.completion!r}")
    return 0
