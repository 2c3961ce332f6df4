"""End-to-end benchmark runner: load, infer, persist traces, score.

Queries fan out to a bounded worker pool but results are always written
in input order, and all randomness is derived per query id, so a fixed
seed gives byte-identical trace files no matter the worker count.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .backends import (
    Backend,
    HttpBackend,
    ScriptedMockBackend,
    TemplateConfig,
)
from .engine import (
    InferenceTrace,
    IterationConfig,
    TraceAborted,
    make_estimator,
    run_randexvote,
    run_simrankonce,
    run_simrankvote,
    run_videoicl,
    run_zeroshot,
)
from .metrics import EvalTask, MetricReport, caption_metrics, exact_match_accuracy
from .seeding import derive_seed
from .store import ExampleStore, Query, SelectionConfig, ingest_pool, load_queries

logger = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "QueryFailure",
    "BenchmarkResult",
    "run_benchmark",
    "iteration_stats",
    "trace_to_dict",
    "write_traces",
    "read_traces",
    "score_traces",
]

STRATEGIES = ("zeroshot", "videoicl", "simrankonce", "randexvote", "simrankvote")


@dataclass(frozen=True)
class RunConfig:
    """Everything one benchmark run needs, mirroring the CLI surface."""

    store_path: str
    queries_path: str
    backend: str  # "mock" | "http"
    strategy: str
    selection: SelectionConfig
    iteration: IterationConfig
    traces_out: str
    estimator: str = "min_token_prob"
    seed: int = 0
    workers: int = 1
    task: str = "open_ended"
    exclude_self: bool = False
    script_path: str | None = None
    http_endpoint: str | None = None
    http_model: str | None = None
    http_max_tokens: int = 256
    template: TemplateConfig = field(default_factory=TemplateConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}'")
        if self.backend not in ("mock", "http"):
            raise ValueError(f"unknown backend '{self.backend}'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.strategy != "zeroshot":
            for path_name in ("store_path",):
                path = getattr(self, path_name)
                if not Path(path).exists():
                    raise FileNotFoundError(f"{path_name} '{path}' does not exist")
        if not Path(self.queries_path).exists():
            raise FileNotFoundError(f"queries_path '{self.queries_path}' does not exist")
        if self.backend == "mock" and self.script_path is None:
            raise ValueError("mock backend requires script_path")
        if self.backend == "http" and not (self.http_endpoint and self.http_model):
            raise ValueError("http backend requires http_endpoint and http_model")


@dataclass(frozen=True)
class QueryFailure:
    """A query whose trace aborted; completed iterations are kept."""

    query_id: str
    strategy: str
    error: str
    records: tuple = ()


@dataclass
class BenchmarkResult:
    traces: list[InferenceTrace]
    failures: list[QueryFailure]
    report: MetricReport | None
    histogram: dict[int, int]
    traces_path: str


def _build_backend(cfg: RunConfig) -> Backend:
    if cfg.backend == "mock":
        return ScriptedMockBackend.from_file(cfg.script_path)
    return HttpBackend(cfg.http_endpoint, cfg.http_model, max_tokens=cfg.http_max_tokens)


def _run_query(cfg: RunConfig, store: ExampleStore | None, backend: Backend,
               query: Query) -> InferenceTrace | QueryFailure:
    sel = cfg.selection
    if cfg.exclude_self:
        sel = replace(sel, exclude_ids=frozenset(sel.exclude_ids) | {query.id})
    try:
        if cfg.strategy == "zeroshot":
            return run_zeroshot(query, backend, template=cfg.template)
        assert store is not None
        if cfg.strategy == "videoicl":
            estimator = make_estimator(cfg.estimator)
            return run_videoicl(query, store, backend, estimator, sel,
                                cfg.iteration, template=cfg.template)
        if cfg.strategy == "simrankonce":
            return run_simrankonce(query, store, backend, sel, cfg.iteration.m,
                                   template=cfg.template)
        if cfg.strategy == "randexvote":
            return run_randexvote(query, store, backend, sel, cfg.iteration,
                                  derive_seed(cfg.seed, query.id),
                                  template=cfg.template)
        return run_simrankvote(query, store, backend, sel, cfg.iteration,
                               template=cfg.template)
    except TraceAborted as exc:
        logger.error("query '%s' aborted: %s", query.id, exc.cause)
        return QueryFailure(
            query_id=query.id,
            strategy=exc.strategy,
            error=str(exc.cause),
            records=exc.records,
        )


def trace_to_dict(trace: InferenceTrace) -> dict:
    """Wire form of a trace; key order is part of the file contract."""
    return {
        "query_id": trace.query_id,
        "strategy": trace.strategy,
        "final_answer": trace.final_answer,
        "final_confidence": trace.final_confidence,
        "iterations": [
            {
                "index": r.index,
                "example_ids": list(r.example_ids),
                "answer": r.answer,
                "confidence": r.confidence,
                "terminated_early": r.terminated_early,
            }
            for r in trace.records
        ],
        "seed": trace.seed,
    }


def _failure_to_dict(failure: QueryFailure) -> dict:
    return {
        "query_id": failure.query_id,
        "strategy": failure.strategy,
        "error": failure.error,
        "iterations": [
            {
                "index": r.index,
                "example_ids": list(r.example_ids),
                "answer": r.answer,
                "confidence": r.confidence,
                "terminated_early": r.terminated_early,
            }
            for r in failure.records
        ],
    }


def write_traces(path: str | Path, results: Iterable[InferenceTrace | QueryFailure]) -> None:
    """Persist traces (and failure records) as JSON Lines, one per query."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in results:
            row = (
                trace_to_dict(item)
                if isinstance(item, InferenceTrace)
                else _failure_to_dict(item)
            )
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")


def read_traces(path: str | Path) -> list[dict]:
    """Load a trace file back into plain dicts (failure records included)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def iteration_stats(traces: Iterable[InferenceTrace | dict]) -> dict[int, int]:
    """Histogram of which iteration produced each trace's most confident answer.

    Ties go to the earliest iteration; failure records (no iterations) are
    skipped.
    """
    histogram: dict[int, int] = {}
    for trace in traces:
        if isinstance(trace, InferenceTrace):
            pairs = [(r.confidence, r.index) for r in trace.records]
        elif "error" in trace:
            continue
        else:
            pairs = [
                (it["confidence"], it["index"]) for it in trace.get("iterations", [])
            ]
        if not pairs:
            continue
        best_conf = max(p[0] for p in pairs)
        best_index = min(idx for conf, idx in pairs if conf == best_conf)
        histogram[best_index] = histogram.get(best_index, 0) + 1
    return dict(sorted(histogram.items()))


def score_traces(
    traces: Sequence[InferenceTrace | dict],
    golds: dict[str, str],
    task: EvalTask,
) -> MetricReport:
    """Score final answers against golds with the task's metric family."""
    answers: dict[str, str] = {}
    for trace in traces:
        if isinstance(trace, InferenceTrace):
            answers[trace.query_id] = trace.final_answer
        elif "error" not in trace:
            answers[trace["query_id"]] = trace["final_answer"]
    if not answers:
        raise ValueError("no successful traces to score")
    if task.kind == "captioning":
        ids = list(answers)
        missing = [qid for qid in ids if qid not in golds]
        if missing:
            from .metrics import MissingGoldError

            raise MissingGoldError(missing)
        return caption_metrics(
            [answers[qid] for qid in ids],
            [golds[qid] for qid in ids],
            ids=ids,
        )
    return exact_match_accuracy(answers, golds, task)


def run_benchmark(cfg: RunConfig) -> BenchmarkResult:
    """Run the configured strategy over every query and persist the traces.

    Per-query failures are recorded in the trace file and the run keeps
    going; scoring covers the successful traces and only happens when the
    query file carries gold answers.
    """
    store = ingest_pool(cfg.store_path) if cfg.strategy != "zeroshot" else None
    queries = load_queries(cfg.queries_path, store=store)
    backend = _build_backend(cfg)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda q: _run_query(cfg, store, backend, q), queries))
    else:
        results = [_run_query(cfg, store, backend, q) for q in queries]

    write_traces(cfg.traces_out, results)

    traces = [r for r in results if isinstance(r, InferenceTrace)]
    failures = [r for r in results if isinstance(r, QueryFailure)]
    if failures:
        logger.warning("%d of %d queries failed", len(failures), len(results))

    golds = {q.id: q.gold_answer for q in queries if q.gold_answer is not None}
    report = None
    if traces and all(t.query_id in golds for t in traces):
        report = score_traces(traces, golds, EvalTask(cfg.task))

    return BenchmarkResult(
        traces=traces,
        failures=failures,
        report=report,
        histogram=iteration_stats(traces),
        traces_path=str(cfg.traces_out),
    )
