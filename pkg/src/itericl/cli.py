"""Command-line front end: ingest, select, run, simulate, eval, stats.

Exit codes: 0 success, 1 usage error, 2 partial query failures, 3 fatal.
A JSON config file (--config) can pre-fill any long option; explicit
flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .analysis import AnalysisParams, expected_accuracy, monte_carlo_accuracy
from .backends import BackendError, TemplateConfig
from .engine import IterationConfig
from .harness import (
    RunConfig,
    iteration_stats,
    read_traces,
    run_benchmark,
    score_traces,
)
from .metrics import EvalTask, TASK_KINDS
from .seeding import derive_seed
from .store import (
    SelectionConfig,
    StoreError,
    ingest_pool,
    load_queries,
    select_relevant_k,
    store_stats,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_FATAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; remap to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="itericl", description=__doc__)
    parser.add_argument("--config", help="JSON file pre-filling run options")
    parser.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    parser.add_argument("--workers", type=int, default=None, help="worker count (default 1)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="validate a pool file and print stats")
    p_ingest.add_argument("--pool", required=True)

    p_select = sub.add_parser("select", help="dump similarity rankings for queries")
    p_select.add_argument("--store", required=True)
    p_select.add_argument("--queries", required=True)
    p_select.add_argument("--alpha", type=float, default=None)
    p_select.add_argument("--k", type=int, default=None)
    p_select.add_argument("--exclude-self", action="store_true")
    p_select.add_argument("--out", help="output JSONL (default stdout)")

    p_run = sub.add_parser("run", help="run a strategy over a query file")
    p_run.add_argument("--store")
    p_run.add_argument("--queries")
    p_run.add_argument("--backend", choices=["mock", "http"], default=None)
    p_run.add_argument("--strategy", default=None,
                       choices=["zeroshot", "videoicl", "simrankonce",
                                "randexvote", "simrankvote"])
    p_run.add_argument("--alpha", type=float, default=None)
    p_run.add_argument("--k", type=int, default=None)
    p_run.add_argument("--m", type=int, default=None)
    p_run.add_argument("--threshold", type=float, default=None)
    p_run.add_argument("--estimator", default=None,
                       choices=["min_token_prob", "verbalization"])
    p_run.add_argument("--policy", choices=["argmax", "last"], default=None)
    p_run.add_argument("--script", help="mock backend script file")
    p_run.add_argument("--exclude-self", action="store_true")
    p_run.add_argument("--out", help="traces output path")

    p_sim = sub.add_parser("simulate", help="closed form vs Monte Carlo accuracy")
    p_sim.add_argument("--pc", type=float, required=True)
    p_sim.add_argument("--tpr", type=float, required=True)
    p_sim.add_argument("--fpr", type=float, required=True)
    p_sim.add_argument("--max-iters", type=int, required=True)
    p_sim.add_argument("--trials", type=int, default=100_000)
    p_sim.add_argument("--policy", choices=["last", "argmax"], default="last")
    p_sim.add_argument("--out", help="output CSV (default stdout)")

    p_eval = sub.add_parser("eval", help="score a trace file against golds")
    p_eval.add_argument("--task", required=True, choices=list(TASK_KINDS))
    p_eval.add_argument("--traces", required=True)
    p_eval.add_argument("--gold", required=True,
                        help="query JSONL with gold_answer fields")
    p_eval.add_argument("--report", help="report JSON output (default stdout)")

    p_stats = sub.add_parser("stats", help="iteration histogram of a trace file")
    p_stats.add_argument("--traces", required=True)
    p_stats.add_argument("--out", help="output JSON (default stdout)")

    return parser


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _setting(args, config: dict, name: str, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_ingest(args, config) -> int:
    store = ingest_pool(args.pool)
    _emit(json.dumps(store_stats(store), indent=2) + "\n", None)
    return EXIT_OK


def _cmd_select(args, config) -> int:
    store = ingest_pool(args.store)
    queries = load_queries(args.queries, store=store)
    sel = SelectionConfig(
        k=int(_setting(args, config, "k", 8)),
        alpha=float(_setting(args, config, "alpha", 0.5)),
    )
    lines = []
    for query in queries:
        cfg = sel
        if args.exclude_self:
            cfg = SelectionConfig(k=sel.k, alpha=sel.alpha, exclude_ids=frozenset({query.id}))
        ranking = select_relevant_k(store, query, cfg)
        lines.append(json.dumps({
            "query_id": query.id,
            "ranking": [
                {"id": r.demonstration_id, "score": r.score, "rank": r.rank}
                for r in ranking
            ],
        }, ensure_ascii=False))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _cmd_run(args, config) -> int:
    policy_map = {"argmax": "argmax_confidence", "last": "last_answer"}
    strategy = _setting(args, config, "strategy", None)
    if strategy is None:
        raise ValueError("--strategy is required (flag or config)")
    k = int(_setting(args, config, "k", 8))
    m = int(_setting(args, config, "m", 2))
    selection = SelectionConfig(
        k=max(k, 1),
        alpha=float(_setting(args, config, "alpha", 0.5)),
        exclude_ids=frozenset(config.get("exclude_ids", ())),
    )
    iteration = IterationConfig(
        k=max(k, 1),
        m=max(m, 1),
        c_th=float(_setting(args, config, "threshold", 0.5)),
        output_policy=policy_map[_setting(args, config, "policy", "argmax")],
    )
    template_cfg = config.get("template", {})
    out = _setting(args, config, "out", None)
    if out is None:
        raise ValueError("--out is required (flag or config)")
    cfg = RunConfig(
        store_path=_setting(args, config, "store", ""),
        queries_path=_setting(args, config, "queries", ""),
        backend=_setting(args, config, "backend", "mock"),
        strategy=strategy,
        selection=selection,
        iteration=iteration,
        traces_out=out,
        estimator=_setting(args, config, "estimator", "min_token_prob"),
        seed=int(_setting(args, config, "seed", 0)),
        workers=int(_setting(args, config, "workers", 1)),
        task=config.get("task", "open_ended"),
        exclude_self=bool(args.exclude_self or config.get("exclude_self", False)),
        script_path=_setting(args, config, "script", None),
        http_endpoint=config.get("http_endpoint"),
        http_model=config.get("http_model"),
        http_max_tokens=int(config.get("http_max_tokens", 256)),
        template=TemplateConfig(**template_cfg),
    )
    result = run_benchmark(cfg)
    summary = {
        "queries": len(result.traces) + len(result.failures),
        "failures": len(result.failures),
        "traces_path": result.traces_path,
        "iteration_histogram": {str(k_): v for k_, v in result.histogram.items()},
    }
    if result.report is not None:
        summary["scores"] = result.report.scores
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def _cmd_simulate(args, config) -> int:
    params = AnalysisParams(p_c=args.pc, tpr=args.tpr, fpr=args.fpr)
    policy = {"last": "last_answer", "argmax": "argmax_confidence"}[args.policy]
    seed = int(_setting(args, config, "seed", 0))
    workers = int(_setting(args, config, "workers", 1))
    rows = []
    for n in range(1, args.max_iters + 1):
        estimate, stderr = monte_carlo_accuracy(
            params, n, args.trials, derive_seed(seed, "simulate", n),
            policy, workers=workers,
        )
        rows.append({
            "n": n,
            "closed_form": expected_accuracy(params, n),
            "mc_estimate": estimate,
            "mc_stderr": stderr,
        })
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["n", "closed_form", "mc_estimate", "mc_stderr"])
    writer.writeheader()
    writer.writerows(rows)
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def _cmd_eval(args, config) -> int:
    traces = read_traces(args.traces)
    gold_queries = load_queries(args.gold)
    golds = {q.id: q.gold_answer for q in gold_queries if q.gold_answer is not None}
    report = score_traces(traces, golds, EvalTask(args.task))
    payload = {"task": args.task, **report.to_dict()}
    _emit(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", args.report)
    return EXIT_OK


def _cmd_stats(args, config) -> int:
    traces = read_traces(args.traces)
    histogram = iteration_stats(traces)
    _emit(json.dumps({str(k): v for k, v in histogram.items()}, indent=2) + "\n", args.out)
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "select": _cmd_select,
    "run": _cmd_run,
    "simulate": _cmd_simulate,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level))
    try:
        config = _load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except (StoreError, BackendError, OSError, ValueError, KeyError) as exc:
        logger.error("%s", exc)
        sys.stderr.write(f"itericl: fatal: {exc}\n")
        return EXIT_FATAL


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
