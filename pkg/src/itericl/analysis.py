"""Accuracy model of confidence-gated iteration, closed form and simulated.

The model: each iteration answers correctly with probability p_c; a
confidence gate accepts correct answers with rate TPR and incorrect ones
with rate FPR; acceptance stops the loop, otherwise the run continues up
to n iterations and (under the last-answer policy) outputs whatever the
final iteration produced. Iterations are independent by assumption here,
which real traces need not satisfy; the Monte Carlo simulator exists as
an independent check of the closed form under exactly these assumptions.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .distributions import ConfidenceDistribution, split_uniform
from .seeding import derive_seed

__all__ = [
    "AnalysisParams",
    "continue_prob",
    "expected_accuracy",
    "asymptotic_accuracy",
    "monte_carlo_accuracy",
    "sweep",
    "POLICY_LAST",
    "POLICY_ARGMAX",
]

POLICY_LAST = "last_answer"
POLICY_ARGMAX = "argmax_confidence"

DEFAULT_PARTITION_SIZE = 100_000


@dataclass(frozen=True)
class AnalysisParams:
    """(p_c, TPR, FPR): correctness rate and the gate's acceptance rates."""

    p_c: float
    tpr: float
    fpr: float

    def __post_init__(self):
        for name in ("p_c", "tpr", "fpr"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0 or math.isnan(value):
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def continue_prob(params: AnalysisParams) -> float:
    """Per-iteration probability that the gate rejects and the loop goes on."""
    return 1.0 - (params.p_c * params.tpr + (1.0 - params.p_c) * params.fpr)


def expected_accuracy(params: AnalysisParams, n: int, *, count_final_gate: bool = False) -> float:
    """Expected accuracy of at most ``n`` gated iterations, last-answer policy.

    Closed form: accepted-correct terminations can happen in iterations
    1..n-1 (geometric in the continue probability p_u); a run that reaches
    iteration n outputs that iteration's answer regardless of the gate, so
    the final term is p_u^(n-1) * p_c. With p_u = 1 the gate never fires
    and the value is p_c for every n.

    ``count_final_gate=True`` switches to a variant that also credits a
    gated acceptance at iteration n on top of the forced final output.
    That variant double-counts the final iteration and can exceed 1; it is
    exposed for comparison only and is not used by any test oracle.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p_u = continue_prob(params)
    accept_correct = params.p_c * params.tpr
    terms = n if count_final_gate else n - 1
    if p_u == 1.0:
        geometric = float(terms)  # moot: p_u == 1 forces accept_correct == 0
    else:
        geometric = (1.0 - p_u ** terms) / (1.0 - p_u)
    return accept_correct * geometric + p_u ** (n - 1) * params.p_c


def asymptotic_accuracy(params: AnalysisParams) -> float:
    """Limit of ``expected_accuracy`` as the iteration budget grows.

    Equals p_c*TPR / (p_c*TPR + (1-p_c)*FPR), i.e. the fraction of gate
    acceptances that are correct. Degenerate corners: a gate that never
    accepts anything leaves accuracy at p_c; a gate that only ever accepts
    wrong answers drives it to 0.
    """
    if params.p_c == 0.0:
        return 0.0
    if params.p_c == 1.0:
        return 1.0
    accept_correct = params.p_c * params.tpr
    accept_incorrect = (1.0 - params.p_c) * params.fpr
    if params.tpr == 0.0:
        if accept_incorrect > 0.0:
            return 0.0
        return params.p_c  # gate never fires; every n yields p_c
    return accept_correct / (accept_correct + accept_incorrect)


def _simulate_last(rng: np.random.Generator, params: AnalysisParams,
                   n: int, trials: int) -> np.ndarray:
    """Correctness of each trial under the last-answer policy."""
    outcome = np.zeros(trials, dtype=bool)
    active = np.arange(trials)
    for i in range(1, n + 1):
        if active.size == 0:
            break
        correct = rng.random(active.size) < params.p_c
        if i == n:
            outcome[active] = correct
            break
        accept_p = np.where(correct, params.tpr, params.fpr)
        accepted = rng.random(active.size) < accept_p
        outcome[active[accepted]] = correct[accepted]
        active = active[~accepted]
    return outcome


def _simulate_argmax(rng: np.random.Generator, params: AnalysisParams,
                     n: int, trials: int, threshold: float,
                     dist_correct: ConfidenceDistribution,
                     dist_incorrect: ConfidenceDistribution) -> np.ndarray:
    """Correctness when the most confident answer wins on exhaustion.

    Confidence values are drawn from the declared distributions; the gate
    accepts when confidence exceeds ``threshold``, so acceptance rates
    equal the distributions' tail probabilities there. An early stop is
    consistent with argmax because the stopping confidence dominates all
    rejected ones observed before it.
    """
    best_conf = np.full(trials, -np.inf)
    best_correct = np.zeros(trials, dtype=bool)
    active = np.arange(trials)
    for _ in range(n):
        if active.size == 0:
            break
        correct = rng.random(active.size) < params.p_c
        conf = np.where(
            correct,
            dist_correct.sample(rng, active.size),
            dist_incorrect.sample(rng, active.size),
        )
        better = conf > best_conf[active]
        improved = active[better]
        best_conf[improved] = conf[better]
        best_correct[improved] = correct[better]
        accepted = conf > threshold
        active = active[~accepted]
    return best_correct


def monte_carlo_accuracy(
    params: AnalysisParams,
    n: int,
    trials: int,
    seed: int,
    policy: str = POLICY_LAST,
    *,
    threshold: float = 0.5,
    dist_correct: ConfidenceDistribution | None = None,
    dist_incorrect: ConfidenceDistribution | None = None,
    workers: int = 1,
    partition_size: int = DEFAULT_PARTITION_SIZE,
) -> tuple[float, float]:
    """Simulated accuracy and its binomial standard error.

    Trials are split into fixed-size partitions, each with a generator
    derived from (seed, partition index), so the estimate depends only on
    the seed and partition size, never on the worker count. Under the
    argmax policy the default confidence distributions are split uniforms
    whose tails at ``threshold`` equal the configured TPR/FPR.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if policy not in (POLICY_LAST, POLICY_ARGMAX):
        raise ValueError(f"unknown policy '{policy}'")
    if policy == POLICY_ARGMAX:
        dist_correct = dist_correct or split_uniform(threshold, params.tpr)
        dist_incorrect = dist_incorrect or split_uniform(threshold, params.fpr)

    sizes = [
        min(partition_size, trials - start)
        for start in range(0, trials, partition_size)
    ]

    def _run_partition(args: tuple[int, int]) -> int:
        index, size = args
        rng = np.random.default_rng(derive_seed(seed, "mc-partition", index))
        if policy == POLICY_LAST:
            outcome = _simulate_last(rng, params, n, size)
        else:
            outcome = _simulate_argmax(
                rng, params, n, size, threshold, dist_correct, dist_incorrect
            )
        return int(outcome.sum())

    jobs = list(enumerate(sizes))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            successes = sum(pool.map(_run_partition, jobs))
    else:
        successes = sum(_run_partition(job) for job in jobs)

    estimate = successes / trials
    stderr = math.sqrt(estimate * (1.0 - estimate) / trials)
    return estimate, stderr


def sweep(
    cells: Iterable[AnalysisParams],
    ns: Sequence[int],
    *,
    trials: int | None = None,
    seed: int = 0,
    policy: str = POLICY_LAST,
    workers: int = 1,
) -> list[dict]:
    """Closed-form (and optionally simulated) accuracy over a parameter grid.

    One row per (cell, n) with keys p_c, tpr, fpr, n, closed_form and,
    when ``trials`` is set, mc_estimate and mc_stderr. Each row's
    simulation seed derives from the row coordinates, so rows are
    independent of grid shape and ordering.
    """
    rows: list[dict] = []
    for cell in cells:
        for n in ns:
            row: dict = {
                "p_c": cell.p_c,
                "tpr": cell.tpr,
                "fpr": cell.fpr,
                "n": int(n),
                "closed_form": expected_accuracy(cell, int(n)),
            }
            if trials is not None:
                estimate, stderr = monte_carlo_accuracy(
                    cell,
                    int(n),
                    trials,
                    derive_seed(seed, cell.p_c, cell.tpr, cell.fpr, int(n)),
                    policy,
                    workers=workers,
                )
                row["mc_estimate"] = estimate
                row["mc_stderr"] = stderr
            rows.append(row)
    return rows
