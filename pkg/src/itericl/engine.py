"""Confidence-gated iterative inference and its reference baselines.

The main strategy ranks the pool once, then feeds batches of m
demonstrations to the backend until an answer's confidence strictly
exceeds the threshold or the ranked list runs out; the most confident
answer wins by default. The baselines cover the single-shot and
majority-voting alternatives used for comparison runs.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backends import (
    Backend,
    BackendError,
    GenerationOutput,
    PromptSegment,
    ROLE_QUERY_QUESTION,
    TemplateConfig,
    assemble_prompt,
    generate,
)
from .normalize import normalize_answer
from .store import EmptyPoolError, ExampleStore, Query, SelectionConfig, select_relevant_k

logger = logging.getLogger(__name__)

__all__ = [
    "IterationConfig",
    "IterationRecord",
    "InferenceTrace",
    "TraceAborted",
    "min_token_prob_confidence",
    "verbalization_confidence",
    "MinTokenProbEstimator",
    "VerbalizationEstimator",
    "make_estimator",
    "majority_vote",
    "run_videoicl",
    "run_simrankonce",
    "run_randexvote",
    "run_simrankvote",
    "run_zeroshot",
]

POLICY_ARGMAX = "argmax_confidence"
POLICY_LAST = "last_answer"

DEFAULT_CONFIDENCE_PROMPT = (
    "Before answering, reply with only Yes or No: "
    "are you confident you can answer this question correctly?"
)


@dataclass(frozen=True)
class IterationConfig:
    """Iteration knobs: k total examples, m per batch, threshold, final-answer policy."""

    k: int
    m: int
    c_th: float
    output_policy: str = POLICY_ARGMAX

    def __post_init__(self):
        if self.m < 1 or self.k < self.m:
            raise ValueError(f"need 1 <= m <= k, got m={self.m}, k={self.k}")
        if not 0.0 <= self.c_th <= 1.0:
            raise ValueError(f"c_th must be in [0, 1], got {self.c_th}")
        if self.output_policy not in (POLICY_ARGMAX, POLICY_LAST):
            raise ValueError(f"unknown output_policy '{self.output_policy}'")

    @property
    def max_iterations(self) -> int:
        return math.ceil(self.k / self.m)


@dataclass(frozen=True)
class IterationRecord:
    """What one iteration saw and produced."""

    index: int
    example_ids: tuple[str, ...]
    answer: str
    token_probs: tuple[float, ...]
    confidence: float
    terminated_early: bool


@dataclass(frozen=True)
class InferenceTrace:
    """The auditable result of running one strategy on one query."""

    query_id: str
    strategy: str
    records: tuple[IterationRecord, ...]
    final_answer: str
    final_confidence: float
    seed: int | None = None


class TraceAborted(BackendError):
    """A backend failure mid-run; completed iteration records are preserved."""

    def __init__(self, query_id: str, strategy: str,
                 records: Sequence[IterationRecord], cause: BaseException):
        super().__init__(f"{strategy} aborted on query '{query_id}': {cause}")
        self.query_id = query_id
        self.strategy = strategy
        self.records = tuple(records)
        self.cause = cause


def min_token_prob_confidence(token_probs: Sequence[float]) -> float:
    """Minimum per-token probability of the generated sequence.

    An empty sequence is degenerate and scores 0.0 (logged); probabilities
    outside (0, 1] are rejected.
    """
    probs = list(token_probs)
    if not probs:
        logger.warning("empty token probability sequence; confidence degenerates to 0.0")
        return 0.0
    for p in probs:
        if not (0.0 < p <= 1.0) or math.isnan(p):
            raise ValueError(f"token probability {p} outside (0, 1]")
    return float(min(probs))


def verbalization_confidence(
    backend: Backend,
    segments: Sequence[PromptSegment],
    prompt: str = DEFAULT_CONFIDENCE_PROMPT,
) -> float:
    """Ask the model whether it is confident; yes maps to 1.0, anything else to 0.0.

    Issues one extra generation whose query text appends the confidence
    question, so thresholding degenerates to a plain proceed/iterate gate.
    """
    probe = list(segments)
    query_seg = probe[-1]
    if query_seg.role != ROLE_QUERY_QUESTION:
        raise ValueError("segments must end with the query question")
    probe[-1] = PromptSegment(
        role=query_seg.role,
        text=f"{query_seg.text}\n{prompt}",
        video_ref=query_seg.video_ref,
        source_id=query_seg.source_id,
    )
    out = generate(backend, probe)
    first_word = normalize_answer(out.answer).split(" ", 1)[0] if out.answer.strip() else ""
    return 1.0 if first_word == "yes" else 0.0


class MinTokenProbEstimator:
    """Confidence from the generation itself; no extra backend calls."""

    name = "min_token_prob"

    def confidence(self, backend: Backend, segments: Sequence[PromptSegment],
                   output: GenerationOutput) -> float:
        return min_token_prob_confidence(output.token_probs)


class VerbalizationEstimator:
    """Confidence from a follow-up yes/no question; binary by design."""

    name = "verbalization"

    def __init__(self, prompt: str = DEFAULT_CONFIDENCE_PROMPT):
        self.prompt = prompt

    def confidence(self, backend: Backend, segments: Sequence[PromptSegment],
                   output: GenerationOutput) -> float:
        return verbalization_confidence(backend, segments, self.prompt)


def make_estimator(name: str, **kwargs):
    if name == "min_token_prob":
        return MinTokenProbEstimator()
    if name == "verbalization":
        return VerbalizationEstimator(**kwargs)
    raise ValueError(f"unknown confidence estimator '{name}'")


def _majority_index(answers: Sequence[str], confidences: Sequence[float] | None) -> int:
    """Index of the winning answer: most frequent normalized form, ties by
    the highest single confidence among tied groups, then earliest."""
    if not answers:
        raise ValueError("majority vote over an empty answer list")
    confs = list(confidences) if confidences is not None else [0.0] * len(answers)
    if len(confs) != len(answers):
        raise ValueError("answers and confidences must align")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, answer in enumerate(answers):
        groups[normalize_answer(answer)].append(i)

    def group_key(members: list[int]):
        best = max(members, key=lambda i: (confs[i], -i))
        return (len(members), confs[best], -best)

    winners = max(groups.values(), key=group_key)
    return max(winners, key=lambda i: (confs[i], -i))


def majority_vote(answers: Sequence[str], confidences: Sequence[float] | None = None) -> str:
    """Most frequent answer after normalization; see ``_majority_index`` for ties."""
    return answers[_majority_index(answers, confidences)]


def _ranked_batches(ranked, m: int):
    return [ranked[i:i + m] for i in range(0, len(ranked), m)]


def _finalize(records: Sequence[IterationRecord], policy: str) -> tuple[str, float]:
    if policy == POLICY_LAST:
        chosen = records[-1]
    else:
        chosen = max(records, key=lambda r: r.confidence)  # first max wins ties
    return chosen.answer, chosen.confidence


def _run_iteration(
    query: Query,
    store: ExampleStore,
    backend: Backend,
    estimator,
    demo_ids: Sequence[str],
    index: int,
    template: TemplateConfig | None,
) -> IterationRecord:
    demos = [store.get(did) for did in demo_ids]
    segments = assemble_prompt(demos, query, template)
    out = generate(backend, segments)
    conf = float(estimator.confidence(backend, segments, out))
    if not 0.0 <= conf <= 1.0:
        raise ValueError(f"estimator produced confidence {conf} outside [0, 1]")
    return IterationRecord(
        index=index,
        example_ids=tuple(demo_ids),
        answer=out.answer,
        token_probs=tuple(out.token_probs),
        confidence=conf,
        terminated_early=False,
    )


def run_videoicl(
    query: Query,
    store: ExampleStore,
    backend: Backend,
    estimator,
    sel: SelectionConfig,
    it: IterationConfig,
    *,
    template: TemplateConfig | None = None,
) -> InferenceTrace:
    """Confidence-gated iterative inference over the ranked example list.

    Iteration i consumes the next m ranked demonstrations (the final batch
    may be shorter). The loop stops at the first confidence strictly above
    ``it.c_th`` or when the ranked list is exhausted; the final answer
    follows ``it.output_policy``.
    """
    if sel.k != it.k:
        raise ValueError(f"selection k={sel.k} and iteration k={it.k} must agree")
    ranked = select_relevant_k(store, query, sel)
    records: list[IterationRecord] = []
    try:
        for index, batch in enumerate(_ranked_batches(ranked, it.m), start=1):
            record = _run_iteration(
                query, store, backend, estimator,
                [r.demonstration_id for r in batch], index, template,
            )
            if record.confidence > it.c_th:
                record = IterationRecord(
                    index=record.index,
                    example_ids=record.example_ids,
                    answer=record.answer,
                    token_probs=record.token_probs,
                    confidence=record.confidence,
                    terminated_early=True,
                )
                records.append(record)
                break
            records.append(record)
    except BackendError as exc:
        raise TraceAborted(query.id, "videoicl", records, exc) from exc
    final_answer, final_conf = _finalize(records, it.output_policy)
    return InferenceTrace(
        query_id=query.id,
        strategy="videoicl",
        records=tuple(records),
        final_answer=final_answer,
        final_confidence=final_conf,
    )


def run_simrankonce(
    query: Query,
    store: ExampleStore,
    backend: Backend,
    sel: SelectionConfig,
    m: int,
    *,
    template: TemplateConfig | None = None,
) -> InferenceTrace:
    """One generation with the top-m ranked demonstrations; no gating."""
    ranked = select_relevant_k(store, query, sel.with_k(m))
    estimator = MinTokenProbEstimator()
    try:
        record = _run_iteration(
            query, store, backend, estimator,
            [r.demonstration_id for r in ranked], 1, template,
        )
    except BackendError as exc:
        raise TraceAborted(query.id, "simrankonce", [], exc) from exc
    return InferenceTrace(
        query_id=query.id,
        strategy="simrankonce",
        records=(record,),
        final_answer=record.answer,
        final_confidence=record.confidence,
    )


def run_randexvote(
    query: Query,
    store: ExampleStore,
    backend: Backend,
    sel: SelectionConfig,
    it: IterationConfig,
    seed: int,
    *,
    template: TemplateConfig | None = None,
) -> InferenceTrace:
    """ceil(k/m) generations with random demonstrations, majority-voted.

    Each iteration draws m examples uniformly without replacement (within
    the iteration) from the pool minus ``sel.exclude_ids``; a pool smaller
    than m is used whole. Fully determined by ``seed``.
    """
    pool_ids = [d.id for d in store.demonstrations if d.id not in sel.exclude_ids]
    if not pool_ids:
        raise EmptyPoolError("no demonstrations left after applying exclude_ids")
    rng = np.random.default_rng(seed)
    estimator = MinTokenProbEstimator()
    records: list[IterationRecord] = []
    try:
        for index in range(1, it.max_iterations + 1):
            size = min(it.m, len(pool_ids))
            drawn = rng.choice(len(pool_ids), size=size, replace=False)
            demo_ids = [pool_ids[j] for j in drawn]
            records.append(
                _run_iteration(query, store, backend, estimator, demo_ids, index, template)
            )
    except BackendError as exc:
        raise TraceAborted(query.id, "randexvote", records, exc) from exc
    widx = _majority_index([r.answer for r in records], [r.confidence for r in records])
    return InferenceTrace(
        query_id=query.id,
        strategy="randexvote",
        records=tuple(records),
        final_answer=records[widx].answer,
        final_confidence=records[widx].confidence,
        seed=seed,
    )


def run_simrankvote(
    query: Query,
    store: ExampleStore,
    backend: Backend,
    sel: SelectionConfig,
    it: IterationConfig,
    *,
    template: TemplateConfig | None = None,
) -> InferenceTrace:
    """Ranked batching with every iteration forced to run, majority-voted."""
    if sel.k != it.k:
        raise ValueError(f"selection k={sel.k} and iteration k={it.k} must agree")
    ranked = select_relevant_k(store, query, sel)
    estimator = MinTokenProbEstimator()
    records: list[IterationRecord] = []
    try:
        for index, batch in enumerate(_ranked_batches(ranked, it.m), start=1):
            records.append(
                _run_iteration(
                    query, store, backend, estimator,
                    [r.demonstration_id for r in batch], index, template,
                )
            )
    except BackendError as exc:
        raise TraceAborted(query.id, "simrankvote", records, exc) from exc
    widx = _majority_index([r.answer for r in records], [r.confidence for r in records])
    return InferenceTrace(
        query_id=query.id,
        strategy="simrankvote",
        records=tuple(records),
        final_answer=records[widx].answer,
        final_confidence=records[widx].confidence,
    )


def run_zeroshot(
    query: Query,
    backend: Backend,
    *,
    template: TemplateConfig | None = None,
) -> InferenceTrace:
    """Single generation with no demonstrations at all."""
    estimator = MinTokenProbEstimator()
    segments = assemble_prompt([], query, template)
    try:
        out = generate(backend, segments)
        conf = estimator.confidence(backend, segments, out)
    except BackendError as exc:
        raise TraceAborted(query.id, "zeroshot", [], exc) from exc
    record = IterationRecord(
        index=1,
        example_ids=(),
        answer=out.answer,
        token_probs=tuple(out.token_probs),
        confidence=conf,
        terminated_early=False,
    )
    return InferenceTrace(
        query_id=query.id,
        strategy="zeroshot",
        records=(record,),
        final_answer=record.answer,
        final_confidence=record.confidence,
    )
