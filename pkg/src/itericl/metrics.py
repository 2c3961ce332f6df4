"""Text-overlap and exact-match scoring for inference outputs.

BLEU aggregates clipped n-gram counts at the corpus level (per-item
scores are also reported); the longest-common-subsequence F-measure is
averaged over pairs. Tokenization is one frozen rule: lowercase, split
punctuation from words, then split on whitespace.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .normalize import normalize_for_task

__all__ = [
    "EvalTask",
    "MetricReport",
    "MissingGoldError",
    "tokenize",
    "bleu",
    "sentence_bleu",
    "rouge_l",
    "lcs_length",
    "caption_metrics",
    "exact_match_accuracy",
    "TASK_KINDS",
]

TASK_KINDS = ("multiple_choice", "open_ended", "classification", "captioning")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class MissingGoldError(ValueError):
    """Scored outputs reference query ids with no gold answer."""

    def __init__(self, missing_ids: Sequence[str]):
        ids = sorted(missing_ids)
        super().__init__(f"no gold answer for ids: {', '.join(ids)}")
        self.missing_ids = ids


@dataclass(frozen=True)
class EvalTask:
    """Task family plus normalization switches.

    Captioning is scored with text-overlap metrics; the other kinds use
    exact match after normalization (multiple choice compares extracted
    option letters).
    """

    kind: str

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind '{self.kind}'")


@dataclass
class MetricReport:
    """Corpus scores plus the per-item breakdown behind them."""

    scores: dict[str, float]
    sample_count: int
    per_item: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "sample_count": self.sample_count,
            "per_item": self.per_item,
        }


def tokenize(text: str) -> list[str]:
    """Lowercase tokens with punctuation separated into single-character tokens."""
    return _TOKEN_RE.findall(str(text).lower())


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_reference_lists(references: Sequence) -> list[list[str]]:
    refs: list[list[str]] = []
    for entry in references:
        if isinstance(entry, str):
            refs.append([entry])
        else:
            refs.append([str(r) for r in entry])
        if not refs[-1]:
            raise ValueError("every candidate needs at least one reference")
    return refs


def _closest_ref_length(cand_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _bleu_from_stats(matched: Sequence[int], totals: Sequence[int],
                     cand_len: int, ref_len: int, max_n: int,
                     smoothing: bool) -> dict[str, float]:
    if cand_len == 0:
        return {f"bleu-{n}": 0.0 for n in range(1, max_n + 1)}
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    log_precisions: list[float | None] = []
    for n in range(1, max_n + 1):
        m, t = matched[n - 1], totals[n - 1]
        if smoothing and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            log_precisions.append(None)
        else:
            log_precisions.append(math.log(m / t))
    scores: dict[str, float] = {}
    for n in range(1, max_n + 1):
        prefix = log_precisions[:n]
        if any(lp is None for lp in prefix):
            scores[f"bleu-{n}"] = 0.0
        else:
            scores[f"bleu-{n}"] = bp * math.exp(sum(prefix) / n)  # type: ignore[arg-type]
    return scores


def bleu(
    candidates: Sequence[str],
    references: Sequence,
    max_n: int = 4,
    *,
    smoothing: bool = False,
) -> dict[str, float]:
    """Corpus BLEU-1..max_n with clipped counts and the standard brevity penalty.

    ``references`` holds one reference string or a list of references per
    candidate. A zero clipped count at some order makes that and all
    deeper orders score 0 unless ``smoothing`` is on (add-one on orders
    above unigram).
    """
    if not candidates:
        raise ValueError("no candidates to score")
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    ref_lists = _as_reference_lists(references)
    matched = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, ref_lists):
        ct = tokenize(cand)
        rts = [tokenize(r) for r in refs]
        cand_len += len(ct)
        ref_len += _closest_ref_length(len(ct), [len(rt) for rt in rts])
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(ct, n)
            if not cand_counts:
                continue
            max_ref: Counter = Counter()
            for rt in rts:
                for gram, count in _ngram_counts(rt, n).items():
                    if count > max_ref[gram]:
                        max_ref[gram] = count
            matched[n - 1] += sum(
                min(count, max_ref[gram]) for gram, count in cand_counts.items()
            )
            totals[n - 1] += sum(cand_counts.values())
    return _bleu_from_stats(matched, totals, cand_len, ref_len, max_n, smoothing)


def sentence_bleu(candidate: str, references, max_n: int = 4,
                  *, smoothing: bool = False) -> dict[str, float]:
    """BLEU of a single pair, same conventions as the corpus figure."""
    return bleu([candidate], [references], max_n, smoothing=smoothing)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length via the usual rolling-row DP."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            curr[j] = prev[j - 1] + 1 if x == y else max(prev[j], curr[j - 1])
        prev = curr
    return prev[-1]


def _rouge_l_pair(cand_tokens: list[str], ref_tokens: list[str]) -> float:
    if not cand_tokens or not ref_tokens:
        return 0.0
    lcs = lcs_length(cand_tokens, ref_tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand_tokens)
    recall = lcs / len(ref_tokens)
    return 2.0 * precision * recall / (precision + recall)


def rouge_l(candidates: Sequence[str], references: Sequence) -> float:
    """Mean LCS F-measure (beta = 1); multi-reference pairs take the best reference."""
    if not candidates:
        raise ValueError("no candidates to score")
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    ref_lists = _as_reference_lists(references)
    total = 0.0
    for cand, refs in zip(candidates, ref_lists):
        ct = tokenize(cand)
        total += max(_rouge_l_pair(ct, tokenize(r)) for r in refs)
    return total / len(candidates)


def caption_metrics(
    candidates: Sequence[str],
    references: Sequence,
    *,
    ids: Sequence[str] | None = None,
    max_n: int = 4,
    smoothing: bool = False,
) -> MetricReport:
    """Corpus BLEU-1..max_n and LCS F-measure with per-item breakdowns."""
    corpus = bleu(candidates, references, max_n, smoothing=smoothing)
    corpus["rouge-l"] = rouge_l(candidates, references)
    keys = [str(i) for i in (ids if ids is not None else range(len(candidates)))]
    per_item: dict[str, dict[str, float]] = {}
    ref_lists = _as_reference_lists(references)
    for key, cand, refs in zip(keys, candidates, ref_lists):
        item = sentence_bleu(cand, refs, max_n, smoothing=smoothing)
        item["rouge-l"] = rouge_l([cand], [refs])
        per_item[key] = item
    return MetricReport(scores=corpus, sample_count=len(candidates), per_item=per_item)


def exact_match_accuracy(
    final_answers: Mapping[str, str],
    golds: Mapping[str, str],
    task: EvalTask,
) -> MetricReport:
    """Fraction of answers matching their gold after task-aware normalization.

    ``final_answers`` maps query id to the trace's final answer. Every
    scored id must have a gold; missing ones raise with the full id list.
    """
    missing = [qid for qid in final_answers if qid not in golds]
    if missing:
        raise MissingGoldError(missing)
    if not final_answers:
        raise ValueError("no answers to score")
    per_item: dict[str, dict[str, float]] = {}
    hits = 0
    for qid, answer in final_answers.items():
        match = normalize_for_task(answer, task.kind) == normalize_for_task(
            golds[qid], task.kind
        )
        hits += int(match)
        per_item[qid] = {"accuracy": float(match)}
    return MetricReport(
        scores={"accuracy": hits / len(final_answers)},
        sample_count=len(final_answers),
        per_item=per_item,
    )
