"""In-memory demonstration pool with similarity-ranked retrieval.

A pool holds demonstrations (question, answer, video reference) together
with precomputed text and video embeddings. Retrieval scores every entry
with a weighted sum of the two cosine similarities and returns the top-k
by exhaustive scan, which keeps results exact at the pool sizes this
package targets (tens of thousands of entries).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Demonstration",
    "Query",
    "SelectionConfig",
    "RankedExample",
    "ExampleStore",
    "StoreError",
    "PoolFormatError",
    "DimensionMismatchError",
    "EmptyPoolError",
    "as_embedding",
    "cosine_similarity",
    "combined_similarity",
    "select_relevant_k",
    "ingest_pool",
    "store_stats",
    "load_queries",
]


class StoreError(Exception):
    """Base class for pool ingestion and retrieval failures."""


class PoolFormatError(StoreError):
    """A pool or query file violates the JSONL record contract."""


class DimensionMismatchError(StoreError):
    """Embedding dimensions disagree within a store or against a query."""


class EmptyPoolError(StoreError):
    """No demonstrations remain after applying exclusions."""


def as_embedding(values, *, context: str = "embedding") -> np.ndarray:
    """Coerce ``values`` to a read-only 1-D float64 vector, rejecting NaN/Inf."""
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{context} is not a flat list of numbers: {exc}") from None
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{context} must be a nonempty flat list of numbers")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{context} contains NaN or infinite entries")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Demonstration:
    """One pool entry: a worked example plus its precomputed embeddings."""

    id: str
    question: str
    answer: str
    video_ref: str
    text_embedding: np.ndarray
    video_embedding: np.ndarray
    ingest_index: int


@dataclass(frozen=True)
class Query:
    """A test-time input; ``gold_answer`` is optional and only used by evaluation."""

    id: str
    question: str
    video_ref: str
    text_embedding: np.ndarray
    video_embedding: np.ndarray
    gold_answer: str | None = None


@dataclass(frozen=True)
class SelectionConfig:
    """Retrieval knobs.

    ``alpha`` weights text similarity against video similarity (0.5 gives
    both modalities equal say and is the default; override per task).
    ``exclude_ids`` supports benchmark hygiene such as keeping a query out
    of its own candidate pool.
    """

    k: int
    alpha: float = 0.5
    exclude_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        object.__setattr__(self, "exclude_ids", frozenset(self.exclude_ids))

    def with_k(self, k: int) -> "SelectionConfig":
        return replace(self, k=k)


@dataclass(frozen=True)
class RankedExample:
    """One retrieval hit; ranks start at 1 and scores are nonincreasing."""

    demonstration_id: str
    score: float
    rank: int


class ExampleStore:
    """Immutable demonstration pool with vectorized similarity scoring.

    The store is safe for concurrent read-only selection once constructed;
    all mutation happens in ``__init__``.
    """

    def __init__(self, demonstrations: Iterable[Demonstration]):
        demos = tuple(demonstrations)
        if not demos:
            raise EmptyPoolError("cannot build a store from zero demonstrations")
        seen: dict[str, int] = {}
        for d in demos:
            if d.id in seen:
                raise PoolFormatError(f"duplicate id '{d.id}' in pool")
            seen[d.id] = d.ingest_index
        text_dim = demos[0].text_embedding.shape[0]
        video_dim = demos[0].video_embedding.shape[0]
        for d in demos:
            if d.text_embedding.shape[0] != text_dim:
                raise DimensionMismatchError(
                    f"text embedding of '{d.id}' has dim "
                    f"{d.text_embedding.shape[0]}, store uses {text_dim}"
                )
            if d.video_embedding.shape[0] != video_dim:
                raise DimensionMismatchError(
                    f"video embedding of '{d.id}' has dim "
                    f"{d.video_embedding.shape[0]}, store uses {video_dim}"
                )
        self._demos = demos
        self._by_id = {d.id: d for d in demos}
        self._text_mat = np.stack([d.text_embedding for d in demos])
        self._video_mat = np.stack([d.video_embedding for d in demos])
        self._text_norms = np.linalg.norm(self._text_mat, axis=1)
        self._video_norms = np.linalg.norm(self._video_mat, axis=1)
        self._ingest = np.array([d.ingest_index for d in demos], dtype=np.int64)
        for arr in (self._text_mat, self._video_mat, self._text_norms,
                    self._video_norms, self._ingest):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self._demos)

    @property
    def demonstrations(self) -> tuple[Demonstration, ...]:
        return self._demos

    @property
    def text_dim(self) -> int:
        return self._text_mat.shape[1]

    @property
    def video_dim(self) -> int:
        return self._video_mat.shape[1]

    def ids(self) -> list[str]:
        return [d.id for d in self._demos]

    def get(self, demonstration_id: str) -> Demonstration:
        try:
            return self._by_id[demonstration_id]
        except KeyError:
            raise KeyError(f"no demonstration with id '{demonstration_id}'") from None


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two equal-length vectors, in [-1, 1].

    A zero-norm operand yields 0.0 with a logged warning instead of an
    error, so one degenerate row cannot abort a batch run.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise DimensionMismatchError(
            f"cosine requires equal-length vectors, got shapes {av.shape} and {bv.shape}"
        )
    if not (np.all(np.isfinite(av)) and np.all(np.isfinite(bv))):
        raise ValueError("cosine operands must be finite")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        logger.warning("zero-norm vector in cosine similarity; returning 0.0")
        return 0.0
    return float(np.dot(av, bv) / (na * nb))


def combined_similarity(query: Query, demo: Demonstration, alpha: float) -> float:
    """Weighted sum of text and video cosine similarity: alpha*text + (1-alpha)*video."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    text_sim = cosine_similarity(query.text_embedding, demo.text_embedding)
    video_sim = cosine_similarity(query.video_embedding, demo.video_embedding)
    return alpha * text_sim + (1.0 - alpha) * video_sim


def _cosine_column(mat: np.ndarray, norms: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, int]:
    """Cosine of ``q`` against every row of ``mat``; zero-norm rows score 0."""
    qnorm = float(np.linalg.norm(q))
    zero_rows = norms == 0.0
    n_degenerate = int(zero_rows.sum())
    if qnorm == 0.0:
        return np.zeros(mat.shape[0]), n_degenerate + 1
    safe = np.where(zero_rows, 1.0, norms)
    cos = (mat @ q) / (safe * qnorm)
    if n_degenerate:
        cos = np.where(zero_rows, 0.0, cos)
    return cos, n_degenerate


def select_relevant_k(
    store: ExampleStore, query: Query, cfg: SelectionConfig
) -> list[RankedExample]:
    """Top-k demonstrations by combined similarity, exhaustively scored.

    Results are sorted by descending score; exact ties are broken by
    ascending ingest order so repeated runs agree. Entries listed in
    ``cfg.exclude_ids`` are never returned, and fewer than k results come
    back when the pool (after exclusion) is smaller than k.
    """
    qt = np.asarray(query.text_embedding, dtype=np.float64)
    qv = np.asarray(query.video_embedding, dtype=np.float64)
    if qt.shape[0] != store.text_dim:
        raise DimensionMismatchError(
            f"query text embedding dim {qt.shape[0]} != store dim {store.text_dim}"
        )
    if qv.shape[0] != store.video_dim:
        raise DimensionMismatchError(
            f"query video embedding dim {qv.shape[0]} != store dim {store.video_dim}"
        )

    if cfg.exclude_ids:
        kept = np.array(
            [d.id not in cfg.exclude_ids for d in store.demonstrations], dtype=bool
        )
        kept_idx = np.flatnonzero(kept)
    else:
        kept_idx = np.arange(len(store))
    if kept_idx.size == 0:
        raise EmptyPoolError("no demonstrations left after applying exclude_ids")

    text_cos, text_degen = _cosine_column(
        store._text_mat[kept_idx], store._text_norms[kept_idx], qt
    )
    video_cos, video_degen = _cosine_column(
        store._video_mat[kept_idx], store._video_norms[kept_idx], qv
    )
    if text_degen or video_degen:
        logger.warning(
            "zero-norm embeddings scored as 0 during selection "
            "(text: %d, video: %d)", text_degen, video_degen,
        )
    scores = cfg.alpha * text_cos + (1.0 - cfg.alpha) * video_cos

    # lexsort: primary key descending score, secondary ascending ingest order
    order = np.lexsort((store._ingest[kept_idx], -scores))
    top = order[: min(cfg.k, kept_idx.size)]
    demos = store.demonstrations
    return [
        RankedExample(
            demonstration_id=demos[kept_idx[j]].id,
            score=float(scores[j]),
            rank=rank,
        )
        for rank, j in enumerate(top, start=1)
    ]


_POOL_FIELDS = ("id", "question", "answer", "video", "text_embedding", "video_embedding")


def _parse_record(obj, lineno: int, *, required: Sequence[str]) -> dict:
    if not isinstance(obj, dict):
        raise PoolFormatError(f"line {lineno}: expected a JSON object")
    for key in required:
        if key not in obj:
            raise PoolFormatError(f"line {lineno}: missing field '{key}'")
    if not isinstance(obj["id"], str) or not obj["id"]:
        raise PoolFormatError(f"line {lineno}: 'id' must be a nonempty string")
    return obj


def _iter_jsonl(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise PoolFormatError(f"line {lineno}: invalid JSON: {exc.msg}") from None


def ingest_pool(path: str | Path) -> ExampleStore:
    """Load a JSONL demonstration pool into an immutable store.

    One object per line with fields id, question, answer, video,
    text_embedding, video_embedding. Ingest order is preserved and used as
    the tie-break for equal retrieval scores. Duplicate ids, malformed
    lines and inconsistent embedding dimensions are rejected with the
    offending line number.
    """
    demos: list[Demonstration] = []
    seen: set[str] = set()
    text_dim = video_dim = None
    for lineno, obj in _iter_jsonl(path):
        rec = _parse_record(obj, lineno, required=_POOL_FIELDS)
        if rec["id"] in seen:
            raise PoolFormatError(f"line {lineno}: duplicate id '{rec['id']}'")
        seen.add(rec["id"])
        try:
            text_emb = as_embedding(rec["text_embedding"], context="text_embedding")
            video_emb = as_embedding(rec["video_embedding"], context="video_embedding")
        except ValueError as exc:
            raise PoolFormatError(f"line {lineno}: {exc}") from None
        if text_dim is None:
            text_dim, video_dim = text_emb.shape[0], video_emb.shape[0]
        elif text_emb.shape[0] != text_dim:
            raise DimensionMismatchError(
                f"line {lineno}: text embedding dim {text_emb.shape[0]} != {text_dim}"
            )
        elif video_emb.shape[0] != video_dim:
            raise DimensionMismatchError(
                f"line {lineno}: video embedding dim {video_emb.shape[0]} != {video_dim}"
            )
        demos.append(
            Demonstration(
                id=rec["id"],
                question=str(rec["question"]),
                answer=str(rec["answer"]),
                video_ref=str(rec["video"]),
                text_embedding=text_emb,
                video_embedding=video_emb,
                ingest_index=len(demos),
            )
        )
    if not demos:
        raise PoolFormatError(f"pool file '{path}' contains no records")
    return ExampleStore(demos)


def store_stats(store: ExampleStore) -> dict:
    """Counts and embedding dimensions of a store."""
    return {
        "demonstrations": len(store),
        "text_dim": store.text_dim,
        "video_dim": store.video_dim,
    }


def load_queries(
    path: str | Path,
    *,
    store: ExampleStore | None = None,
    embedding_client=None,
) -> list[Query]:
    """Load a JSONL query file.

    Records mirror the pool format without 'answer' (an optional
    'gold_answer' is kept for evaluation). Records may omit embeddings
    only when ``embedding_client`` is provided to compute them; records
    that already carry embeddings never touch the client. When ``store``
    is given, embedding dimensions are validated against it.
    """
    queries: list[Query] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        rec = _parse_record(obj, lineno, required=("id", "question", "video"))
        if rec["id"] in seen:
            raise PoolFormatError(f"line {lineno}: duplicate id '{rec['id']}'")
        seen.add(rec["id"])
        has_embeddings = "text_embedding" in rec and "video_embedding" in rec
        if has_embeddings:
            try:
                text_emb = as_embedding(rec["text_embedding"], context="text_embedding")
                video_emb = as_embedding(rec["video_embedding"], context="video_embedding")
            except ValueError as exc:
                raise PoolFormatError(f"line {lineno}: {exc}") from None
        elif embedding_client is not None:
            text_emb, video_emb = embedding_client.embed(
                str(rec["question"]), str(rec["video"])
            )
            text_emb = as_embedding(text_emb, context="text_embedding")
            video_emb = as_embedding(video_emb, context="video_embedding")
        else:
            raise PoolFormatError(
                f"line {lineno}: missing embeddings and no embedding client configured"
            )
        if store is not None:
            if text_emb.shape[0] != store.text_dim:
                raise DimensionMismatchError(
                    f"line {lineno}: query text embedding dim {text_emb.shape[0]} "
                    f"!= store dim {store.text_dim}"
                )
            if video_emb.shape[0] != store.video_dim:
                raise DimensionMismatchError(
                    f"line {lineno}: query video embedding dim {video_emb.shape[0]} "
                    f"!= store dim {store.video_dim}"
                )
        gold = rec.get("gold_answer")
        queries.append(
            Query(
                id=rec["id"],
                question=str(rec["question"]),
                video_ref=str(rec["video"]),
                text_embedding=text_emb,
                video_embedding=video_emb,
                gold_answer=None if gold is None else str(gold),
            )
        )
    if not queries:
        raise PoolFormatError(f"query file '{path}' contains no records")
    return queries
