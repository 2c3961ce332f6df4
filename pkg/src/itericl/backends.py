"""Generation backends behind one interface: prompt assembly, test doubles, HTTP.

A backend turns an assembled segment list into an answer plus per-token
probabilities. The HTTP backend speaks chat-completions JSON with
log-probabilities enabled; the mocks exist so every other module can be
tested deterministically without a model server.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import requests

from .distributions import ConfidenceDistribution, split_uniform
from .seeding import derive_seed
from .store import Demonstration, Query, as_embedding

logger = logging.getLogger(__name__)

__all__ = [
    "ROLE_SYSTEM",
    "ROLE_DEMO_QUESTION",
    "ROLE_DEMO_ANSWER",
    "ROLE_QUERY_QUESTION",
    "PromptSegment",
    "TemplateConfig",
    "GenerationOutput",
    "Backend",
    "BackendError",
    "TransportError",
    "RequestTimeoutError",
    "HTTPStatusError",
    "MissingLogprobsError",
    "InvalidProbabilityError",
    "ScriptError",
    "assemble_prompt",
    "validate_segments",
    "generate",
    "embed",
    "ScriptedMockBackend",
    "StochasticMockParams",
    "StochasticMockBackend",
    "HttpBackend",
    "FixtureEmbeddingClient",
    "HttpEmbeddingClient",
]

ROLE_SYSTEM = "system"
ROLE_DEMO_QUESTION = "demonstration_question"
ROLE_DEMO_ANSWER = "demonstration_answer"
ROLE_QUERY_QUESTION = "query_question"

_ROLES = (ROLE_SYSTEM, ROLE_DEMO_QUESTION, ROLE_DEMO_ANSWER, ROLE_QUERY_QUESTION)

API_KEY_ENV = "ICL_API_KEY"


class BackendError(Exception):
    """Base class for generation and embedding failures."""


class TransportError(BackendError):
    """The request never produced an HTTP response."""


class RequestTimeoutError(BackendError):
    """The request timed out before a response arrived."""


class HTTPStatusError(BackendError):
    """The server answered with a non-2xx status."""

    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"HTTP {status}: {detail}" if detail else f"HTTP {status}")
        self.status = status


class MissingLogprobsError(BackendError):
    """The response carried no token log-probabilities."""


class InvalidProbabilityError(BackendError):
    """A backend surfaced a token probability outside (0, 1]."""


class ScriptError(BackendError):
    """A scripted mock has no entry for the requested query/iteration."""


@dataclass(frozen=True)
class PromptSegment:
    """One piece of an assembled prompt.

    ``source_id`` names the demonstration or query the segment came from;
    it never goes over the wire but lets mocks key their scripts and makes
    prompts auditable.
    """

    role: str
    text: str
    video_ref: str | None = None
    source_id: str | None = None


@dataclass(frozen=True)
class TemplateConfig:
    """Prompt formatting knobs; the defaults pass text through verbatim."""

    system_text: str | None = None
    question_format: str = "{question}"
    answer_format: str = "{answer}"


@dataclass(frozen=True)
class GenerationOutput:
    """An answer with the ordered probability of each generated token."""

    answer: str
    token_probs: tuple[float, ...]
    backend_meta: Mapping[str, object] = field(default_factory=dict)


class Backend(Protocol):
    """Anything that can answer an assembled prompt."""

    def generate(self, segments: Sequence[PromptSegment]) -> GenerationOutput:
        ...


def assemble_prompt(
    demos: Sequence[Demonstration],
    query: Query,
    template: TemplateConfig | None = None,
) -> list[PromptSegment]:
    """Interleave demonstrations ahead of the query question.

    Deterministic: optional system text, then one question/answer segment
    pair per demonstration in the given order, then exactly one query
    segment. Zero demonstrations is valid and yields a zero-shot prompt.
    """
    tpl = template or TemplateConfig()
    segments: list[PromptSegment] = []
    if tpl.system_text:
        segments.append(PromptSegment(role=ROLE_SYSTEM, text=tpl.system_text))
    for d in demos:
        segments.append(
            PromptSegment(
                role=ROLE_DEMO_QUESTION,
                text=tpl.question_format.format(question=d.question),
                video_ref=d.video_ref,
                source_id=d.id,
            )
        )
        segments.append(
            PromptSegment(
                role=ROLE_DEMO_ANSWER,
                text=tpl.answer_format.format(answer=d.answer),
                source_id=d.id,
            )
        )
    segments.append(
        PromptSegment(
            role=ROLE_QUERY_QUESTION,
            text=tpl.question_format.format(question=query.question),
            video_ref=query.video_ref,
            source_id=query.id,
        )
    )
    return segments


def validate_segments(segments: Sequence[PromptSegment]) -> None:
    """Reject malformed segment lists before they reach a backend."""
    if not segments:
        raise ValueError("segment list is empty")
    for seg in segments:
        if seg.role not in _ROLES:
            raise ValueError(f"unknown segment role '{seg.role}'")
    if segments[-1].role != ROLE_QUERY_QUESTION:
        raise ValueError("last segment must be the query question")
    if sum(1 for s in segments if s.role == ROLE_QUERY_QUESTION) != 1:
        raise ValueError("exactly one query_question segment is required")
    body = [s for s in segments if s.role in (ROLE_DEMO_QUESTION, ROLE_DEMO_ANSWER)]
    if len(body) % 2 != 0:
        raise ValueError("demonstration segments must come in question/answer pairs")
    for i, seg in enumerate(body):
        expected = ROLE_DEMO_QUESTION if i % 2 == 0 else ROLE_DEMO_ANSWER
        if seg.role != expected:
            raise ValueError("demonstration segments must alternate question/answer")


def _check_output(out: GenerationOutput) -> GenerationOutput:
    """Enforce probability sanity; backend violations are never propagated."""
    if out.answer and not out.token_probs:
        raise InvalidProbabilityError("nonempty answer with no token probabilities")
    for p in out.token_probs:
        if not (0.0 < p <= 1.0) or math.isnan(p):
            raise InvalidProbabilityError(f"token probability {p} outside (0, 1]")
    return out


def generate(backend: Backend, segments: Sequence[PromptSegment]) -> GenerationOutput:
    """Run one generation through ``backend`` with input/output validation."""
    validate_segments(segments)
    return _check_output(backend.generate(segments))


def _query_segment(segments: Sequence[PromptSegment]) -> PromptSegment:
    for seg in reversed(segments):
        if seg.role == ROLE_QUERY_QUESTION:
            return seg
    raise ValueError("segment list has no query_question segment")


class ScriptedMockBackend:
    """Replays canned (answer, token_probs) entries, one per call per query.

    The script maps query id -> ordered list of outputs; each generate()
    call consumes the next entry for the query that produced the segment
    list. Consumption is atomic per query id.
    """

    def __init__(self, script: Mapping[str, Sequence[tuple[str, Sequence[float]]]]):
        self._script = {
            qid: [(str(a), tuple(float(p) for p in probs)) for a, probs in entries]
            for qid, entries in script.items()
        }
        self._cursor: dict[str, int] = {qid: 0 for qid in self._script}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedMockBackend":
        """Load a JSON script: {query_id: [{"answer":..., "token_probs":[...]}, ...]}."""
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        script = {
            qid: [(entry["answer"], entry["token_probs"]) for entry in entries]
            for qid, entries in raw.items()
        }
        return cls(script)

    def generate(self, segments: Sequence[PromptSegment]) -> GenerationOutput:
        qid = _query_segment(segments).source_id
        if qid is None:
            raise ScriptError("query segment carries no source id to key the script")
        with self._lock:
            if qid not in self._script:
                raise ScriptError(f"no script for query '{qid}'")
            pos = self._cursor[qid]
            entries = self._script[qid]
            if pos >= len(entries):
                raise ScriptError(
                    f"script for query '{qid}' exhausted after {len(entries)} calls"
                )
            self._cursor[qid] = pos + 1
        answer, probs = entries[pos]
        return GenerationOutput(answer=answer, token_probs=probs, backend_meta={"scripted": True})


@dataclass(frozen=True)
class StochasticMockParams:
    """Knobs of the synthetic model used to bridge runs to the accuracy theory.

    ``p_c`` is the chance one generation answers correctly. The confidence
    distributions are declared so the gate's acceptance rates at any
    threshold are known in closed form via ``tail_prob``.
    """

    p_c: float
    conf_dist_correct: ConfidenceDistribution
    conf_dist_incorrect: ConfidenceDistribution
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.p_c <= 1.0:
            raise ValueError(f"p_c must be in [0, 1], got {self.p_c}")

    def tpr(self, threshold: float) -> float:
        """P(confidence > threshold | answer correct)."""
        return self.conf_dist_correct.tail_prob(threshold)

    def fpr(self, threshold: float) -> float:
        """P(confidence > threshold | answer incorrect)."""
        return self.conf_dist_incorrect.tail_prob(threshold)

    @classmethod
    def with_known_rates(
        cls, p_c: float, tpr: float, fpr: float, threshold: float, seed: int
    ) -> "StochasticMockParams":
        """Split-uniform distributions hitting exact rates at ``threshold``."""
        return cls(
            p_c=p_c,
            conf_dist_correct=split_uniform(threshold, tpr),
            conf_dist_incorrect=split_uniform(threshold, fpr),
            seed=seed,
        )


class StochasticMockBackend:
    """Synthetic model with a known correctness rate and confidence profile.

    Each call answers correctly with probability ``p_c`` (emitting the
    query's gold answer) and reports a single-token probability drawn from
    the matching confidence distribution. Randomness is keyed per query id
    from the configured seed, so traces do not depend on how queries are
    scheduled across workers.
    """

    def __init__(self, params: StochasticMockParams, golds: Mapping[str, str]):
        self._params = params
        self._golds = dict(golds)
        self._rngs: dict[str, np.random.Generator] = {}
        self._lock = threading.Lock()

    def _rng_for(self, qid: str) -> np.random.Generator:
        rng = self._rngs.get(qid)
        if rng is None:
            rng = np.random.default_rng(derive_seed(self._params.seed, qid))
            self._rngs[qid] = rng
        return rng

    def generate(self, segments: Sequence[PromptSegment]) -> GenerationOutput:
        qid = _query_segment(segments).source_id
        if qid is None or qid not in self._golds:
            raise ScriptError(f"no gold answer configured for query '{qid}'")
        gold = self._golds[qid]
        with self._lock:
            rng = self._rng_for(qid)
            correct = rng.random() < self._params.p_c
            dist = (
                self._params.conf_dist_correct
                if correct
                else self._params.conf_dist_incorrect
            )
            conf = float(dist.sample(rng))
        answer = gold if correct else f"not {gold}"
        return GenerationOutput(
            answer=answer,
            token_probs=(conf,),
            backend_meta={"correct": correct},
        )


def _segments_to_messages(segments: Sequence[PromptSegment]) -> list[dict]:
    """Chat-completions message list; video references ride along as URI parts."""
    messages: list[dict] = []
    for seg in segments:
        if seg.role == ROLE_SYSTEM:
            messages.append({"role": "system", "content": seg.text})
            continue
        role = "assistant" if seg.role == ROLE_DEMO_ANSWER else "user"
        if seg.video_ref:
            content: object = [
                {"type": "text", "text": seg.text},
                {"type": "video_url", "video_url": {"url": seg.video_ref}},
            ]
        else:
            content = seg.text
        messages.append({"role": role, "content": content})
    return messages


class HttpBackend:
    """Chat-completions client with greedy decoding and token log-probabilities.

    Sends POST {endpoint}/chat/completions with temperature 0 and
    logprobs enabled; token probabilities come back as exp(logprob).
    Transport failures, timeouts and 5xx/429 responses are retried with
    bounded exponential backoff; other non-2xx statuses and protocol
    violations fail immediately. A semaphore caps in-flight requests.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        max_tokens: int = 256,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        max_in_flight: int = 8,
        api_key_env: str = API_KEY_ENV,
        session: requests.Session | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self._url = endpoint.rstrip("/") + "/chat/completions"
        self._model = model
        self._max_tokens = max_tokens
        self._timeout = timeout
        self._max_attempts = max_attempts
        self._backoff_base = backoff_base
        self._backoff_cap = backoff_cap
        self._semaphore = threading.Semaphore(max_in_flight)
        self._api_key_env = api_key_env
        self._session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self._api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _post(self, body: dict) -> requests.Response:
        last_error: BackendError | None = None
        for attempt in range(self._max_attempts):
            if attempt > 0:
                delay = min(self._backoff_base * (2 ** (attempt - 1)), self._backoff_cap)
                logger.warning(
                    "retrying generation (attempt %d/%d) after %s; sleeping %.2fs",
                    attempt + 1, self._max_attempts, last_error, delay,
                )
                time.sleep(delay)
            try:
                resp = self._session.post(
                    self._url, json=body, headers=self._headers(), timeout=self._timeout
                )
            except requests.Timeout:
                last_error = RequestTimeoutError(
                    f"no response within {self._timeout}s from {self._url}"
                )
                continue
            except requests.RequestException as exc:
                last_error = TransportError(f"request to {self._url} failed: {exc}")
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = HTTPStatusError(resp.status_code, resp.text[:200])
                continue
            if not 200 <= resp.status_code < 300:
                raise HTTPStatusError(resp.status_code, resp.text[:200])
            return resp
        assert last_error is not None
        raise last_error

    def generate(self, segments: Sequence[PromptSegment]) -> GenerationOutput:
        body = {
            "model": self._model,
            "messages": _segments_to_messages(segments),
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": 1,
            "max_tokens": self._max_tokens,
        }
        with self._semaphore:
            resp = self._post(body)
        try:
            payload = resp.json()
        except ValueError:
            raise MissingLogprobsError("response body is not JSON") from None
        try:
            choice = payload["choices"][0]
            answer = choice["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MissingLogprobsError("response has no choices/message content") from None
        logprob_content = (choice.get("logprobs") or {}).get("content")
        if not logprob_content:
            raise MissingLogprobsError("missing token probabilities in response")
        try:
            token_probs = tuple(math.exp(float(t["logprob"])) for t in logprob_content)
        except (KeyError, TypeError, ValueError):
            raise MissingLogprobsError("malformed logprobs entries in response") from None
        return _check_output(
            GenerationOutput(
                answer=str(answer),
                token_probs=token_probs,
                backend_meta={"status": resp.status_code, "model": self._model},
            )
        )


class FixtureEmbeddingClient:
    """Echoes preconfigured embeddings, keyed by text and by video reference."""

    def __init__(self, text_map: Mapping[str, Sequence[float]],
                 video_map: Mapping[str, Sequence[float]]):
        self._text_map = {k: tuple(v) for k, v in text_map.items()}
        self._video_map = {k: tuple(v) for k, v in video_map.items()}

    def embed(self, text: str, video_ref: str):
        try:
            return (
                as_embedding(self._text_map[text], context="text_embedding"),
                as_embedding(self._video_map[video_ref], context="video_embedding"),
            )
        except KeyError as exc:
            raise BackendError(f"no fixture embedding for {exc}") from None


class HttpEmbeddingClient:
    """POSTs {"text":..., "video":...} to {endpoint}/embed and expects
    {"text_embedding":[...], "video_embedding":[...]} back."""

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 60.0,
        api_key_env: str = API_KEY_ENV,
        session: requests.Session | None = None,
    ):
        self._url = endpoint.rstrip("/") + "/embed"
        self._timeout = timeout
        self._api_key_env = api_key_env
        self._session = session or requests.Session()

    def embed(self, text: str, video_ref: str):
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self._api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            resp = self._session.post(
                self._url,
                json={"text": text, "video": video_ref},
                headers=headers,
                timeout=self._timeout,
            )
        except requests.Timeout:
            raise RequestTimeoutError(f"no response within {self._timeout}s") from None
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}") from None
        if not 200 <= resp.status_code < 300:
            raise HTTPStatusError(resp.status_code, resp.text[:200])
        payload = resp.json()
        try:
            return (
                as_embedding(payload["text_embedding"], context="text_embedding"),
                as_embedding(payload["video_embedding"], context="video_embedding"),
            )
        except (KeyError, ValueError) as exc:
            raise BackendError(f"malformed embedding response: {exc}") from None


def embed(embedding_client, text: str, video_ref: str, *, store=None):
    """Fetch (text, video) embeddings for a query, optionally checking dims.

    Skip this entirely when embeddings already ship with the query file;
    it exists for the online path only.
    """
    text_emb, video_emb = embedding_client.embed(text, video_ref)
    text_emb = as_embedding(text_emb, context="text_embedding")
    video_emb = as_embedding(video_emb, context="video_embedding")
    if store is not None:
        from .store import DimensionMismatchError

        if text_emb.shape[0] != store.text_dim:
            raise DimensionMismatchError(
                f"embedding service returned text dim {text_emb.shape[0]}, "
                f"store uses {store.text_dim}"
            )
        if video_emb.shape[0] != store.video_dim:
            raise DimensionMismatchError(
                f"embedding service returned video dim {video_emb.shape[0]}, "
                f"store uses {store.video_dim}"
            )
    return text_emb, video_emb
