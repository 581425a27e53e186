"""Judge backends, the retrying gateway, verdict parsing, and the synthetic oracle.

Every backend implements ``send(request) -> str`` for one attempt. Retries,
backoff, and the concurrency bound live in :class:`Gateway`, so scripted,
oracle, and remote backends all share one resilience path.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .preference import Label, PreferencePair, swap_pair

logger = logging.getLogger(__name__)

API_KEY_ENV = "ARR_API_KEY"


class Order(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


# -- errors -----------------------------------------------------------------


class JudgeError(RuntimeError):
    """Base class for backend failures. Carries the request tag."""

    def __init__(self, message: str, request_tag: str = ""):
        super().__init__(f"[{request_tag}] {message}" if request_tag else message)
        self.request_tag = request_tag


class TransientBackendError(JudgeError):
    """Retryable failure: transport error, 5xx, or 429."""


class BackendTimeout(TransientBackendError):
    pass


class RetriesExhausted(JudgeError):
    pass


class AuthenticationError(JudgeError):
    pass


class MalformedResponse(JudgeError):
    pass


class VerdictParseError(ValueError):
    pass


# -- request / response / verdict --------------------------------------------


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_uri: str


@dataclass(frozen=True)
class JudgeRequest:
    system_text: str
    user_parts: tuple[TextPart | ImagePart, ...]
    temperature: float = 0.0
    max_output_units: int = 1024
    request_tag: str = ""

    def __post_init__(self):
        if not isinstance(self.user_parts, tuple):
            object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if not self.user_parts:
            raise ValueError("JudgeRequest needs at least one user part")
        if not np.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.max_output_units <= 0:
            raise ValueError("max_output_units must be positive")

    @property
    def user_text(self) -> str:
        return "\n".join(p.text for p in self.user_parts if isinstance(p, TextPart))

    @property
    def stage(self) -> str:
        return self.request_tag.split(":", 1)[0]


@dataclass(frozen=True)
class JudgeResponse:
    text: str
    backend_id: str
    latency_ms: int
    attempt_count: int


@dataclass(frozen=True)
class Verdict:
    preferred: Label
    rationale: str = ""
    raw: str = ""


_VERDICT_RE = re.compile(r"^\s*VERDICT\s*:\s*(FIRST|SECOND)\s*$", re.IGNORECASE)


def parse_verdict(text: str) -> Verdict:
    """Extract the ``VERDICT: FIRST|SECOND`` sentinel line.

    Missing or conflicting verdict lines raise; nothing is defaulted.
    """
    lines = text.splitlines()
    hits = [(i, m.group(1).upper()) for i, line in enumerate(lines) if (m := _VERDICT_RE.match(line))]
    if not hits:
        raise VerdictParseError("missing verdict")
    if len({choice for _, choice in hits}) > 1:
        raise VerdictParseError("conflicting verdict lines")
    idx, choice = hits[-1]
    rationale = "\n".join(lines[:idx]).strip()
    preferred = Label.FIRST if choice == "FIRST" else Label.SECOND
    return Verdict(preferred=preferred, rationale=rationale, raw=text)


def render_verdict(verdict: Verdict) -> str:
    head = verdict.rationale.rstrip()
    line = f"VERDICT: {verdict.preferred.value.upper()}"
    return f"{head}\n{line}" if head else line


# -- backends -----------------------------------------------------------------


Reply = str | Exception


class ScriptedBackend:
    """Replies from a table keyed by request tag, or from a callable.

    A table value may be a single reply or a list consumed in order (the last
    entry repeats). Exceptions in the script are raised instead of returned.
    """

    def __init__(
        self,
        replies: dict[str, Reply | list[Reply]] | Callable[[JudgeRequest], Reply] | None = None,
        *,
        default: Reply | None = None,
        backend_id: str = "scripted",
    ):
        self.replies = replies if replies is not None else {}
        self.default = default
        self.backend_id = backend_id
        self.calls: list[JudgeRequest] = []
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    def send(self, req: JudgeRequest) -> str:
        with self._lock:
            self.calls.append(req)
            if callable(self.replies):
                reply = self.replies(req)
            elif req.request_tag in self.replies:
                entry = self.replies[req.request_tag]
                if isinstance(entry, list):
                    i = self._cursor.get(req.request_tag, 0)
                    self._cursor[req.request_tag] = i + 1
                    reply = entry[min(i, len(entry) - 1)]
                else:
                    reply = entry
            elif self.default is not None:
                reply = self.default
            else:
                raise MalformedResponse("no scripted reply", req.request_tag)
        if isinstance(reply, Exception):
            raise reply
        return reply


@dataclass(frozen=True)
class OracleConfig:
    weight_vector: tuple[float, ...]
    position_bias: float = 0.0
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight_vector", tuple(float(w) for w in self.weight_vector))
        if not self.weight_vector:
            raise ValueError("weight_vector must be non-empty")
        for name in ("position_bias", "noise_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


def _stable_hash(*parts: object) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _oracle_rng(seed: int, pair_id: str, order: Order | None) -> np.random.Generator:
    tag = order.value if order is not None else "any"
    return np.random.default_rng([seed, _stable_hash(pair_id), _stable_hash(tag)])


def oracle_decide(
    f_first: Sequence[float],
    f_second: Sequence[float],
    cfg: OracleConfig,
    pair_id: str,
    order: Order,
    axes: Iterable[int] | None = None,
) -> Label:
    """Oracle decision in presentation coordinates.

    Scores are weighted sums over `axes` (all axes when None). Exact ties are
    broken by an order-independent coin so the unbiased oracle stays
    order-equivariant.
    """
    w = np.asarray(cfg.weight_vector)
    a = np.asarray(f_first, dtype=float)
    b = np.asarray(f_second, dtype=float)
    if a.shape != w.shape or b.shape != w.shape:
        raise ValueError(f"dimension mismatch: weights {w.shape[0]}, features {a.shape[0]}/{b.shape[0]}")
    if axes is not None:
        mask = np.zeros_like(w)
        idx = [k for k in axes if 0 <= k < len(w)]
        mask[idx] = 1.0
        w = w * mask
    s1, s2 = float(w @ a), float(w @ b)
    if s1 > s2:
        choice = Label.FIRST
    elif s2 > s1:
        choice = Label.SECOND
    else:
        coin = _oracle_rng(cfg.seed, pair_id, None).random() < 0.5
        ta, tb = tuple(a), tuple(b)
        if ta == tb:
            choice = Label.FIRST
        else:
            choice = Label.FIRST if (ta < tb) == coin else Label.SECOND
    rng = _oracle_rng(cfg.seed, pair_id, order)
    u_bias, u_noise = rng.random(2)
    if u_bias < cfg.position_bias:
        choice = Label.FIRST
    if u_noise < cfg.noise_rate:
        choice = choice.flipped()
    return choice


def oracle_judge(
    pair: PreferencePair,
    cfg: OracleConfig,
    order: Order,
    axes: Iterable[int] | None = None,
) -> Verdict:
    """Judge `pair` as presented in `order`; the verdict is in presentation coordinates."""
    shown = pair if order is Order.FORWARD else swap_pair(pair)
    if shown.first.feature_vector is None or shown.second.feature_vector is None:
        raise ValueError(f"oracle needs feature vectors (pair {pair.id!r})")
    choice = oracle_decide(shown.first.feature_vector, shown.second.feature_vector, cfg, pair.id, order, axes)
    return Verdict(preferred=choice, rationale="oracle", raw=f"VERDICT: {choice.value.upper()}")


# Text protocol the oracle backend reads out of rendered prompts.
_FEATURES_RE = re.compile(r"^Candidate ([12]) features: (\[.*\])\s*$", re.MULTILINE)
AXIS_RE = re.compile(r"\[axis=(\d+)\]")
_RUBRIC_BLOCK_RE = re.compile(r"^Rubric (\S+):\s*$", re.MULTILINE)


def parse_tag(tag: str) -> tuple[str, str, Order]:
    parts = tag.split(":")
    stage = parts[0]
    pair_id = parts[1] if len(parts) > 1 else ""
    order = Order(parts[2]) if len(parts) > 2 and parts[2] in ("forward", "reverse") else Order.FORWARD
    return stage, pair_id, order


def make_tag(stage: str, pair_id: str = "", order: Order = Order.FORWARD) -> str:
    return f"{stage}:{pair_id}:{order.value}"


class OracleBackend:
    """Deterministic synthetic judge that speaks the prompt protocol.

    It plays every role of the rubric pipeline and the evaluator: rubric
    criteria are ``[axis=k]`` markers, candidates are feature vectors, and the
    decision is the masked linear score from :func:`oracle_decide`.
    """

    def __init__(self, cfg: OracleConfig, backend_id: str | None = None):
        self.cfg = cfg
        self.backend_id = backend_id or f"oracle(seed={cfg.seed})"

    def _features(self, req: JudgeRequest) -> tuple[list[float], list[float]]:
        found = {m.group(1): json.loads(m.group(2)) for m in _FEATURES_RE.finditer(req.user_text)}
        if "1" not in found or "2" not in found:
            raise MalformedResponse("oracle request lacks candidate feature vectors", req.request_tag)
        return found["1"], found["2"]

    def _criteria_for_winner(self, f_win, f_lose) -> str:
        w = np.asarray(self.cfg.weight_vector)
        gain = w * (np.asarray(f_win) - np.asarray(f_lose))
        axes = [k for k in range(len(w)) if gain[k] > 0]
        lines = [f"- [axis={k}] The output shows a high level of quality attribute {k}." for k in axes]
        if not lines:
            lines = ["- The output satisfies the request."]
        return "\n".join(lines)

    def _structure(self, req: JudgeRequest) -> str:
        text = req.user_text
        blocks = list(_RUBRIC_BLOCK_RE.finditer(text))
        by_axis: dict[int, list[str]] = {}
        loose: list[str] = []
        for i, m in enumerate(blocks):
            end = blocks[i + 1].start() if i + 1 < len(blocks) else len(text)
            for line in text[m.end():end].splitlines():
                line = line.strip()
                if not line.startswith("- "):
                    continue
                entry = f"- [{m.group(1)}] {line[2:]}"
                axes = AXIS_RE.findall(line)
                if axes:
                    by_axis.setdefault(int(axes[0]), []).append(entry)
                else:
                    loose.append(entry)
        out = ["```rubric"]
        for k in sorted(by_axis):
            out += [f"## Quality attribute {k}", f"Operationalization: Check quality attribute {k} of each output.", *by_axis[k]]
        if loose:
            out += ["## Overall alignment", "Operationalization: Global consistency with the prompt.", *loose]
        out.append("```")
        return "\n".join(out)

    def send(self, req: JudgeRequest) -> str:
        stage, pair_id, order = parse_tag(req.request_tag)
        if stage == "structure":
            return self._structure(req)
        f1, f2 = self._features(req)
        if stage in ("generate", "refine"):
            # generation prompts always present the preferred output as candidate 1
            return self._criteria_for_winner(f1, f2)
        axes_found = [int(k) for k in AXIS_RE.findall(req.system_text + "\n" + req.user_text)]
        axes = sorted(set(axes_found)) if axes_found else None
        choice = oracle_decide(f1, f2, self.cfg, pair_id, order, axes)
        if stage == "verify":
            return f"Applied the rubric to both outputs.\nVERDICT: {choice.value.upper()}"
        return f"Compared the outputs under the rubric.\nVERDICT: {choice.value.upper()}"


class RemoteBackend:
    """OpenAI-compatible chat-completions client (one attempt per ``send``)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: str | None = None,
        timeout_s: float = 60.0,
        backend_id: str | None = None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.backend_id = backend_id or f"remote:{model}"
        self._client = httpx.Client(timeout=timeout_s)
        self._httpx = httpx

    def build_body(self, req: JudgeRequest) -> dict:
        content = []
        for part in req.user_parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": part.media_uri}})
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": req.system_text}]},
                {"role": "user", "content": content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_units,
        }

    def send(self, req: JudgeRequest) -> str:
        httpx = self._httpx
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=self.build_body(req), headers=headers)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"timeout: {exc}", req.request_tag) from exc
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}", req.request_tag) from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"authentication failed ({resp.status_code})", req.request_tag)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}", req.request_tag)
        if resp.status_code >= 400:
            raise JudgeError(f"HTTP {resp.status_code}: {resp.text[:200]}", req.request_tag)
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"malformed response body: {exc}", req.request_tag) from exc
        if isinstance(text, list):
            text = "".join(c.get("text", "") for c in text if isinstance(c, dict))
        if not isinstance(text, str):
            raise MalformedResponse("message content is not text", req.request_tag)
        return text

    def close(self) -> None:
        self._client.close()


# -- gateway ------------------------------------------------------------------


class Gateway:
    """Retry, backoff, and admission control around a single backend."""

    def __init__(
        self,
        backend,
        *,
        retry_limit: int = 3,
        concurrency_bound: int = 4,
        base_delay_s: float = 0.5,
        max_delay_s: float = 8.0,
        temperature: float = 0.0,
        max_output_units: int = 1024,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int = 0,
    ):
        if retry_limit < 0 or concurrency_bound < 1:
            raise ValueError("retry_limit >= 0 and concurrency_bound >= 1 required")
        self.backend = backend
        self.retry_limit = retry_limit
        self.concurrency_bound = concurrency_bound
        self.base_delay_s = base_delay_s
        self.max_delay_s = max_delay_s
        self.temperature = temperature
        self.max_output_units = max_output_units
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(concurrency_bound)
        self._jitter = random.Random(jitter_seed)
        self._jitter_lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return getattr(self.backend, "backend_id", type(self.backend).__name__)

    def request(self, system_text: str, user_parts, request_tag: str) -> JudgeRequest:
        return JudgeRequest(
            system_text=system_text,
            user_parts=tuple(user_parts),
            temperature=self.temperature,
            max_output_units=self.max_output_units,
            request_tag=request_tag,
        )

    def _backoff(self, attempt: int) -> float:
        with self._jitter_lock:
            j = self._jitter.random()
        return min(self.max_delay_s, self.base_delay_s * 2 ** (attempt - 1)) * (0.5 + 0.5 * j)

    def chat_complete(self, req: JudgeRequest) -> JudgeResponse:
        attempt = 0
        while True:
            attempt += 1
            start = time.perf_counter()
            try:
                with self._gate:
                    text = self.backend.send(req)
            except TransientBackendError as exc:
                if attempt > self.retry_limit:
                    logger.warning("giving up on %s after %d attempts", req.request_tag, attempt)
                    if isinstance(exc, BackendTimeout):
                        raise BackendTimeout(f"timed out after {attempt} attempts", req.request_tag) from exc
                    raise RetriesExhausted(f"retries exhausted after {attempt} attempts: {exc}", req.request_tag) from exc
                delay = self._backoff(attempt)
                logger.debug("retrying %s in %.2fs (%s)", req.request_tag, delay, exc)
                self._sleep(delay)
                continue
            latency = int(round((time.perf_counter() - start) * 1000))
            return JudgeResponse(text=text, backend_id=self.backend_id, latency_ms=latency, attempt_count=attempt)

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply `fn` to items concurrently under the bound; results keep input order."""
        items = list(items)
        if self.concurrency_bound == 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.concurrency_bound) as pool:
            return list(pool.map(fn, items))


def as_gateway(backend) -> Gateway:
    return backend if isinstance(backend, Gateway) else Gateway(backend)


def chat_complete(backend, req: JudgeRequest) -> JudgeResponse:
    return as_gateway(backend).chat_complete(req)
