"""Chat-completion client for multimodal LLM endpoints.

Requests are content-addressed: identical requests hit an append-only
response cache instead of the network. Transport failures are retried with
exponential backoff; refusals and credential rejections are not.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import httpx

from .errors import AuthError, TransportError, ValidationError

logger = logging.getLogger(__name__)

ENV_URL = "CPR_MLLM_URL"
ENV_KEY = "CPR_MLLM_KEY"

MAX_IMAGES = 2
DEFAULT_MAX_REQUEST_BYTES = 20 * 1024 * 1024

DEFAULT_REFUSAL_PHRASES = (
    "i'm sorry, but",
    "i am sorry, but",
    "i can't help with",
    "i cannot help with",
    "i can't assist",
    "i cannot assist",
    "i'm unable to",
    "i am unable to",
    "i can't provide",
    "i cannot provide",
)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    mime: str = "image/png"

    def data_url(self) -> str:
        return f"data:{self.mime};base64," + base64.b64encode(self.data).decode("ascii")


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    content: Tuple[Part, ...]


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: Tuple[Message, ...]
    temperature: float = 1.0
    max_tokens: int = 1024

    @classmethod
    def user(
        cls,
        model: str,
        text: str,
        images: Sequence[bytes] = (),
        temperature: float = 1.0,
        max_tokens: int = 1024,
    ) -> "ChatRequest":
        parts: Tuple[Part, ...] = (TextPart(text),) + tuple(ImagePart(b) for b in images)
        return cls(model, (Message("user", parts),), temperature, max_tokens)

    def text_parts(self) -> Iterable[str]:
        for m in self.messages:
            for p in m.content:
                if isinstance(p, TextPart):
                    yield p.text

    def image_parts(self) -> Iterable[bytes]:
        for m in self.messages:
            for p in m.content:
                if isinstance(p, ImagePart):
                    yield p.data

    def to_wire(self) -> dict:
        messages = []
        for m in self.messages:
            content = []
            for p in m.content:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                else:
                    content.append({"type": "image_url", "image_url": {"url": p.data_url()}})
            messages.append({"role": m.role, "content": content})
        return {
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": messages,
        }

    def validate(self, max_bytes: int = DEFAULT_MAX_REQUEST_BYTES) -> None:
        problems = []
        if self.temperature < 0:
            problems.append(f"temperature must be non-negative, got {self.temperature}")
        if self.max_tokens < 1:
            problems.append(f"max_tokens must be positive, got {self.max_tokens}")
        n_images = sum(1 for _ in self.image_parts())
        if n_images > MAX_IMAGES:
            problems.append(f"{n_images} images in request, at most {MAX_IMAGES} allowed")
        size = len(json.dumps(self.to_wire()))
        if size >= max_bytes:
            problems.append(f"request is {size} bytes, cap is {max_bytes}")
        if problems:
            raise ValidationError(problems)


class Outcome(str, enum.Enum):
    OK = "ok"
    REFUSAL = "refusal"
    MALFORMED = "malformed"
    TRANSPORT_ERROR = "transport_error"


@dataclass(frozen=True)
class GatewayResponse:
    text: str
    outcome: Outcome
    attempts: int
    cache_hit: bool = False

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (1-based)."""
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


def cache_key(request: ChatRequest) -> int:
    """64-bit content key over model, temperature, text parts and image bytes.

    Every field is length-prefixed so concatenation boundaries cannot alias;
    part order is significant.
    """
    h = hashlib.blake2b(digest_size=8)

    def feed(tag: bytes, payload: bytes) -> None:
        h.update(tag)
        h.update(len(payload).to_bytes(8, "little"))
        h.update(payload)

    feed(b"M", request.model.encode("utf-8"))
    feed(b"T", repr(float(request.temperature)).encode("ascii"))
    for m in request.messages:
        feed(b"R", m.role.encode("utf-8"))
        for p in m.content:
            if isinstance(p, TextPart):
                feed(b"t", p.text.encode("utf-8"))
            else:
                feed(b"i", p.data)
    return int.from_bytes(h.digest(), "little")


class ResponseCache:
    """Append-only response log keyed by :func:`cache_key`.

    With ``path=None`` the cache lives in memory only. Readers are lock-free
    on a dict snapshot; writers are serialized.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries: Dict[int, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    # torn final line from a crash mid-append
                    logger.warning("skipping unreadable cache line in %s", self.path)
                    continue
                self._put(int(rec["key"], 16), rec["text"])

    def _put(self, key: int, text: str) -> None:
        old = self._entries.get(key)
        if old is not None and old != text:
            logger.warning("cache key %016x collision; last writer wins", key)
        self._entries[key] = text

    def get(self, key: int) -> Optional[str]:
        return self._entries.get(key)

    def put(self, key: int, text: str) -> None:
        with self._lock:
            self._put(key, text)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": f"{key:016x}", "text": text}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


def is_refusal(text: str, phrases: Sequence[str] = DEFAULT_REFUSAL_PHRASES) -> bool:
    norm = text.strip().lower().replace("’", "'")
    if not norm:
        return True
    return any(p in norm for p in phrases)


class Gateway:
    """Client for one chat-completions endpoint.

    Args:
        url: full POST URL; defaults to ``$CPR_MLLM_URL``.
        api_key: bearer token; defaults to ``$CPR_MLLM_KEY``.
        cache: response cache; a fresh in-memory cache when omitted.
        request_log: optional JSONL file receiving one line per ``complete`` call.
        max_concurrency: cap on simultaneous in-flight HTTP requests.
    """

    def __init__(
        self,
        url: Optional[str] = None,
        api_key: Optional[str] = None,
        cache: Optional[ResponseCache] = None,
        request_log=None,
        refusal_phrases: Sequence[str] = DEFAULT_REFUSAL_PHRASES,
        max_request_bytes: int = DEFAULT_MAX_REQUEST_BYTES,
        max_concurrency: int = 4,
        timeout: float = 120.0,
        sleep=time.sleep,
    ):
        self.url = url or os.environ.get(ENV_URL, "")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY, "")
        self.cache = cache if cache is not None else ResponseCache()
        self.request_log = Path(request_log) if request_log is not None else None
        self.refusal_phrases = tuple(refusal_phrases)
        self.max_request_bytes = max_request_bytes
        self.max_concurrency = max(1, int(max_concurrency))
        self._slots = threading.BoundedSemaphore(self.max_concurrency)
        self._log_lock = threading.Lock()
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, body: dict) -> httpx.Response:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        with self._slots:
            return self._client.post(self.url, json=body, headers=headers)

    def _log(self, tag, key: int, request: ChatRequest, resp: GatewayResponse) -> None:
        if self.request_log is None:
            return
        entry = {
            "tag": tag,
            "key": f"{key:016x}",
            "model": request.model,
            "images": [hashlib.sha256(b).hexdigest() for b in request.image_parts()],
            "outcome": resp.outcome.value,
            "attempts": resp.attempts,
            "cache_hit": resp.cache_hit,
        }
        with self._log_lock:
            self.request_log.parent.mkdir(parents=True, exist_ok=True)
            with open(self.request_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")

    def complete(
        self,
        request: ChatRequest,
        policy: RetryPolicy = RetryPolicy(),
        tag=None,
        accept: Optional[Callable[[str], bool]] = None,
    ) -> GatewayResponse:
        """Send ``request`` and classify the reply.

        ``accept`` lets the caller veto a reply: rejected text comes back as
        ``Outcome.MALFORMED`` and is never cached, so a retry reaches the
        endpoint again.

        Raises:
            TransportError: transport failures outlasted ``policy.max_attempts``.
            AuthError: the endpoint rejected the credentials.
        """
        request.validate(self.max_request_bytes)
        key = cache_key(request)
        cached = self.cache.get(key)
        if cached is not None:
            resp = GatewayResponse(cached, Outcome.OK, 0, cache_hit=True)
            self._log(tag, key, request, resp)
            return resp
        if not self.url:
            raise TransportError(f"no endpoint configured (set {ENV_URL})")

        body = request.to_wire()
        last_error = ""
        for attempt in range(1, policy.max_attempts + 1):
            try:
                http = self._post(body)
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                http = None
            if http is not None:
                if http.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials ({http.status_code})")
                if http.status_code == 429 or http.status_code >= 500:
                    last_error = f"HTTP {http.status_code}"
                elif http.status_code >= 400:
                    raise TransportError(f"HTTP {http.status_code}: {http.text[:200]}")
                else:
                    resp = self._classify(http, attempt)
                    if resp.ok and accept is not None and not accept(resp.text):
                        resp = GatewayResponse(resp.text, Outcome.MALFORMED, attempt)
                    if resp.ok:
                        self.cache.put(key, resp.text)
                    self._log(tag, key, request, resp)
                    return resp
            logger.info("attempt %d/%d failed: %s", attempt, policy.max_attempts, last_error)
            if attempt < policy.max_attempts:
                self._sleep(policy.delay(attempt))
        self._log(tag, key, request, GatewayResponse("", Outcome.TRANSPORT_ERROR, policy.max_attempts))
        raise TransportError(f"gave up after {policy.max_attempts} attempts: {last_error}")

    def _classify(self, http: httpx.Response, attempt: int) -> GatewayResponse:
        try:
            text = http.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            return GatewayResponse(http.text, Outcome.MALFORMED, attempt)
        if text is None:
            text = ""
        if not isinstance(text, str):
            return GatewayResponse(json.dumps(text), Outcome.MALFORMED, attempt)
        if is_refusal(text, self.refusal_phrases):
            return GatewayResponse(text, Outcome.REFUSAL, attempt)
        return GatewayResponse(text, Outcome.OK, attempt)
