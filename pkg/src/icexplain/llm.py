"""OpenAI-compatible chat client with record/replay caching and scripted mocks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

from .models import BlackBoxModel, tokenize
from .prompts import letters

logger = logging.getLogger(__name__)

MODES = ("live", "record", "replay", "mock")
Responder = Callable[[str], str]


class LlmError(RuntimeError):
    pass


class CacheMiss(LlmError):
    def __init__(self, key: str):
        super().__init__(f"no cached transcript for key {key} (replay mode)")
        self.key = key


class AuthError(LlmError):
    pass


class TransportError(LlmError):
    pass


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4"
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_attempts: int = 5
    backoff: float = 2.0
    mode: str = "mock"
    cache_path: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    requests_per_minute: float = 60.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"llm mode must be one of {MODES}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class Transcript:
    key: str
    prompt_hash: str
    prompt: str
    reply: str
    model: str
    temperature: float
    timestamp: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)


def cache_key(prompt: str, model: str, temperature: float) -> str:
    blob = json.dumps([prompt, model, float(temperature)], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class TranscriptCache:
    """Append-only JSON-lines store; one writer at a time, reads from memory."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._entries: dict[str, Transcript] = {}
        if self.path and self.path.exists():
            for rec in iter_cache(self.path):
                self._entries.setdefault(rec.key, rec)

    def get(self, key: str) -> Transcript | None:
        return self._entries.get(key)

    def put(self, t: Transcript) -> None:
        with self._lock:
            if t.key in self._entries:
                return
            self._entries[t.key] = t
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(t.to_json() + "\n")
                    fh.flush()

    def __len__(self) -> int:
        return len(self._entries)


def iter_cache(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                yield Transcript(**json.loads(line))
            except (json.JSONDecodeError, TypeError) as exc:
                raise LlmError(f"{path}: corrupt cache line {i}: {exc}") from None


def verify_cache(path: str | Path) -> dict:
    """Check every record's key against its prompt/model/temperature."""
    n = bad = dup = 0
    seen = set()
    for t in iter_cache(path):
        n += 1
        if cache_key(t.prompt, t.model, t.temperature) != t.key or \
                hashlib.sha256(t.prompt.encode("utf-8")).hexdigest() != t.prompt_hash:
            bad += 1
        if t.key in seen:
            dup += 1
        seen.add(t.key)
    return {"records": n, "mismatched": bad, "duplicates": dup, "ok": bad == 0}


class RateLimiter:
    """Token bucket: ``rate`` requests per minute, burst of one minute's worth."""

    def __init__(self, per_minute: float, clock=time.monotonic, sleep=time.sleep):
        self.rate = per_minute / 60.0
        self.capacity = max(1.0, per_minute)
        self.tokens = self.capacity
        self.clock, self.sleep = clock, sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token, sleeping if needed; returns seconds waited."""
        if self.rate <= 0:
            return 0.0
        with self._lock:
            now = self.clock()
            self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
            self.last = now
            wait = 0.0
            if self.tokens < 1.0:
                wait = (1.0 - self.tokens) / self.rate
                self.sleep(wait)
                self.last = self.clock()
                self.tokens = 1.0
            self.tokens -= 1.0
            return wait


class LlmClient:
    def __init__(self, config: LlmConfig, responder: Responder | None = None,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep,
                 clock=time.monotonic):
        self.config = config
        self.responder = responder
        self.cache = TranscriptCache(config.cache_path)
        self._transport = transport
        self._sleep = sleep
        self.limiter = RateLimiter(config.requests_per_minute, clock=clock, sleep=sleep)
        self.network_calls = 0
        if config.mode == "mock" and responder is None:
            raise LlmError("mock mode needs a responder")

    def complete(self, prompt) -> Transcript:
        text = getattr(prompt, "text", prompt)
        cfg = self.config
        key = cache_key(text, cfg.model, cfg.temperature)
        if cfg.mode in ("replay", "record"):
            hit = self.cache.get(key)
            if hit is not None:
                return hit
            if cfg.mode == "replay":
                raise CacheMiss(key)
        if cfg.mode == "mock":
            hit = self.cache.get(key)
            if hit is not None:
                return hit
            reply, usage = self.responder(text), {}
        else:
            reply, usage = self._call(text)
        t = Transcript(key=key, prompt_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
                       prompt=text, reply=reply, model=cfg.model, temperature=cfg.temperature,
                       timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                       prompt_tokens=usage.get("prompt_tokens"),
                       completion_tokens=usage.get("completion_tokens"))
        if cfg.mode in ("record", "mock") and cfg.cache_path:
            self.cache.put(t)
        return t

    def _call(self, text: str) -> tuple[str, dict]:
        cfg = self.config
        api_key = os.environ.get(cfg.api_key_env)
        if not api_key:
            raise AuthError(f"environment variable {cfg.api_key_env} is not set")
        body = {"model": cfg.model, "temperature": cfg.temperature, "max_tokens": cfg.max_tokens,
                "messages": [{"role": "user", "content": text}]}
        url = cfg.endpoint.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {api_key}"}
        last_err = None
        with httpx.Client(timeout=cfg.timeout, transport=self._transport) as http:
            for attempt in range(cfg.max_attempts):
                if attempt:
                    self._sleep(cfg.backoff ** attempt)
                self.limiter.acquire()
                self.network_calls += 1
                try:
                    resp = http.post(url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last_err = f"transport error: {exc}"
                    logger.warning("attempt %d: %s", attempt + 1, last_err)
                    continue
                if resp.status_code == 401:
                    raise AuthError("endpoint rejected the API key (401)")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_err = f"HTTP {resp.status_code}"
                    logger.warning("attempt %d: %s", attempt + 1, last_err)
                    continue
                if resp.status_code != 200:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    data = resp.json()
                    return data["choices"][0]["message"]["content"], data.get("usage") or {}
                except (ValueError, KeyError, IndexError) as exc:
                    raise TransportError(f"malformed completion payload: {exc}") from None
        raise TransportError(f"gave up after {cfg.max_attempts} attempts ({last_err})")


# -- mock oracles --------------------------------------------------------------

_K_RE = re.compile(r"what are the (?:top )?(\w+) most important (features|words)")
_WORDS = {w: i for i, w in enumerate(
    "zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen "
    "fifteen sixteen seventeen eighteen nineteen twenty".split())}


def importance_order(model: BlackBoxModel) -> np.ndarray:
    """Ground-truth order: |w| for linear models, summed |weight| path products for MLPs."""
    if model.kind != "mlp":
        mag = np.abs(model.linear_weights)
    else:
        agg = np.abs(model.weights[0])
        for w in model.weights[1:]:
            agg = agg @ np.abs(w)
        mag = agg.sum(axis=1)
    return np.argsort(-mag, kind="stable")


def _requested_k(prompt: str) -> int | None:
    m = _K_RE.search(prompt)
    if not m:
        return None
    word = m.group(1).lower()
    return _WORDS.get(word, int(word) if word.isdigit() else None)


def mock_oracle(model: BlackBoxModel) -> Responder:
    """Scripted LLM that always answers with the model's true importance order."""
    order = importance_order(model)

    def respond(prompt: str) -> str:
        if model.kind == "bow-text":
            m = re.search(r"^Original sentence: (.*)$", prompt, re.M)
            toks = list(dict.fromkeys(tokenize(m.group(1)) if m else []))
            vocab, w = model.vocabulary, model.linear_weights
            toks.sort(key=lambda t: -abs(w[vocab[t]]) if t in vocab else 0.0)
            k = _requested_k(prompt) or 3
            return "Ranking by coefficient magnitude.\n" + ", ".join(toks[:k])
        names = letters(model.n_features)
        ranked = [names[i] for i in order]
        if prompt.rstrip().endswith("Explanation:"):
            return ",".join(ranked)
        k = _requested_k(prompt)
        k = len(ranked) if k is None else min(k, len(ranked))
        return "The features ranked by influence are listed below.\n" + ", ".join(ranked[:k])

    return respond


def echo_responder(reply: str) -> Responder:
    return lambda prompt: reply
