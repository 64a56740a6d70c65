"""Minimal client for OpenAI-compatible chat-completion endpoints."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import httpx

from .parsing import REPAIR_INSTRUCTION, ExplanationParseError, ExplanationReport, parse_explanation
from .prompts import BudgetError, PromptBundle

logger = logging.getLogger(__name__)

API_KEY_ENV = "AGC_LLM_API_KEY"


class LlmConfigurationError(RuntimeError):
    pass


class LlmTransportError(RuntimeError):
    """Retries exhausted on network errors, 429 or 5xx."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class LlmRequestError(RuntimeError):
    """Non-retryable client error (4xx other than 429)."""

    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return self.backoff_base * self.backoff_factor ** (attempt - 1)


@dataclass
class LlmClientConfig:
    base_url: str = "https://api.openai.com"
    model_name: str = "gpt-4o-mini"
    temperature: float = 0.0
    request_seed: int = 0
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    token_budget: int = 16000
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.temperature != 0.0:
            raise ValueError("temperature is fixed at 0.0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass
class ChatResult:
    content: str
    latency: float
    attempts: int


class LlmClient:
    """Posts chat completions with retry; ``transport`` swaps in an offline backend."""

    def __init__(self, config: LlmClientConfig, transport: Optional[httpx.BaseTransport] = None,
                 api_key: Optional[str] = None, clock: Callable[[], float] = time.perf_counter,
                 sleep: Callable[[float], None] = time.sleep):
        key = api_key or os.environ.get(API_KEY_ENV)
        if not key:
            if transport is None:
                raise LlmConfigurationError(f"set {API_KEY_ENV} to use a live endpoint")
            key = "offline"
        self.config = config
        self.clock = clock
        self.sleep = sleep
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            transport=transport,
            timeout=config.timeout_s,
        )

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def chat(self, messages: list) -> ChatResult:
        cfg = self.config
        body = {
            "model": cfg.model_name,
            "messages": messages,
            "temperature": cfg.temperature,
            "seed": cfg.request_seed,
        }
        t0 = self.clock()
        last = ""
        for attempt in range(1, cfg.retry.max_attempts + 1):
            if attempt > 1:
                self.sleep(cfg.retry.delay(attempt - 1))
            try:
                resp = self._http.post("/v1/chat/completions", json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                logger.warning("attempt %d: %s", attempt, last)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                logger.warning("attempt %d: %s", attempt, last)
                continue
            if resp.status_code >= 400:
                raise LlmRequestError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise LlmRequestError(f"unexpected response body: {exc}", resp.status_code) from exc
            return ChatResult(content or "", self.clock() - t0, attempt)
        raise LlmTransportError(f"gave up after {cfg.retry.max_attempts} attempts ({last})",
                                cfg.retry.max_attempts)

    def request_explanation(self, bundle: PromptBundle) -> ChatResult:
        if bundle.estimated_tokens > self.config.token_budget:
            raise BudgetError(f"prompt needs ~{bundle.estimated_tokens} tokens, budget is {self.config.token_budget}")
        return self.chat(_messages(bundle))

    def explain(self, bundle: PromptBundle) -> ExplanationReport:
        """Request, parse, and (once) repair an explanation."""
        first = self.request_explanation(bundle)
        spent = [first.latency]

        def repair(raw: str) -> str:
            msgs = _messages(bundle) + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": REPAIR_INSTRUCTION},
            ]
            res = self.chat(msgs)
            spent.append(res.latency)
            return res.content

        report = parse_explanation(first.content, repair=repair)
        report.latency = sum(spent)
        report.sample_id = bundle.sample_id
        return report


def _messages(bundle: PromptBundle) -> list:
    return [
        {"role": "system", "content": bundle.system_text},
        {"role": "user", "content": bundle.query_text},
    ]


@dataclass
class ExplanationFailure:
    sample_id: int
    error: str
    raw_response: Optional[str] = None

    def as_dict(self) -> dict:
        return {"sample_id": self.sample_id, "error": self.error, "raw_response": self.raw_response}


def explain_many(client: LlmClient, bundles: list) -> list:
    """Explain bundles concurrently (``max_in_flight``); results keep input order.

    Per-sample failures come back as :class:`ExplanationFailure` instead of raising.
    """

    def one(bundle):
        try:
            return client.explain(bundle)
        except ExplanationParseError as exc:
            return ExplanationFailure(bundle.sample_id, str(exc), exc.raw)
        except (LlmTransportError, LlmRequestError) as exc:
            return ExplanationFailure(bundle.sample_id, str(exc))

    with ThreadPoolExecutor(max_workers=client.config.max_in_flight) as pool:
        return list(pool.map(one, bundles))
