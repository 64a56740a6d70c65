"""Offline chat-completion backend speaking the OpenAI wire format.

Modes
-----
echo   reply with the gold answer for the queried sample (needs ``gold``)
fixed  reply with ``fixed_response`` to every request
fault  like echo, but wrap replies in prose or code fences and turn a seeded
       fraction of samples (``garbage_rate``) into unparseable text, including
       on the repair request

Independently of the mode, ``fail_first`` makes the first N requests for each
sample fail with ``fail_status``; ``always_status`` fails every request.
"""

from __future__ import annotations

import json
import re
import threading
from collections import Counter
from typing import Optional

import httpx
import numpy as np

from .parsing import REPAIR_INSTRUCTION

MODES = ("echo", "fixed", "fault")
_SAMPLE_ID = re.compile(r'"sample_id":\s*(-?\d+)')

GARBAGE = "I am unable to produce a structured answer for this sample; the signals look unusual."


class MockBackend:
    def __init__(self, mode: str = "echo", gold: Optional[dict] = None, fixed_response: str = "",
                 garbage_rate: float = 0.1, fail_first: int = 0, fail_status: int = 500,
                 always_status: Optional[int] = None, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mock mode must be one of {MODES}")
        self.mode = mode
        self.gold = gold or {}
        self.fixed_response = fixed_response
        self.garbage_rate = garbage_rate
        self.fail_first = fail_first
        self.fail_status = fail_status
        self.always_status = always_status
        self.seed = seed
        self.requests = Counter()
        self.repairs = Counter()
        self._lock = threading.Lock()

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)

    def is_garbage(self, sample_id: int) -> bool:
        if self.mode != "fault":
            return False
        u = np.random.default_rng([self.seed, abs(sample_id), sample_id < 0]).random()
        return bool(u < self.garbage_rate)

    def handle(self, request: httpx.Request) -> httpx.Response:
        if request.method != "POST" or not request.url.path.endswith("/v1/chat/completions"):
            return httpx.Response(404, json={"error": "not found"})
        if not request.headers.get("authorization", "").startswith("Bearer "):
            return httpx.Response(401, json={"error": "missing bearer token"})
        body = json.loads(request.content)
        messages = body.get("messages", [])
        query = next((m["content"] for m in messages if m["role"] == "user"), "")
        m = _SAMPLE_ID.search(query)
        sample_id = int(m.group(1)) if m else -1
        is_repair = messages[-1]["content"] == REPAIR_INSTRUCTION

        with self._lock:
            self.requests[sample_id] += 1
            n = self.requests[sample_id]
            if is_repair:
                self.repairs[sample_id] += 1
        if self.always_status is not None:
            return httpx.Response(self.always_status, json={"error": "injected"})
        if n <= self.fail_first:
            return httpx.Response(self.fail_status, json={"error": "injected"})

        content = self._content(sample_id)
        return httpx.Response(200, json={
            "id": f"mock-{sample_id}-{n}",
            "object": "chat.completion",
            "model": body.get("model", "mock"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content},
                         "finish_reason": "stop"}],
        })

    def _content(self, sample_id: int) -> str:
        if self.mode == "fixed":
            return self.fixed_response
        if self.is_garbage(sample_id):
            return GARBAGE
        answer = dict(self.gold.get(sample_id, {}))
        if not answer:
            return GARBAGE
        answer.setdefault("justification", "Echoed reference answer.")
        text = json.dumps(answer)
        if self.mode == "echo":
            return text
        variant = sample_id % 3
        if variant == 0:
            return text
        if variant == 1:
            return f"Based on the statistics, here is my assessment:\n{text}\nLet me know if you need more detail."
        return f"```json\n{json.dumps(answer, indent=2)}\n```"
