"""HTTP client backend for LLM policies served behind the ``coars/1``
wire protocol.

Endpoints (JSON bodies, UTF-8):

``POST /v1/generate``
    request ``{role, prompt, max_tokens, temperature, seed}``, response
    ``{tokens: [str], token_logprobs: [float], text}``
``POST /v1/score``
    request ``{role, prompt, tokens: [str]}``, response ``{token_logprobs}``
``GET /v1/health``
    response ``{protocol: "coars/1"}``
"""

from __future__ import annotations

import logging
import math
import threading
from typing import Sequence

import httpx
import numpy as np

from ..domain import GenerationResult
from ..errors import BackendError, DecodeError, ProtocolError, TransportError, UsageError
from .base import Context
from .prompts import parse_reply, render_prompt

PROTOCOL = "coars/1"

_log = logging.getLogger(__name__)


def _check_logprobs(values, n: int | None = None) -> list[float]:
    if not isinstance(values, list) or not values:
        raise ProtocolError("response is missing per-token logprobs")
    out = []
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v > 1e-9:
            raise ProtocolError(f"invalid token logprob {v!r}")
        out.append(float(v))
    if n is not None and len(out) != n:
        raise ProtocolError(f"expected {n} logprobs, got {len(out)}")
    return out


class RemotePolicy:
    """Policy backend that forwards rendered prompts to a serving endpoint.

    At most ``max_concurrency`` requests are in flight at once; decode
    failures are retried ``max_retries`` times with fresh seeds.
    """

    thread_safe = True

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 30.0,
        max_tokens: int = 512,
        temperature: float = 1.0,
        max_retries: int = 3,
        max_concurrency: int = 8,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.max_retries = max_retries
        self._client = client or httpx.Client(base_url=self.endpoint, timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        with self._slots:
            try:
                resp = self._client.request(method, path, json=body)
            except httpx.TimeoutException as err:
                raise TransportError(f"{path}: timeout") from err
            except httpx.HTTPError as err:
                raise TransportError(f"{path}: {err}") from err
        if resp.status_code >= 500:
            raise TransportError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProtocolError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError as err:
            raise ProtocolError(f"{path}: response is not JSON") from err
        if not isinstance(data, dict):
            raise ProtocolError(f"{path}: response is not a JSON object")
        return data

    def health(self) -> str:
        data = self._request("GET", "/v1/health")
        if data.get("protocol") != PROTOCOL:
            raise ProtocolError(f"server speaks {data.get('protocol')!r}, expected {PROTOCOL!r}")
        return data["protocol"]

    def remote_generate(self, ctx: Context, seed: int, max_tokens: int | None = None) -> dict:
        max_tokens = self.max_tokens if max_tokens is None else max_tokens
        if not isinstance(max_tokens, int) or max_tokens < 1:
            raise ProtocolError("max_tokens must be a positive integer")
        body = {
            "role": ctx.role.value,
            "prompt": render_prompt(ctx),
            "max_tokens": max_tokens,
            "temperature": self.temperature,
            "seed": seed,
        }
        data = self._request("POST", "/v1/generate", body)
        tokens = data.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise ProtocolError("generate response has no token list")
        _check_logprobs(data.get("token_logprobs"), len(tokens))
        if not isinstance(data.get("text"), str):
            raise ProtocolError("generate response has no text")
        return data

    def generate(self, ctx: Context, rng: np.random.Generator | None = None) -> GenerationResult:
        last = None
        for attempt in range(1, self.max_retries + 1):
            seed = int(rng.integers(2**31)) if rng is not None else attempt - 1
            data = self.remote_generate(ctx, seed)
            try:
                msg = parse_reply(data["text"], ctx)
            except DecodeError as err:
                _log.debug("decode attempt %d failed: %s", attempt, err)
                last = err
                continue
            return GenerationResult(tuple(data["tokens"]), tuple(data["token_logprobs"]), msg)
        raise BackendError(f"remote decode failed after {self.max_retries} attempts: {last}")

    def logprob(self, ctx: Context, tokens: Sequence) -> list[float]:
        tokens = list(tokens)
        if not all(isinstance(t, str) for t in tokens):
            raise UsageError("remote tokens must be strings")
        body = {"role": ctx.role.value, "prompt": render_prompt(ctx), "tokens": tokens}
        data = self._request("POST", "/v1/score", body)
        return _check_logprobs(data.get("token_logprobs"), len(tokens))

    remote_logprob = logprob
