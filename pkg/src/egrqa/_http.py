"""JSON-over-HTTP POST with bounded exponential backoff."""

from __future__ import annotations

import logging
import os
import random
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import httpx

from .errors import BackendError

log = logging.getLogger(__name__)

API_KEY_ENV = "EGR_API_KEY"
TRANSIENT_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


@dataclass
class RetryPolicy:
    max_retries: int = 3
    base_delay_s: float = 0.5
    factor: float = 2.0
    jitter: float = 0.2

    def delay(self, retry: int, rng: random.Random) -> float:
        """Backoff before retry number ``retry`` (1-based)."""
        d = self.base_delay_s * self.factor ** (retry - 1)
        return d * (1.0 + rng.uniform(-self.jitter, self.jitter))


@dataclass
class PostStats:
    attempts: int = 0
    slept_s: float = 0.0
    statuses: list[int | None] = field(default_factory=list)


def api_key_from_env() -> str | None:
    return os.environ.get(API_KEY_ENV) or None


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict[str, Any],
    *,
    api_key: str | None,
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
    stats: PostStats | None = None,
) -> dict[str, Any]:
    """POST ``payload`` and return the decoded JSON body.

    Transport errors and transient statuses are retried up to
    ``policy.max_retries`` times; anything else fails at once.
    """
    rng = rng or random.Random()
    stats = stats if stats is not None else PostStats()
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    last_status: int | None = None
    last_reason = ""
    for attempt in range(1, policy.max_retries + 2):
        stats.attempts = attempt
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            last_status, last_reason = None, f"{type(exc).__name__}: {exc}"
            stats.statuses.append(None)
        else:
            stats.statuses.append(resp.status_code)
            if resp.status_code < 400:
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise BackendError(
                        f"{url}: response is not JSON", status=resp.status_code, attempts=attempt
                    ) from exc
                if stats.slept_s:
                    log.info("%s succeeded after %d attempts, %.2fs backoff", url, attempt, stats.slept_s)
                return body
            last_status, last_reason = resp.status_code, resp.text[:200]
            if resp.status_code not in TRANSIENT_STATUS:
                break
        if attempt <= policy.max_retries:
            d = policy.delay(attempt, rng)
            log.warning("%s attempt %d failed (%s); retrying in %.2fs", url, attempt, last_status or last_reason, d)
            stats.slept_s += d
            sleep(d)
    raise BackendError(
        f"{url}: request failed after {stats.attempts} attempt(s): status={last_status} {last_reason}".rstrip(),
        status=last_status,
        attempts=stats.attempts,
    )
