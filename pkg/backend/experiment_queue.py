from __future__ import annotations

import json
import logging
import os
from typing import Any, Optional

try:
    import redis
except Exception:  # pragma: no cover - import guard for environments without redis extra
    redis = None  # type: ignore

LOGGER = logging.getLogger(__name__)


def _queue_url() -> str:
    return os.environ.get("QF_QUEUE_URL", "redis://redis:6379/0")


def _queue_key() -> str:
    return os.environ.get("QF_QUEUE_KEY", "quasiflow:experiments")


def _redis_client():
    if redis is None:
        return None
    try:
        client = redis.Redis.from_url(_queue_url())
        client.ping()
        return client
    except Exception:
        return None


def encode_job(config_path: str, *, seed: int | None = None, force: bool = False, output: str | None = None) -> str:
    return json.dumps({"config": str(config_path), "seed": seed, "force": bool(force), "output": output}, sort_keys=True)


def decode_job(raw: str) -> dict[str, Any] | None:
    try:
        job = json.loads(raw)
    except json.JSONDecodeError:
        LOGGER.warning("dropping malformed queue entry %r", raw[:200])
        return None
    if not isinstance(job, dict) or not isinstance(job.get("config"), str):
        LOGGER.warning("dropping queue entry without a config path")
        return None
    return job


def enqueue_experiment(config_path: str, *, seed: int | None = None, force: bool = False, output: str | None = None) -> bool:
    client = _redis_client()
    if client is None:
        LOGGER.warning("experiment queue unavailable; enqueue skipped")
        return False
    try:
        client.rpush(_queue_key(), encode_job(config_path, seed=seed, force=force, output=output))
        return True
    except Exception:
        LOGGER.exception("failed to enqueue experiment %s", config_path)
        return False


def pop_experiment(block_seconds: int = 5) -> Optional[dict[str, Any]]:
    client = _redis_client()
    if client is None:
        return None
    try:
        popped = client.blpop(_queue_key(), timeout=max(1, int(block_seconds)))
        if not popped:
            return None
        _, value = popped
        if isinstance(value, bytes):
            value = value.decode("utf-8", errors="ignore")
        return decode_job(str(value))
    except Exception:
        LOGGER.exception("failed to pop experiment")
        return None


def queue_available() -> bool:
    return _redis_client() is not None
