"""
Shared utilities for the slice pose registration pipeline.
Used by every pipeline module and by the command line entry point.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, TypeVar

logger = logging.getLogger("svr_pose")

T = TypeVar("T")
R = TypeVar("R")


class PipelineError(Exception):
    def __init__(self, code: str, message: str, detail: Optional[str] = None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.detail = detail

    def __str__(self) -> str:
        if self.detail:
            return f"{self.code}: {self.message} ({self.detail})"
        return f"{self.code}: {self.message}"


def env_str(name: str, default: str = "") -> str:
    return os.getenv(name, default)


def env_int(name: str, default: int) -> int:
    try:
        return int(env_str(name, str(default)))
    except ValueError:
        return default


def env_float(name: str, default: float) -> float:
    try:
        return float(env_str(name, repr(default)))
    except ValueError:
        return default


def default_threads() -> int:
    return max(1, env_int("SVR_POSE_THREADS", 1))


def default_log_level() -> str:
    return env_str("SVR_POSE_LOG_LEVEL", "INFO").upper()


def log_event(event: str, **fields: Any) -> None:
    sanitized: Dict[str, Any] = {}
    for key, value in fields.items():
        if value is None:
            continue
        if any(token in key.lower() for token in ("path", "dir", "file")):
            sanitized[key] = os.path.basename(str(value).rstrip("/")) or str(value)
            continue
        if isinstance(value, float):
            sanitized[key] = f"{value:.6g}"
            continue
        sanitized[key] = value
    payload = " ".join(f"{key}={value}" for key, value in sanitized.items())
    logger.info("event=%s %s", event, payload)


def run_ordered(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """Map fn over items on a thread pool; results keep the input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads, thread_name_prefix="svr-pose") as pool:
        return list(pool.map(fn, items))


def chunked(items: List[T], size: int) -> List[List[T]]:
    if size <= 0:
        raise PipelineError("invalid_config", "Chunk size must be positive", detail=str(size))
    return [items[i:i + size] for i in range(0, len(items), size)]
