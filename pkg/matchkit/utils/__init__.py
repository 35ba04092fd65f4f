#!/usr/bin/env python3

import logging
import os
import platform
import random
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Iterator, List, TypeVar

import numpy as np
import torch

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "MATCHKIT_THREADS"

T = TypeVar("T")
R = TypeVar("R")


@lru_cache
def get_device() -> str:
    # training and matching are CPU-only
    return "cpu"


def get_default_dtype() -> torch.dtype:
    return torch.get_default_dtype()


@lru_cache
def get_hardware_description(device_type: str) -> str:
    return f"{platform.platform()}-{device_type}"


def worker_count() -> int:
    value = os.environ.get(THREADS_ENV_VAR)
    if value:
        try:
            count = int(value)
        except ValueError:
            msg = f"{THREADS_ENV_VAR} must be a positive integer, got {value!r}"
            raise ValueError(msg) from None
        if count < 1:
            msg = f"{THREADS_ENV_VAR} must be a positive integer, got {value!r}"
            raise ValueError(msg)
        return count

    import psutil

    return psutil.cpu_count(logical=True) or 1


def configure_threads() -> int:
    import cv2

    count = worker_count()
    torch.set_num_threads(count)
    cv2.setNumThreads(count)
    logger.debug(f"Using {count} worker thread(s)")
    return count


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed for a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


@contextmanager
def precision(dtype: str | torch.dtype = "float64"):
    """Switch the engine-wide default float type for the duration of the block."""
    if isinstance(dtype, str):
        dtype = {"float32": torch.float32, "float64": torch.float64}[dtype]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@contextmanager
def seeded(seed: int | None):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Order-preserving map over a thread pool sized by MATCHKIT_THREADS."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunked(items: List[T], size: int) -> Iterator[List[T]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


@contextmanager
def timed(label: str):
    start = time.perf_counter()
    yield
    end = time.perf_counter()
    logger.info(f"{label} took {end - start:.2f} seconds")
