"""Collects one result line per acceptance criterion."""

from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS: dict[int, str] = {}


@contextmanager
def timed():
    box = {"start": time.perf_counter()}
    yield box
    box["elapsed"] = time.perf_counter() - box["start"]


def record(number: int, ok: bool, detail: str, elapsed: float, limit: float | None = None) -> bool:
    within = limit is None or elapsed < limit
    status = "PASS" if ok and within else "FAIL"
    budget = "" if limit is None else f" / limit {limit:g} s"
    RESULTS[number] = f"criterion {number:2d}: {status}  {detail}  [{elapsed:.2f} s{budget}]"
    print(RESULTS[number])
    return ok and within


def summary_lines() -> list[str]:
    return [RESULTS[k] for k in sorted(RESULTS)]
