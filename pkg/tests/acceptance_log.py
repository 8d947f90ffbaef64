"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import contextlib
import time

LINES = []


@contextlib.contextmanager
def criterion(number, title):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        detail = (str(exc).splitlines() or [""])[0][:160]
        LINES.append(f"FAIL  criterion {number}: {title} ({time.perf_counter() - t0:.1f}s) -- {detail}")
        print(LINES[-1])
        raise
    LINES.append(f"PASS  criterion {number}: {title} ({time.perf_counter() - t0:.1f}s)")
    print(LINES[-1])
