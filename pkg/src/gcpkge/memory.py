"""Transient-allocation measurement.

Built on :mod:`tracemalloc`, which numpy reports its data buffers to, so the
peak covers every array requested inside the measured block.
"""

from __future__ import annotations

import tracemalloc


class TransientMeter:
    """Context manager recording peak bytes allocated above the entry baseline.

    >>> with TransientMeter() as meter:
    ...     buf = bytearray(1 << 20)
    >>> meter.peak >= 1 << 20
    True
    """

    def __init__(self):
        self.peak = 0
        self._owns_tracing = False
        self._baseline = 0

    def __enter__(self) -> "TransientMeter":
        if not tracemalloc.is_tracing():
            tracemalloc.start()
            self._owns_tracing = True
        tracemalloc.reset_peak()
        self._baseline = tracemalloc.get_traced_memory()[0]
        return self

    def __exit__(self, *exc) -> None:
        _, peak = tracemalloc.get_traced_memory()
        self.peak = max(0, peak - self._baseline)
        if self._owns_tracing:
            tracemalloc.stop()


def measure(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, peak_transient_bytes)``."""
    with TransientMeter() as meter:
        out = fn(*args, **kwargs)
    return out, meter.peak
