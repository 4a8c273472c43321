"""Live-byte accounting for tensors, with a high-water mark and an optional budget.

Every Tensor created while a tracker is active registers its buffer; the bytes
are released when the Tensor is garbage collected. Views share the bytes of the
array that owns the memory, so a reshape does not double count.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor as _t


class BudgetExceeded(MemoryError):
    def __init__(self, stage: str, needed: int, budget: int):
        self.stage = stage
        self.needed = needed
        self.budget = budget
        super().__init__(
            f"memory budget exceeded in stage '{stage}': {needed} bytes live > budget {budget} bytes; "
            "try a smaller patch or fewer chunk_rows"
        )


class MemoryTracker:
    def __init__(self, budget_bytes: int | None = None):
        self.budget_bytes = budget_bytes
        self.live_bytes = 0
        self.peak_bytes = 0
        self.stage = "setup"
        self.stage_peaks: dict[str, int] = {}
        self._owners: dict[int, list] = {}

    def _bump(self, nbytes: int):
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        if self.live_bytes > self.stage_peaks.get(self.stage, 0):
            self.stage_peaks[self.stage] = self.live_bytes
        if self.budget_bytes is not None and self.live_bytes > self.budget_bytes:
            raise BudgetExceeded(self.stage, self.live_bytes, self.budget_bytes)

    def alloc(self, arr: np.ndarray):
        root = _t._root(arr)
        key = id(root)
        entry = self._owners.get(key)
        if entry is None:
            # keep the root alive while counted so its id cannot be reused
            self._owners[key] = [1, root.nbytes, root]
            self._bump(root.nbytes)
        else:
            entry[0] += 1

    def free(self, arr: np.ndarray):
        key = id(_t._root(arr))
        entry = self._owners.get(key)
        if entry is None:
            return
        entry[0] -= 1
        if entry[0] == 0:
            del self._owners[key]
            self.live_bytes -= entry[1]

    def hold(self, nbytes: int):
        """Account bytes that live outside any Tensor (e.g. parameters loaded earlier)."""
        self._bump(int(nbytes))

    def release(self, nbytes: int):
        self.live_bytes -= int(nbytes)

    @contextmanager
    def in_stage(self, name: str):
        prev = self.stage
        self.stage = name
        try:
            yield self
        finally:
            self.stage = prev

    def __enter__(self):
        self._prev = _t._state.tracker
        _t._state.tracker = self
        return self

    def __exit__(self, *exc):
        _t._state.tracker = self._prev


def current_tracker() -> MemoryTracker | None:
    return _t._state.tracker
