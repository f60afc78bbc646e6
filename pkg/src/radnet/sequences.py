"""Fixed-length windows of consecutive slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError


@dataclass(frozen=True)
class SliceSequence:
    """``indices`` has exactly seq_len entries; padded positions repeat the last real slice."""

    start: int
    indices: tuple[int, ...]
    pad_mask: np.ndarray

    @property
    def n_real(self) -> int:
        return int(self.pad_mask.sum())


def batch_sequences(n_slices: int, seq_len: int, stride: int | None = None) -> list[SliceSequence]:
    """Cover ``n_slices`` slices with windows of ``seq_len`` starting every ``stride`` slices.

    Windows stop once the last slice is covered; a final short window is
    padded by repeating its last real slice.
    """
    stride = seq_len if stride is None else stride
    if seq_len < 1:
        raise UsageError(f"seq_len must be >= 1, got {seq_len}")
    if not 1 <= stride <= seq_len:
        raise UsageError(f"stride must lie in [1, seq_len], got {stride}")
    if n_slices < 1:
        raise DataError("cannot window an empty volume")
    windows = []
    start = 0
    while True:
        stop = min(start + seq_len, n_slices)
        real = list(range(start, stop))
        pads = seq_len - len(real)
        mask = np.array([1] * len(real) + [0] * pads, dtype=np.int64)
        windows.append(SliceSequence(start, tuple(real + [real[-1]] * pads), mask))
        if stop >= n_slices:
            break
        start += stride
    return windows
