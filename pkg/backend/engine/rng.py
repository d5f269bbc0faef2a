"""Counter-based Gaussian increments.

Every increment is a pure function of ``(root_seed, block_id, step)``: paths are
grouped into fixed-size blocks keyed by ``[root_seed, block_id]`` and the
Philox counter carries the time step. Regenerating any step for any path range
therefore reproduces the same numbers regardless of chunking or scheduling.
"""

from __future__ import annotations

import logging
import zlib

import numpy as np

LOGGER = logging.getLogger(__name__)

_UINT64_MASK = (1 << 64) - 1


def derive_seed(root_seed: int, label: str) -> int:
    """Fresh, reproducible seed for a named sub-experiment (pilot, confirmation, ...)."""
    sequence = np.random.SeedSequence([int(root_seed) & _UINT64_MASK, zlib.crc32(label.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def _block_normals(root_seed: int, block_id: int, step: int, block: int, width: int) -> np.ndarray:
    key = np.array([int(root_seed) & _UINT64_MASK, int(block_id) & _UINT64_MASK], dtype=np.uint64)
    counter = np.array([0, int(step) & _UINT64_MASK, 0, 0], dtype=np.uint64)
    generator = np.random.Generator(np.random.Philox(key=key, counter=counter))
    return generator.standard_normal((block, width))


class IncrementStream:
    def __init__(
        self,
        root_seed: int,
        n_paths: int,
        d1: int,
        h: float,
        *,
        path_offset: int = 0,
        block: int = 4096,
    ) -> None:
        if n_paths < 1:
            raise ValueError("n_paths must be positive")
        if h <= 0:
            raise ValueError("time step must be positive")
        self.root_seed = int(root_seed)
        self.n_paths = int(n_paths)
        self.d1 = int(d1)
        self.h = float(h)
        self.path_offset = int(path_offset)
        self.block = int(block)
        self._sqrt_h = float(np.sqrt(self.h))

    def normals(self, step: int) -> np.ndarray:
        first = self.path_offset
        last = self.path_offset + self.n_paths
        pieces = []
        for block_id in range(first // self.block, (last - 1) // self.block + 1):
            start = block_id * self.block
            values = _block_normals(self.root_seed, block_id, step, self.block, self.d1)
            lo = max(first, start) - start
            hi = min(last, start + self.block) - start
            pieces.append(values[lo:hi])
        return pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=0)

    def increments(self, step: int) -> np.ndarray:
        return self.normals(step) * self._sqrt_h

    def coarsen(self, factor: int) -> "CoarsenedStream":
        return CoarsenedStream(self, factor)

    def subset(self, path_offset: int, n_paths: int) -> "IncrementStream":
        return IncrementStream(
            self.root_seed,
            n_paths,
            self.d1,
            self.h,
            path_offset=path_offset,
            block=self.block,
        )


class CoarsenedStream:
    """Increments on a grid ``factor`` times coarser, built by summing fine increments."""

    def __init__(self, fine: IncrementStream, factor: int) -> None:
        if factor < 1:
            raise ValueError("coarsening factor must be >= 1")
        self.fine = fine
        self.factor = int(factor)
        self.n_paths = fine.n_paths
        self.d1 = fine.d1
        self.h = fine.h * self.factor
        self.root_seed = fine.root_seed
        self.path_offset = fine.path_offset
        self.block = fine.block

    def increments(self, step: int) -> np.ndarray:
        total = self.fine.increments(step * self.factor)
        for offset in range(1, self.factor):
            total = total + self.fine.increments(step * self.factor + offset)
        return total
