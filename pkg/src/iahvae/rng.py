"""Counter-based random streams with Box-Muller normals.

Streams are keyed by ``(seed, stream)`` on numpy's Philox bit generator, so
image ``i`` of a dataset or inference batch always sees the same variates no
matter how the work is chunked.
"""
from __future__ import annotations

import json
from typing import Iterable

import numpy as np

GENERATORS = ("philox",)


class Rng:
    def __init__(self, seed: int, stream: int = 0, generator: str = "philox"):
        if generator not in GENERATORS:
            raise ValueError(f"unknown generator {generator!r}; choose from {GENERATORS}")
        self.seed = int(seed)
        self.stream = int(stream)
        self.generator = generator
        self._bits = np.random.Philox(key=[self.seed & 0xFFFFFFFFFFFFFFFF, self.stream])

    def uniform(self, shape) -> np.ndarray:
        """Uniform variates on [0, 1)."""
        raw = self._bits.random_raw(int(np.prod(shape, dtype=np.int64)))
        return ((raw >> np.uint64(11)) * 2.0**-53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((2, pairs))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def get_state(self) -> str:
        st = self._bits.state
        return json.dumps(
            {
                "generator": self.generator,
                "seed": self.seed,
                "stream": self.stream,
                "counter": [int(c) for c in st["state"]["counter"]],
                "buffer_pos": int(st["buffer_pos"]),
                "buffer": [int(b) for b in st["buffer"]],
                "has_uint32": int(st["has_uint32"]),
                "uinteger": int(st["uinteger"]),
            },
            sort_keys=True,
        )

    @classmethod
    def from_state(cls, text: str) -> "Rng":
        d = json.loads(text)
        rng = cls(d["seed"], d["stream"], d["generator"])
        st = rng._bits.state
        st["state"]["counter"] = np.array(d["counter"], dtype=np.uint64)
        st["buffer"] = np.array(d["buffer"], dtype=np.uint64)
        st["buffer_pos"] = d["buffer_pos"]
        st["has_uint32"] = d["has_uint32"]
        st["uinteger"] = d["uinteger"]
        rng._bits.state = st
        return rng


class RngStreams:
    """One independent :class:`Rng` per row of a batch.

    ``normal(shape)`` draws row ``i`` of the leading axis from stream ``i``.
    """

    def __init__(self, seed: int, streams: Iterable[int]):
        self.rngs = [Rng(seed, s) for s in streams]

    def __len__(self) -> int:
        return len(self.rngs)

    def normal(self, shape) -> np.ndarray:
        if shape[0] != len(self.rngs):
            raise ValueError(f"batch {shape[0]} does not match {len(self.rngs)} streams")
        return np.stack([r.normal(tuple(shape[1:])) for r in self.rngs])

    def uniform(self, shape) -> np.ndarray:
        return np.stack([r.uniform(tuple(shape[1:])) for r in self.rngs])
