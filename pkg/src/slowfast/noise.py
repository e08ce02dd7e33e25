"""Reproducible Brownian increment streams for parallel Monte Carlo.

Every (seed, path_index, purpose_tag) triple names one independent substream,
realized as a Philox counter-based generator keyed through
``np.random.SeedSequence(entropy=seed, spawn_key=(path_index, purpose_tag))``.
Streams are consumed in step order, so the k-th standard-normal block of a
substream is a pure function of (seed, path_index, purpose_tag, k) -- the
same increments come out no matter how paths are batched, scheduled or
threaded.

Purpose tags name independent Brownian driver roles:

    0  fast-equation driver (W1)
    1  slow-equation driver (W2), shared by coupled averaged trajectories
    2  extra driver of the limiting deviation process (independent of W2)
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PURPOSE_W1 = 0
PURPOSE_W2 = 1
PURPOSE_WTILDE = 2


@dataclass(frozen=True)
class NoiseStream:
    """Address of one deterministic Gaussian substream."""

    seed: int
    path_index: int = 0
    purpose_tag: int = 0

    def with_path(self, path_index: int) -> "NoiseStream":
        return replace(self, path_index=int(path_index))

    def with_tag(self, purpose_tag: int) -> "NoiseStream":
        return replace(self, purpose_tag=int(purpose_tag))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this substream."""
        ss = np.random.SeedSequence(
            entropy=int(self.seed),
            spawn_key=(int(self.path_index), int(self.purpose_tag)),
        )
        return np.random.Generator(np.random.Philox(ss))

    def normals(self, n_steps: int, m: int = 1) -> np.ndarray:
        """First ``n_steps`` standard-normal rows of the substream, shape (n_steps, m)."""
        return self.generator().standard_normal((n_steps, m))

    def increments(self, n_steps: int, m: int, dt: float) -> np.ndarray:
        """Brownian increments ~ N(0, dt) per coordinate, shape (n_steps, m)."""
        return self.normals(n_steps, m) * np.sqrt(dt)


def derive_seed(seed: int, *subkeys: int) -> int:
    """Stable independent child seed for a named sub-experiment.

    Different subkey tuples give statistically independent stream families;
    the mapping is fixed across runs and platforms.
    """
    ss = np.random.SeedSequence(entropy=[int(seed)] + [int(k) for k in subkeys])
    lo, hi = ss.generate_state(2, np.uint64)
    return int(lo) | (int(hi) << 64)


class SubstreamBlocks:
    """Sequential block reader over a contiguous range of path substreams.

    Holds one generator per path so repeated ``read`` calls walk each
    substream in step order.  ``read`` returns shape (n_paths, n_steps, m).
    """

    def __init__(self, seed: int, purpose_tag: int, path_start: int, n_paths: int):
        self.seed = int(seed)
        self.purpose_tag = int(purpose_tag)
        self.path_start = int(path_start)
        self.n_paths = int(n_paths)
        base = NoiseStream(seed=self.seed, purpose_tag=self.purpose_tag)
        self._gens = [
            base.with_path(self.path_start + i).generator()
            for i in range(self.n_paths)
        ]

    def read(self, n_steps: int, m: int, out: np.ndarray | None = None) -> np.ndarray:
        if out is None:
            out = np.empty((self.n_paths, n_steps, m))
        flat = out.reshape(self.n_paths, n_steps * m)
        for i, g in enumerate(self._gens):
            g.standard_normal(n_steps * m, out=flat[i])
        return out
