"""Named random substreams derived from one master seed.

Every stochastic component (stage training, per-scan generation, augmentation)
pulls its own generator keyed by a name path, so runs are reproducible without
any global RNG state and scans can be processed in any order or in parallel.
"""

from __future__ import annotations

import zlib

import numpy as np


def _spawn_key(names: tuple) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(n).encode("utf8")) for n in names)


def seed_sequence(master_seed: int, *names) -> np.random.SeedSequence:
    """SeedSequence for the substream identified by ``names``."""
    if master_seed < 0:
        raise ValueError(f"master seed must be nonnegative, got {master_seed}")
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=_spawn_key(names))


def substream(master_seed: int, *names) -> np.random.Generator:
    """Independent numpy Generator for the named substream."""
    return np.random.default_rng(seed_sequence(master_seed, *names))


def stream_seed(master_seed: int, *names) -> int:
    """32-bit integer seed for libraries that take a plain seed (e.g. torch)."""
    return int(seed_sequence(master_seed, *names).generate_state(1)[0])
