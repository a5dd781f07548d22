"""Deterministic RNG stream derivation.

Every random draw in the library comes from a stream derived from
(master_seed, agent, purpose) via numpy's SeedSequence, which guarantees
identical streams across platforms and python versions.
"""

import numpy as np

# Purpose tags are mapped to fixed integers so the spawn key is stable.
_PURPOSES = {
    "sample": 0,
    "scenario": 1,
    "init": 2,
    "eval": 3,
    "probe": 4,
}


def derive_stream(master_seed: int, agent: int, purpose: str) -> np.random.Generator:
    """Return a reproducible, statistically independent substream.

    Same (master_seed, agent, purpose) always yields the same stream;
    different agents or purposes yield independent streams.
    """
    if purpose not in _PURPOSES:
        raise ValueError(f"unknown rng purpose {purpose!r}; known: {sorted(_PURPOSES)}")
    if agent < 0:
        raise ValueError("agent index must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1),
                                spawn_key=(int(agent), _PURPOSES[purpose]))
    return np.random.default_rng(ss)
