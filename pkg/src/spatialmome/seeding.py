"""Per-purpose random streams derived from one master seed.

A stream is ``numpy.random.default_rng(SeedSequence([master, tag, *counters]))``
where ``tag`` is the CRC-32 of the purpose name. The derivation is pure, so
two runs with the same master seed see the same numbers in every module.
"""
from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("synth", "init", "mask", "shuffle", "kmeans", "bootstrap", "split", "finetune", "survival")


def purpose_tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_seed(master: int, purpose: str, *counters: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, purpose_tag(purpose), *map(int, counters)])


def rng_for(master: int, purpose: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, purpose, *counters))


def int_seed(master: int, purpose: str, *counters: int) -> int:
    """A 32-bit integer seed, for APIs that want a plain int."""
    return int(derive_seed(master, purpose, *counters).generate_state(1)[0])
