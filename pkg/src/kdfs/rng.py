"""Seeded random-stream derivation and state (de)serialization.

Every source of randomness in a run is an independent PCG64 stream derived
from (run seed, purpose id[, index]). Streams can be captured into a
JSON-able dict and restored exactly, which is what makes checkpoint resume
reproduce an uninterrupted run.
"""

from __future__ import annotations

import numpy as np

# purpose ids; keep stable across versions, checkpoints store raw states only
INIT = 1  # parameter initialization
DATA = 2  # batch shuffling (further keyed by epoch)
SYNTH = 3  # synthetic dataset generation
GUMBEL = 1000  # + prunable-layer index


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *key))))


def capture(gen: np.random.Generator) -> dict:
    state = gen.bit_generator.state
    return {
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def restore(captured: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(captured["state"]), "inc": int(captured["inc"])},
        "has_uint32": captured["has_uint32"],
        "uinteger": captured["uinteger"],
    }
    return gen
