"""Counter-based random streams.

Every random draw in the simulator comes from a stream keyed by the experiment
seed, a purpose tag and a tuple of counters (client, round, step, ...). Streams
never share state, so a client's k-th batch of round t is the same whether
clients run serially, on eight threads, or the run is restarted at round t.
"""

from enum import IntEnum

import numpy as np

MASK_64: int = (1 << 64) - 1


class Stream(IntEnum):
    DATA = 1
    SPLIT = 2
    PARTITION = 3
    CLIENT = 4
    TOPOLOGY = 5
    INIT = 6
    SAMPLING = 7
    PROBE = 8
    POWER_ITERATION = 9
    VARIANCE = 10


def stream(seed: int, purpose: Stream, *counters: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed & MASK_64, spawn_key=(int(purpose), *counters))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, purpose: Stream, *counters: int) -> int:
    """A 64-bit child seed, used where a stream has to be stored as a plain
    integer (a client shard keeps one so it can be dumped and compared)
    """
    sequence = np.random.SeedSequence(seed & MASK_64, spawn_key=(int(purpose), *counters))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])
