from dataclasses import dataclass

import numpy as np


@dataclass
class SeedStream:
    """Deterministic source of random generators.

    Each call to next() derives a fresh numpy Generator from (base, counter)
    and advances the counter, so the draws depend only on the stream
    position. Two streams with equal base and counter produce equal draws,
    and a stream can be checkpointed as two integers.

    Attributes:
        base: Root seed
        counter: Number of generators handed out so far
    """
    base: int
    counter: int = 0

    def next(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.base), spawn_key=(int(self.counter),))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(seq))

    def spawn(self, key: int) -> "SeedStream":
        """Independent child stream, e.g. one per worker or per purpose."""
        seq = np.random.SeedSequence(entropy=int(self.base), spawn_key=(2**31 + int(key),))
        return SeedStream(base=int(seq.generate_state(1, dtype=np.uint32)[0]))

    def state(self) -> tuple:
        return (int(self.base), int(self.counter))
