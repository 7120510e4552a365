"""Split one global seed into independent, named random streams."""

import zlib

import numpy as np


def child_seed(seed: int, consumer: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(consumer.encode("utf-8"))])


def rng_for(seed: int, consumer: str) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, consumer))


def int_seed(seed: int, consumer: str) -> int:
    return int(child_seed(seed, consumer).generate_state(1)[0])
