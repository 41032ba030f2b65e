"""Counter-based seed derivation so parallel work stays schedule-independent."""

import numpy as np

# Stream tags keep derived seeds for different purposes disjoint.
SCENE = 1
STYLE = 2
WEATHER = 3
BATCH = 4
VIEWS = 5
INIT = 6

_SPLIT_TAGS = {"source_train": 11, "target_train": 12, "source_test": 13, "target_test": 14}


def derive_seed(master_seed: int, *tags: int) -> int:
    """Derive a 64-bit child seed from a master seed and integer tags.

    Same (master_seed, tags) always gives the same child, and distinct tag
    tuples give statistically independent streams.
    """
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, *[int(t) for t in tags]])
    words = ss.generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def split_tag(split: str) -> int:
    return _SPLIT_TAGS[split]


def rng_from(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
