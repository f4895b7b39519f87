"""
Reproducible random streams.

Every stream is keyed by (master_seed, block index) through numpy's
SeedSequence, so a block produces the same draws no matter which worker
runs it or in which order blocks finish.
"""

from typing import Iterator, Tuple

import numpy as np

from lab_config import LabConfig


def block_rng(master_seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(block)]))


def replicate_blocks(replicates: int, block_size: int = None) -> Iterator[Tuple[int, int, int]]:
    """Yield (block index, first replicate, block length) covering all replicates."""
    block_size = block_size or LabConfig.REPLICATE_BLOCK
    for block, start in enumerate(range(0, replicates, block_size)):
        yield block, start, min(block_size, replicates - start)
