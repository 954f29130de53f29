import zlib

import numpy as np

# Named sub-streams drawn from one root seed per run. The optimizer draws no randomness.
TASK = "task"
PRETRAIN = "pretrain"
SOURCE_STATS = "source-stats"
STREAM = "stream"
DOMAINS = "domains"
PROMPT_INIT = "prompt-init"
ORDERS = "orders"
VERIFY = "verify"


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for `name`; changing one consumer never shifts another."""
    key = [int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) & 0xFFFFFFFF for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
