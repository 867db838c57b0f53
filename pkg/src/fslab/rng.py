"""Per-subsystem random streams derived from one experiment seed."""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed, *keys):
    """Independent counter-based generator for ``(seed, *keys)``.

    Changing one subsystem's draws never shifts another's, e.g.
    ``stream(0, "augment")`` and ``stream(0, "init", "head")``.
    """
    ss = np.random.SeedSequence([int(seed)] + [_key(k) for k in keys])
    return np.random.Generator(np.random.Philox(ss))
