"""Named random streams derived from one master seed.

Every subsystem asks for its own stream (``"data"``, ``"model-init"``,
``"dp"``, ``"sampling"``, ``"som"``, ...) keyed by extra integers such as a
user id or round index. Toggling one subsystem never shifts another's draws,
and nothing needs a cursor saved for resume.
"""

import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed, name, *keys):
    entropy = [int(seed) & 0xFFFFFFFF, stream_key(name)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
