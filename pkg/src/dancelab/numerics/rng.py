"""Seedable counter-based random streams.

Every consumer receives its generator explicitly; nothing in the package
touches numpy's global random state.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox stream for ``seed``; extra ``keys`` derive independent sub-streams."""
    seq = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(seq))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "Philox":
        raise ValueError(f"unsupported bit generator {state.get('bit_generator')!r}")
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)
