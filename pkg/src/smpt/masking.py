"""Mask sampling over interleaved sensorimotor token sequences.

A sequence of T timesteps carries 5 tokens per step, in fixed order:
three view latents, then proprioception, then action. Strategies:

    token     each token masked i.i.d. with probability rho
    timestep  each timestep masked with probability rho, all 5 tokens
    modality  each of the 5 streams masked with probability rho, at all
              timesteps
    causal    a token draw relocated to the sequence suffix, so every
              observed token precedes every masked one

Degenerate draws (nothing masked, or everything masked) are resampled;
if the ratio forces degeneracy, one index is flipped so the mask stays
usable for a loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import MaskingError

MODALITIES = ("view1", "view2", "view3", "proprio", "action")
TOKENS_PER_STEP = len(MODALITIES)
STRATEGIES = ("token", "timestep", "modality", "causal")

_MAX_RESAMPLE = 100


@dataclass(frozen=True)
class TokenLayout:
    """Token bookkeeping for a context of `timesteps` steps."""

    timesteps: int

    def __post_init__(self):
        if self.timesteps < 1:
            raise MaskingError("layout needs at least one timestep")

    @property
    def length(self) -> int:
        return TOKENS_PER_STEP * self.timesteps

    def modality_of(self, index: int) -> str:
        return MODALITIES[index % TOKENS_PER_STEP]

    def timestep_of(self, index: int) -> int:
        return index // TOKENS_PER_STEP

    def token_index(self, timestep: int, modality: str) -> int:
        return timestep * TOKENS_PER_STEP + MODALITIES.index(modality)

    def action_token(self, timestep: int) -> int:
        return self.token_index(timestep, "action")


@dataclass
class MaskSpec:
    """One realized mask: strategy, ratio range, drawn ratio, index set."""

    strategy: str
    ratio_range: Tuple[float, float]
    ratio: float
    masked: np.ndarray  # sorted unique token indices

    def __post_init__(self):
        self.masked = np.unique(np.asarray(self.masked, dtype=np.int64))

    def mask_bool(self, length: int) -> np.ndarray:
        out = np.zeros(length, dtype=bool)
        out[self.masked] = True
        return out

    @property
    def count(self) -> int:
        return int(self.masked.size)


def sample_ratio(ratio_range: Tuple[float, float], rng: np.random.Generator) -> float:
    lo, hi = ratio_range
    if not (0.0 <= lo <= hi <= 1.0):
        raise MaskingError(f"bad ratio range [{lo}, {hi}]")
    return float(rng.uniform(lo, hi))


def _fix_degenerate(flags: np.ndarray, rng: np.random.Generator) -> None:
    # flip one entry so the mask is neither empty nor everything
    if not flags.any():
        flags[rng.integers(0, flags.size)] = True
    elif flags.all():
        flags[rng.integers(0, flags.size)] = False


def sample_mask(layout: TokenLayout, strategy: str, ratio: float,
                rng: np.random.Generator) -> MaskSpec:
    """Draw a mask at the given realized ratio.

    Resamples degenerate draws; a forced ratio of exactly 0 or 1 falls
    back to flipping a single random index after the resample budget.
    """
    if strategy not in STRATEGIES:
        raise MaskingError(f"unknown masking strategy '{strategy}'")
    if strategy == "causal":
        return causalize(sample_mask(layout, "token", ratio, rng), layout)

    L = layout.length
    T = layout.timesteps
    if strategy == "timestep" and T < 2:
        raise MaskingError("timestep masking needs at least 2 timesteps "
                           "(a single step is all-or-nothing)")

    for attempt in range(_MAX_RESAMPLE + 1):
        if strategy == "token":
            flags = rng.random(L) < ratio
        elif strategy == "timestep":
            step_flags = rng.random(T) < ratio
            flags = np.repeat(step_flags, TOKENS_PER_STEP)
        else:  # modality
            stream_flags = rng.random(TOKENS_PER_STEP) < ratio
            flags = np.tile(stream_flags, T)
        if flags.any() and not flags.all():
            break
        if attempt == _MAX_RESAMPLE:
            if strategy == "token":
                _fix_degenerate(flags, rng)
            elif strategy == "timestep":
                step_flags = flags[::TOKENS_PER_STEP].copy()
                _fix_degenerate(step_flags, rng)
                flags = np.repeat(step_flags, TOKENS_PER_STEP)
            else:
                stream_flags = flags[:TOKENS_PER_STEP].copy()
                _fix_degenerate(stream_flags, rng)
                flags = np.tile(stream_flags, T)

    return MaskSpec(strategy=strategy, ratio_range=(ratio, ratio), ratio=ratio,
                    masked=np.flatnonzero(flags))


def sample_mask_from_range(layout: TokenLayout, strategy: str,
                           ratio_range: Tuple[float, float],
                           rng: np.random.Generator) -> MaskSpec:
    """Draw the ratio from its range, then the mask at that ratio."""
    rho = sample_ratio(ratio_range, rng)
    spec = sample_mask(layout, strategy, rho, rng)
    spec.ratio_range = tuple(ratio_range)
    return spec


def causalize(mask: MaskSpec, layout: TokenLayout) -> MaskSpec:
    """Relocate a mask to the sequence suffix, keeping its cardinality.

    After this, every observed token index is strictly smaller than every
    masked one, which turns the prediction problem into a causal one while
    attention stays bidirectional. Idempotent.
    """
    m = mask.count
    L = layout.length
    return MaskSpec(strategy="causal", ratio_range=mask.ratio_range,
                    ratio=mask.ratio, masked=np.arange(L - m, L, dtype=np.int64))
