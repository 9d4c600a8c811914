"""Hard-sampling baselines: mini-batch biased sampling and OHEM."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .anchors import BACKGROUND, MatchResult

logger = logging.getLogger(__name__)

STRATEGIES = ("none", "biased", "ohem")


@dataclass
class SamplerConfig:
    strategy: str = "none"
    batch_size: int = 256
    fg_fraction: float = 0.5
    k: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.strategy == "biased":
            if self.batch_size < 2:
                raise ValueError("biased sampling needs batch_size >= 2")
            if not 0.0 < self.fg_fraction < 1.0:
                raise ValueError("fg_fraction must lie in (0, 1)")
        if self.strategy == "ohem" and self.k < 1:
            raise ValueError("ohem needs k >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def biased_sample(match: MatchResult, batch_size: int, fg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample up to fg_fraction*batch_size foreground anchors, fill the rest with background.

    Either pool fills the other's deficit.  Returns sorted anchor indices.
    """
    fg = np.flatnonzero(match.labels >= 1)
    bg = np.flatnonzero(match.labels == BACKGROUND)
    if fg.size + bg.size == 0:
        raise ValueError("no non-ignore anchors to sample from")
    if bg.size == 0:
        logger.warning("no background anchors; sampling foreground only")
    n_fg = min(int(fg_fraction * batch_size), fg.size)
    n_bg = min(batch_size - n_fg, bg.size)
    n_fg = min(batch_size - n_bg, fg.size)
    pick_fg = rng.choice(fg, size=n_fg, replace=False) if n_fg else fg[:0]
    pick_bg = rng.choice(bg, size=n_bg, replace=False) if n_bg else bg[:0]
    return np.sort(np.concatenate([pick_fg, pick_bg]))


def ohem_select(per_anchor_losses, k: int) -> np.ndarray:
    """Indices of the k largest losses, lowest index first among ties.

    Returned in descending-loss order.
    """
    losses = np.asarray(per_anchor_losses, dtype=np.float64)
    if k > losses.size:
        logger.warning("ohem k=%d exceeds %d candidates; keeping all", k, losses.size)
        k = losses.size
    order = np.argsort(-losses, kind="stable")
    return order[:k]
