"""Classification and regression losses, closed-form initial values, optimal bias,
guided loss scaling and GHM-C.

Classification treats every (anchor, class) pair as an independent sigmoid
unit; anchors labelled -1 (ignore) never enter a classification sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import LOG_EPS, DivergenceError, Value

logger = logging.getLogger(__name__)

# any total loss above this counts as divergence
DIVERGENCE_LOSS = 1e4

CLS_VARIANTS = ("ce", "focal", "ghmc")


class EmptyForegroundError(ValueError):
    """A loss normalised by N_f was asked to run on a batch without foreground."""


@dataclass
class LossConfig:
    cls_variant: str = "ce"
    alpha: float = 0.25
    gamma: float = 2.0
    ghm_bins: int = 30
    ghm_momentum: float = 0.75
    # "units" divides the GHM-C sum by the unit count, "foreground" by N_f
    ghm_normalizer: str = "units"
    fixed_w: Optional[float] = None
    guided: bool = False
    stage_factor: float = 1.0
    init_pi: Optional[float] = None
    optimal_bias: bool = False
    smooth_l1_beta: float = 1.0 / 9.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.cls_variant not in CLS_VARIANTS:
            raise ValueError(f"cls_variant must be one of {CLS_VARIANTS}, got {self.cls_variant!r}")
        if self.guided and self.fixed_w is not None:
            raise ValueError("guided and fixed_w are mutually exclusive")
        if self.optimal_bias and self.init_pi is not None:
            raise ValueError("optimal_bias and init_pi are mutually exclusive")
        if self.fixed_w is not None and self.fixed_w <= 0:
            raise ValueError("fixed_w must be positive")
        if self.stage_factor <= 0:
            raise ValueError("stage_factor must be positive")
        if self.init_pi is not None and not 0.0 < self.init_pi < 1.0:
            raise ValueError("init_pi must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0 or self.gamma < 0:
            raise ValueError("focal needs alpha in (0,1) and gamma >= 0")
        if self.ghm_bins < 1 or not 0.0 <= self.ghm_momentum < 1.0:
            raise ValueError("GHM-C needs bins >= 1 and momentum in [0, 1)")
        if self.ghm_normalizer not in ("units", "foreground"):
            raise ValueError("ghm_normalizer must be 'units' or 'foreground'")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ClsBatch:
    """Post-sigmoid scores ``p`` [N, C] with anchor labels ``y`` [N]."""

    def __init__(self, p: Value, labels: np.ndarray):
        p = T.as_value(p)
        labels = np.asarray(labels, dtype=np.int64)
        if p.data.ndim != 2 or p.shape[0] != labels.shape[0]:
            raise T.ShapeError(f"ClsBatch: scores {p.shape} vs labels {labels.shape}")
        if labels.size and labels.max() > p.shape[1]:
            raise ValueError("label exceeds class count")
        self.p = p
        self.labels = labels

    @property
    def num_classes(self) -> int:
        return self.p.shape[1]

    @property
    def N_f(self) -> int:
        return int(np.count_nonzero(self.labels >= 1))

    def valid_rows(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def targets(self, rows: Optional[np.ndarray] = None) -> np.ndarray:
        y = self.labels if rows is None else self.labels[rows]
        return (y[:, None] == np.arange(1, self.num_classes + 1)[None, :]).astype(np.float64)

    def valid(self) -> Tuple[Value, np.ndarray]:
        rows = self.valid_rows()
        p = self.p if rows.size == self.labels.size else T.take(self.p, rows, axis=0)
        return p, self.targets(rows)

    def subset(self, rows: np.ndarray) -> "ClsBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return ClsBatch(T.take(self.p, rows, axis=0), self.labels[rows])


def _normalizer(batch: ClsBatch, normalizer: Optional[float]) -> float:
    if normalizer is not None:
        return float(normalizer)
    if batch.N_f == 0:
        raise EmptyForegroundError("batch has no foreground anchors")
    return float(batch.N_f)


def _unit_ce(p: Value, t: np.ndarray) -> Value:
    """Per-unit binary cross-entropy with guarded logs."""
    return -(t * T.log(p, LOG_EPS) + (1.0 - t) * T.log(1.0 - p, LOG_EPS))


def ce_loss(batch: ClsBatch, normalizer: Optional[float] = None) -> Value:
    """Sigmoid cross-entropy summed over non-ignore units, divided by N_f."""
    p, t = batch.valid()
    return T.vsum(_unit_ce(p, t)) * (1.0 / _normalizer(batch, normalizer))


def focal_loss(batch: ClsBatch, alpha: float = 0.25, gamma: float = 2.0, normalizer: Optional[float] = None) -> Value:
    p, t = batch.valid()
    pos = t * alpha * T.power(1.0 - p, gamma) * T.log(p, LOG_EPS)
    neg = (1.0 - t) * (1.0 - alpha) * T.power(p, gamma) * T.log(1.0 - p, LOG_EPS)
    return -T.vsum(pos + neg) * (1.0 / _normalizer(batch, normalizer))


def per_anchor_ce(batch: ClsBatch) -> np.ndarray:
    """Detached per-anchor CE summed over classes (used for hard mining)."""
    p = np.clip(batch.p.data, LOG_EPS, None)
    q = np.clip(1.0 - batch.p.data, LOG_EPS, None)
    t = batch.targets()
    return -(t * np.log(p) + (1.0 - t) * np.log(q)).sum(axis=1)


def initial_loss_analytic(
    variant: str,
    pi: float,
    ratio: float,
    C: int,
    alpha: float = 0.25,
    gamma: float = 2.0,
    w: float = 1.0,
) -> float:
    """Classification loss when every score equals ``pi``.

    ``ratio`` is N / N_f.  "focal" and "ce" are supported; the CE value is
    multiplied by ``w``.
    """
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must lie in (0, 1)")
    if ratio < 1 or C < 1:
        raise ValueError("need ratio >= 1 and C >= 1")
    neg_units = ratio * C - 1.0
    if variant == "focal":
        return -alpha * (1.0 - pi) ** gamma * math.log(pi) - (1.0 - alpha) * pi**gamma * neg_units * math.log1p(-pi)
    if variant == "ce":
        return -w * math.log(pi) - w * neg_units * math.log1p(-pi)
    raise ValueError(f"no closed form for variant {variant!r}")


def optimal_bias(N: float, N_f: float, C: int) -> Tuple[float, float]:
    """Prior pi = N_f / (N C) minimising the initial CE and its sigmoid bias."""
    if N_f <= 0:
        raise ValueError("N_f must be positive")
    if not N_f < N * C:
        raise ValueError("need N_f < N * C")
    pi = N_f / (N * C)
    b = -math.log(N * C / N_f - 1.0)
    return pi, b


def prior_bias(pi: float) -> float:
    """Sigmoid bias giving initial score ``pi``."""
    if not 0.0 < pi < 1.0:
        raise ValueError("pi must lie in (0, 1)")
    return -math.log((1.0 - pi) / pi)


def smooth_l1_reg_loss(pred: Value, target: np.ndarray, beta: float = 1.0 / 9.0) -> Value:
    """Mean over rows of the 4-coordinate smooth-L1 sum."""
    pred = T.as_value(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise T.ShapeError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    if n == 0:
        raise EmptyForegroundError("no foreground anchors for regression")
    d = pred - target
    small = (np.abs(d.data) < beta).astype(np.float64)
    quad = T.power(d, 2.0) * (0.5 / beta)
    lin = T.vabs(d) - 0.5 * beta
    return T.vsum(small * quad + (1.0 - small) * lin) * (1.0 / n)


def guided_weight(L_cls: Value, L_reg: Value, stage_factor: float = 1.0) -> float:
    cls = float(L_cls.data)
    reg = float(L_reg.data)
    if not (np.isfinite(cls) and np.isfinite(reg)) or cls <= 0.0:
        raise DivergenceError(f"guided scaling needs a finite positive L_cls, got {cls}")
    return stage_factor * reg / cls


def guided_scale(L_cls: Value, L_reg: Value, stage_factor: float = 1.0) -> Value:
    """w * L_cls with w = stage_factor * L_reg / L_cls frozen out of the graph."""
    w = T.stop_gradient(Value(guided_weight(L_cls, L_reg, stage_factor)))
    return w * L_cls


class GHMC:
    """Gradient-harmonized sigmoid CE.

    Units are binned by gradient norm ``|p - t|`` into ``bins`` equal slices of
    [0, 1]; a unit's weight is ``N_units / (count_in_bin * n_nonempty_bins)``
    so the weights always sum to ``N_units`` without momentum.  With
    momentum the per-bin counts are an EMA seeded by the first batch.
    """

    def __init__(self, bins: int = 30, momentum: float = 0.75, normalizer: str = "units"):
        if bins < 1:
            raise ValueError("bins must be >= 1")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.bins = bins
        self.momentum = momentum
        self.normalizer = normalizer
        self.edges = np.arange(bins + 1, dtype=np.float64) / bins
        self.edges[-1] += 1e-6
        self.running: Optional[np.ndarray] = None

    def weights(self, g: np.ndarray) -> np.ndarray:
        idx = np.clip(np.searchsorted(self.edges, g, side="right") - 1, 0, self.bins - 1)
        counts = np.bincount(idx.ravel(), minlength=self.bins).astype(np.float64)
        if self.momentum > 0:
            if self.running is None:
                self.running = counts.copy()
            else:
                self.running = self.momentum * self.running + (1.0 - self.momentum) * counts
            density = self.running
        else:
            density = counts
        nonempty = int(np.count_nonzero(counts))
        n_units = g.size
        beta = np.zeros_like(g)
        occupied = counts[idx] > 0
        beta[occupied] = n_units / (density[idx[occupied]] * nonempty)
        return beta

    def __call__(self, batch: ClsBatch) -> Value:
        p, t = batch.valid()
        if p.data.size == 0:
            raise EmptyForegroundError("no units for GHM-C")
        g = np.abs(p.data - t)
        beta = self.weights(g)
        total = T.vsum(beta * _unit_ce(p, t))
        if self.normalizer == "foreground":
            return total * (1.0 / _normalizer(batch, None))
        return total * (1.0 / g.size)


def ghmc_loss(batch: ClsBatch, bins: int = 30, momentum: float = 0.0, state: Optional[GHMC] = None) -> Value:
    """Functional wrapper; pass ``state`` to carry the running density across batches."""
    if state is None:
        state = GHMC(bins, momentum)
    return state(batch)


def classification_loss(batch: ClsBatch, config: LossConfig, ghm: Optional[GHMC] = None, normalizer=None) -> Value:
    if config.cls_variant == "ce":
        return ce_loss(batch, normalizer)
    if config.cls_variant == "focal":
        return focal_loss(batch, config.alpha, config.gamma, normalizer)
    if ghm is None:
        ghm = GHMC(config.ghm_bins, config.ghm_momentum, config.ghm_normalizer)
    return ghm(batch)


def total_loss(L_cls: Value, L_reg: Value, config: LossConfig) -> Value:
    """L_reg + w L_cls with w fixed, guided, or 1."""
    if config.guided:
        out = L_reg + guided_scale(L_cls, L_reg, config.stage_factor)
    else:
        w = 1.0 if config.fixed_w is None else config.fixed_w
        out = L_reg + w * L_cls
    check_divergence(out)
    return out


def check_divergence(loss: Value, t: Optional[int] = None) -> None:
    v = float(loss.data)
    if not np.isfinite(v) or v > DIVERGENCE_LOSS:
        raise DivergenceError(f"loss {v:.6g} is non-finite or above {DIVERGENCE_LOSS:g}", t=t)
