"""Plain-SGD training loop with per-iteration loss logging and divergence capture."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .anchors import AnchorConfig, AnchorSet, ImbalanceStats, MatchResult, build_anchors, imbalance_stats, match
from .detector import DetectorConfig, check_alignment, final_cls_bias, forward, init_detector
from .losses import (
    GHMC,
    ClsBatch,
    LossConfig,
    check_divergence,
    classification_loss,
    guided_weight,
    initial_loss_analytic,
    per_anchor_ce,
    smooth_l1_reg_loss,
    total_loss,
)
from .samplers import SamplerConfig, biased_sample, ohem_select
from .scenes import Scene
from .tensor import DivergenceError, ParamStore

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ("t", "skipped", "L_cls_raw", "L_cls_weighted", "L_reg", "w", "lr")
BALANCE_WINDOW = 50
BALANCE_BAND = (0.2, 5.0)


@dataclass
class Schedule:
    iterations: int = 7500
    learning_rate: float = 0.1
    batch_scenes: int = 4

    def __post_init__(self):
        if self.iterations < 0 or self.learning_rate <= 0 or self.batch_scenes < 1:
            raise ValueError("bad schedule")


@dataclass
class IterationLog:
    t: int
    skipped: bool
    L_cls_raw: float
    L_cls_weighted: float
    L_reg: float
    w: float
    lr: float


@dataclass
class RunRecord:
    rows: List[IterationLog] = field(default_factory=list)
    status: str = "running"
    diverged_at: Optional[int] = None
    divergence_reason: str = ""
    config_digest: str = ""
    seed: int = 0
    header: Dict[str, object] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [r.t, int(r.skipped), repr(r.L_cls_raw), repr(r.L_cls_weighted), repr(r.L_reg), repr(r.w), repr(r.lr)]
            )
        return buf.getvalue()

    def header_dict(self) -> dict:
        return {
            "schema_version": 1,
            "columns": list(RECORD_COLUMNS),
            "config_digest": self.config_digest,
            "seed": self.seed,
            "status": self.status,
            "diverged_at": self.diverged_at,
            "divergence_reason": self.divergence_reason,
            "iterations_logged": len(self.rows),
            **self.header,
        }

    @classmethod
    def from_csv(cls, text: str, header: Optional[dict] = None) -> "RunRecord":
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        for r in reader:
            rows.append(
                IterationLog(
                    int(r["t"]),
                    bool(int(r["skipped"])),
                    float(r["L_cls_raw"]),
                    float(r["L_cls_weighted"]),
                    float(r["L_reg"]),
                    float(r["w"]),
                    float(r["lr"]),
                )
            )
        rec = cls(rows=rows)
        if header:
            rec.status = header.get("status", rec.status)
            rec.diverged_at = header.get("diverged_at")
            rec.config_digest = header.get("config_digest", "")
            rec.seed = header.get("seed", 0)
        return rec


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def detector_config_for(base: DetectorConfig, loss: LossConfig) -> DetectorConfig:
    """Copy of ``base`` whose init policy follows the loss config's pi / optimal-bias fields."""
    d = asdict(base)
    if loss.optimal_bias:
        d.update(init_policy="optimal_bias", init_pi=None)
    elif loss.init_pi is not None:
        d.update(init_policy="manual_pi", init_pi=loss.init_pi)
    return DetectorConfig(**d)


class TrainingSetup:
    """Anchors, cached matches and imbalance statistics for one training split."""

    def __init__(self, scenes: Sequence[Scene], anchor_config: AnchorConfig):
        if not scenes:
            raise ValueError("training set is empty")
        self.scenes = sorted(scenes, key=lambda s: s.scene_id)
        self.anchor_config = anchor_config
        h, w = self.scenes[0].image.shape[1:]
        self.image_size = (h, w)
        self.anchors: AnchorSet = build_anchors(h, w, anchor_config.strides, anchor_config.scales, anchor_config.aspect_ratios)
        self.matches: List[MatchResult] = [
            match(self.anchors, s, anchor_config.fg_thresh, anchor_config.bg_thresh) for s in self.scenes
        ]
        self.stats: ImbalanceStats = imbalance_stats(
            self.scenes, self.anchors, count_ignore_in_n=anchor_config.count_ignore_in_n, matches=self.matches
        )
        self.stats_alt: ImbalanceStats = imbalance_stats(
            self.scenes, self.anchors, count_ignore_in_n=not anchor_config.count_ignore_in_n, matches=self.matches
        )


def _batch_order(n: int, batch: int, iterations: int, seed: int) -> List[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5EED]))
    out, perm, pos = [], rng.permutation(n), 0
    for _ in range(iterations):
        if pos + batch > n:
            perm, pos = rng.permutation(n), 0
        out.append(perm[pos : pos + batch])
        pos += batch
    return out


def _select_cls_rows(
    batch: ClsBatch, matches: Sequence[MatchResult], sampler: SamplerConfig, rng: np.random.Generator
) -> Optional[np.ndarray]:
    if sampler.strategy == "none":
        return None
    rows, offset = [], 0
    for m in matches:
        if sampler.strategy == "biased":
            rows.append(offset + biased_sample(m, sampler.batch_size, sampler.fg_fraction, rng))
        else:
            cand = np.flatnonzero(m.labels >= 0)
            sub = ClsBatch(T.stop_gradient(T.take(batch.p, offset + cand, axis=0)), m.labels[cand])
            picked = ohem_select(per_anchor_ce(sub), min(sampler.k, cand.size))
            rows.append(offset + np.sort(cand[picked]))
        offset += m.N
    return np.concatenate(rows)


def initial_loss_check(
    setup: TrainingSetup, det_config: DetectorConfig, loss_config: LossConfig, first: Sequence[int], first_loss: float
) -> dict:
    """Compare the measured first-batch classification loss with its closed form."""
    if loss_config.cls_variant == "ghmc":
        return {"initial_check": "not available for ghmc"}
    pi = 1.0 / (1.0 + math.exp(-final_cls_bias(det_config, setup.stats)))
    ms = [setup.matches[i] for i in first]
    n_b = sum(m.N for m in ms)
    nf_b = sum(m.N_f for m in ms)
    n_b_valid = n_b - sum(m.n_ignore for m in ms)
    C = det_config.C
    kw = dict(alpha=loss_config.alpha, gamma=loss_config.gamma, w=1.0)
    out = {
        "initial_pi": pi,
        "initial_L_cls_measured": first_loss,
        "initial_L_cls_analytic_dataset": initial_loss_analytic(loss_config.cls_variant, pi, setup.stats.ratio, C, **kw),
        "initial_L_cls_analytic_dataset_alt_n": initial_loss_analytic(loss_config.cls_variant, pi, setup.stats_alt.ratio, C, **kw),
    }
    if nf_b:
        out["initial_L_cls_analytic_batch"] = initial_loss_analytic(loss_config.cls_variant, pi, n_b / nf_b, C, **kw)
        out["initial_L_cls_analytic_batch_valid"] = initial_loss_analytic(loss_config.cls_variant, pi, n_b_valid / nf_b, C, **kw)
    if np.isfinite(first_loss) and first_loss > 0:
        out["initial_rel_error_dataset"] = abs(first_loss - out["initial_L_cls_analytic_dataset"]) / out["initial_L_cls_analytic_dataset"]
    return out


def train_step(
    store: ParamStore,
    det_config: DetectorConfig,
    loss_config: LossConfig,
    sampler: SamplerConfig,
    scenes: Sequence[Scene],
    matches: Sequence[MatchResult],
    ghm: Optional[GHMC],
    rng: np.random.Generator,
    step: bool = True,
) -> Tuple[Optional[IterationLog], Dict[str, T.Value]]:
    """One forward/backward/update.  Returns (log row or None when skipped, loss values)."""
    t = store.t
    images = np.stack([s.image for s in scenes])
    probs, deltas = forward(store, det_config, images)
    labels = np.concatenate([m.labels for m in matches])
    n_f = int(np.count_nonzero(labels >= 1))
    if n_f == 0:
        logger.info("t=%d: batch has no foreground; skipped", t)
        return None, {}
    batch = ClsBatch(probs, labels)
    rows = _select_cls_rows(batch, matches, sampler, rng)
    if rows is None:
        L_cls = classification_loss(batch, loss_config, ghm)
    else:
        sub = batch.subset(rows)
        L_cls = classification_loss(sub, loss_config, ghm, normalizer=max(sub.N_f, 1))
    fg_rows, targets, offset = [], [], 0
    for m in matches:
        fg_rows.append(offset + m.fg_indices)
        targets.append(m.regression_targets)
        offset += m.N
    pred = T.take(deltas, np.concatenate(fg_rows), axis=0)
    L_reg = smooth_l1_reg_loss(pred, np.concatenate(targets), loss_config.smooth_l1_beta)

    check_divergence(L_cls, t)
    if loss_config.guided:
        w = guided_weight(L_cls, L_reg, loss_config.stage_factor)
    else:
        w = 1.0 if loss_config.fixed_w is None else loss_config.fixed_w
    try:
        total = total_loss(L_cls, L_reg, loss_config)
    except DivergenceError as exc:
        exc.t = t
        raise
    if step:
        for v in store.params.values():
            v.grad = None
        T.backward(total)
        T.sgd_step(store)
    row = IterationLog(t, False, float(L_cls.data), w * float(L_cls.data), float(L_reg.data), w, store.learning_rate)
    return row, {"L_cls": L_cls, "L_reg": L_reg, "total": total}


def train(
    scenes: Sequence[Scene],
    det_config: DetectorConfig,
    loss_config: LossConfig,
    sampler: SamplerConfig,
    schedule: Schedule,
    anchor_config: Optional[AnchorConfig] = None,
    seed: int = 0,
    setup: Optional[TrainingSetup] = None,
    stop_when_flagged: bool = False,
) -> Tuple[ParamStore, RunRecord]:
    """Run the full schedule; divergence ends the run with a partial record instead of raising.

    With ``stop_when_flagged`` the run also ends (status "flagged") as soon as a
    complete loss-balance window falls outside the band. The flag can never be
    cleared by later iterations, so this only saves time.
    """
    anchor_config = anchor_config or AnchorConfig()
    setup = setup or TrainingSetup(scenes, anchor_config)
    det_config = detector_config_for(det_config, loss_config)
    check_alignment(det_config, setup.anchors, *setup.image_size)
    det_config = DetectorConfig(**{**asdict(det_config), "seed": seed})
    store = init_detector(det_config, setup.stats, schedule.learning_rate)

    record = RunRecord(seed=seed)
    record.config_digest = digest_of(
        {
            "detector": asdict(det_config),
            "loss": asdict(loss_config),
            "sampler": asdict(sampler),
            "schedule": asdict(schedule),
            "anchors": asdict(anchor_config),
            "scenes": [s.digest() for s in setup.scenes],
        }
    )
    record.header.update(
        {
            "N_total": setup.stats.N_total,
            "N_f_total": setup.stats.N_f_total,
            "ratio_N_over_Nf": setup.stats.ratio,
            "ratio_N_over_Nf_alt": setup.stats_alt.ratio,
            "count_ignore_in_n": anchor_config.count_ignore_in_n,
        }
    )
    ghm = GHMC(loss_config.ghm_bins, loss_config.ghm_momentum, loss_config.ghm_normalizer) if loss_config.cls_variant == "ghmc" else None
    rng = np.random.default_rng(np.random.SeedSequence([int(sampler.seed) & (2**64 - 1), int(seed) & (2**64 - 1)]))
    batches = _batch_order(len(setup.scenes), schedule.batch_scenes, schedule.iterations, seed)
    window: List[IterationLog] = []

    for i, idx in enumerate(batches):
        t = store.t
        sc = [setup.scenes[j] for j in idx]
        ms = [setup.matches[j] for j in idx]
        try:
            row, losses = train_step(store, det_config, loss_config, sampler, sc, ms, ghm, rng)
        except DivergenceError as exc:
            record.status = "diverged"
            record.diverged_at = t if exc.t is None else exc.t
            record.divergence_reason = str(exc)
            logger.info("diverged at t=%d: %s", record.diverged_at, exc)
            break
        if i == 0 and row is not None:
            record.header.update(initial_loss_check(setup, det_config, loss_config, idx, row.L_cls_raw))
        if row is None:
            row = IterationLog(t, True, 0.0, 0.0, 0.0, 0.0, store.learning_rate)
            store.t += 1
        record.rows.append(row)
        if stop_when_flagged and not row.skipped:
            window.append(row)
            if len(window) == BALANCE_WINDOW:
                probe = loss_balance_report(RunRecord(rows=window))[0]
                window = []
                if probe.imbalanced:
                    record.status = "flagged"
                    logger.info("flagged at t=%d (window ratio %.4g)", t, probe.mean_ratio)
                    break
    else:
        record.status = "completed"
    return store, record


@dataclass
class BalanceWindow:
    start_t: int
    end_t: int
    mean_ratio: float
    imbalanced: bool


def loss_balance_report(record: RunRecord, window: int = BALANCE_WINDOW, band=BALANCE_BAND) -> List[BalanceWindow]:
    """Mean L_reg / (w L_cls) per window of logged, non-skipped iterations."""
    rows = [r for r in record.rows if not r.skipped]
    out = []
    for i in range(0, len(rows), window):
        chunk = rows[i : i + window]
        ratios = [r.L_reg / r.L_cls_weighted if r.L_cls_weighted > 0 else math.inf for r in chunk]
        m = float(np.mean(ratios))
        out.append(BalanceWindow(chunk[0].t, chunk[-1].t, m, not band[0] <= m <= band[1]))
    return out


def is_flagged_unstable(record: RunRecord, window: int = BALANCE_WINDOW, band=BALANCE_BAND) -> bool:
    """Diverged, or any loss-balance window outside ``band``."""
    return record.diverged or record.status == "flagged" or any(w.imbalanced for w in loss_balance_report(record, window, band))
