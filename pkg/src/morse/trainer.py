"""Losses, schedules, and the train / evaluate loops."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import iar
from .autograd import NonFiniteError, Tape, Tensor, adamw_step, ops
from .config import RunConfig, TrainConfig, dump_config
from .fileio import save_checkpoint
from .metrics import MetricsReport, aggregate, compute_metrics
from .model import SegModel
from .smoe import sample_batch_mask

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5
LOG_HEADER = ["iter", "lr", "lambda_t", "l_sup", "l_rend", "l_total"]


@dataclass
class LossBreakdown:
    l_sup: float
    l_rend: float
    lambda_t: float
    l_total: float
    lr: float = 0.0


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[B, H, W]`` integer labels to ``[B, K, H, W]``."""
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[labels], -1, 1)


def dice_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """``1 - mean_k (2|P_k G_k| + s) / (|P_k| + |G_k| + s)`` on softmax probabilities."""
    K = logits.shape[1]
    probs = ops.softmax(logits, axis=1)
    target = one_hot(labels, K, logits.dtype)
    inter = ops.sum(ops.mul(probs, target), axis=(0, 2, 3))
    denom = ops.add(ops.sum(probs, axis=(0, 2, 3)), target.sum(axis=(0, 2, 3)) + DICE_SMOOTH)
    dice = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), denom)
    return ops.sub(1.0, ops.mean(dice))


def supervised_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Equal mix of pixel cross-entropy and soft Dice over ``[B, K, H, W]`` logits."""
    labels = np.asarray(labels)
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    ce = ops.cross_entropy(logits, labels, axis=1)
    return ops.add(ops.mul(ce, 0.5), ops.mul(dice_loss(logits, labels), 0.5))


def awa_lambda(t: float, T: float, lambda_rend: float) -> float:
    """Rendering-loss weight: zero through ``T/2``, then ``lambda_rend * (t - T/2) / T``.

    Peaks at ``lambda_rend / 2`` when ``t == T``.
    """
    if t < 0 or t > T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    if t <= T / 2:
        return 0.0
    return lambda_rend * (t - T / 2) / T


def poly_lr(t: float, T: float, lr0: float, power: float) -> float:
    if t < 0 or t > T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    return lr0 * (1.0 - t / T) ** power


def render_weight(cfg: TrainConfig, t: int) -> float:
    if cfg.rend_schedule == "constant":
        return cfg.lambda_rend
    return awa_lambda(t, cfg.total_iters, cfg.lambda_rend)


@dataclass
class Streams:
    """Independent generators so toggling one stage never shifts another's draws."""

    data: np.random.Generator
    masks: np.random.Generator
    points: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        d, m, p = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(d, m, p)


def rendering_loss(model: SegModel, out, labels: np.ndarray, cfg: TrainConfig, rng) -> Tensor:
    losses = []
    for b in range(out.logits.shape[0]):
        pts = iar.select_points(out.logits.data[b], cfg.n_points_train, cfg.k_p, cfg.rho, rng)
        point_logits = model.render(ops.getitem(out.features, b), pts)
        losses.append(iar.render_loss(point_logits, iar.labels_at(labels[b], pts)))
    total = losses[0]
    for extra in losses[1:]:
        total = ops.add(total, extra)
    return ops.mul(total, 1.0 / len(losses))


def train_step(model: SegModel, batch, cfg: TrainConfig, t: int, streams: Streams) -> LossBreakdown:
    if not 0 <= t < cfg.total_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.total_iters})")
    images, labels = batch
    lam = render_weight(cfg, t)
    lr = poly_lr(t, cfg.total_iters, cfg.lr0, cfg.poly_power)
    mask = None
    if model.use_smoe and not model.dense:
        mask = sample_batch_mask(model.backbone_cfg.expert_count, len(images), cfg.alpha, streams.masks)
    render_active = model.use_iar and lam > 0 and cfg.n_points_train > 0
    try:
        with Tape() as tape:
            out = model(Tensor(images), mask)
            l_sup = supervised_loss(out.logits, labels)
            if render_active:
                l_rend = rendering_loss(model, out, labels, cfg, streams.points)
                total = ops.add(l_sup, ops.mul(l_rend, lam))
            else:
                total = l_sup
        if render_active:
            l_rend_value = float(l_rend.data)
        elif model.use_iar and cfg.n_points_train > 0:
            l_rend_value = float(rendering_loss(model, out, labels, cfg, streams.points).data)
        else:
            l_rend_value = 0.0
    except NonFiniteError as exc:
        raise NonFiniteError(f"iteration {t}: {exc}") from exc
    if not np.isfinite(total.data):
        raise NonFiniteError(f"iteration {t}: non-finite total loss")
    params = model.core_parameters()
    if render_active:
        params = params + model.render_parameters()
    tape.backward(total, params)
    adamw_step(params, lr, weight_decay=cfg.weight_decay)
    return LossBreakdown(float(l_sup.data), l_rend_value, lam, float(total.data), lr)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every epoch."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i : i + batch_size]


def train(
    model: SegModel,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    iters: int | None = None,
) -> list[LossBreakdown]:
    """Run ``iters`` (default: all) optimisation steps; optionally log and checkpoint."""
    tc = cfg.train
    streams = Streams.from_seed(cfg.train_seed)
    feed = batches(len(images), tc.batch_size, streams.data)
    history: list[LossBreakdown] = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    try:
        for t in range(iters if iters is not None else tc.total_iters):
            idx = next(feed)
            br = train_step(model, (images[idx], labels[idx]), tc, t, streams)
            history.append(br)
            if writer is not None and t % tc.log_every == 0:
                writer.writerow([t, repr(br.lr), repr(br.lambda_t), repr(br.l_sup), repr(br.l_rend), repr(br.l_total)])
            if out_dir is not None and tc.checkpoint_every and (t + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt_{t + 1:06d}", model.state_dict(), dump_config(cfg))
            if t % 200 == 0:
                log.info("iter %d lr %.2e lambda %.4f l_sup %.4f l_rend %.4f", t, br.lr, br.lambda_t, br.l_sup, br.l_rend)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final", model.state_dict(), dump_config(cfg))
    return history


@dataclass
class SampleResult:
    coarse: MetricsReport
    refined: MetricsReport
    coarse_mask: np.ndarray
    refined_mask: np.ndarray
    points: iar.PointSet


@dataclass
class EvalResult:
    samples: list[SampleResult] = field(default_factory=list)

    @property
    def coarse(self) -> dict[str, float]:
        return aggregate([s.coarse for s in self.samples])

    @property
    def refined(self) -> dict[str, float]:
        return aggregate([s.refined for s in self.samples])


EVAL_SEED = 20240517


def evaluate(
    model: SegModel,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    n_points: int | None = None,
    seed: int = EVAL_SEED,
) -> EvalResult:
    """Inference with every expert active, refined with ``n_points`` rendered pixels."""
    n_points = cfg.n_points_test if n_points is None else n_points
    K = model.backbone_cfg.num_classes
    rng = np.random.default_rng(seed)
    result = EvalResult()
    for img, lab in zip(images, labels):
        out = model(Tensor(img[None]))
        H, W = lab.shape
        n = min(n_points, H * W)
        refined, pts = model.refine(out, 0, n, cfg.k_p, cfg.rho, rng)
        coarse_mask = out.logits.data[0].argmax(axis=0)
        refined_mask = refined.argmax(axis=0)
        result.samples.append(
            SampleResult(
                compute_metrics(coarse_mask, lab, K),
                compute_metrics(refined_mask, lab, K),
                coarse_mask,
                refined_mask,
                pts,
            )
        )
    return result
