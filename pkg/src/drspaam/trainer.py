"""Target assignment, losses and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .cutout import cutouts_at
from .detector import Detector, TemporalBatch
from .scan_data import LidarConfig, Scan, ScanSequence, endpoints
from .vote import VoteParams, sensor_to_local

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_scans: int = 8
    epochs: int = 40
    context_frames: int = 10
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    assign_radius: float = 0.4
    reg_weight: float = 1.0
    seed: int = 0
    # evaluate on the validation set every this many epochs (0 = only at the end)
    val_every: int = 1

    def __post_init__(self):
        if not self.lr_init > self.lr_final > 0:
            raise ValueError("need lr_init > lr_final > 0")
        if self.context_frames < 1:
            raise ValueError("context_frames must be >= 1")
        if self.batch_scans < 1 or self.epochs < 1:
            raise ValueError("batch_scans and epochs must be >= 1")


def assign_targets(scan: Scan, annotations, config: LidarConfig, assign_radius: float):
    """Per-beam labels, local-frame offset targets and regression mask.

    A beam is positive when its endpoint lies within ``assign_radius`` of an
    annotated center; its target is the offset to the nearest such center.
    """
    n = config.num_points
    labels = np.zeros(n, dtype=np.float32)
    offsets = np.zeros((n, 2), dtype=np.float32)
    centers = np.array([a.center for a in annotations or ()], dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0 or assign_radius <= 0:
        return labels, offsets, labels.copy()
    pts = endpoints(scan.ranges, config)
    delta = centers[None, :, :] - pts[:, None, :]          # (N, P, 2)
    dist = np.linalg.norm(delta, axis=-1)
    nearest = dist.argmin(axis=1)
    dmin = dist[np.arange(n), nearest]
    pos = dmin <= assign_radius
    labels[pos] = 1.0
    local = sensor_to_local(delta[np.arange(n), nearest], config.beam_angles())
    offsets[pos] = local[pos]
    return labels, offsets, labels.copy()


def lr_at(k: int, total: int, lr_init: float = 1e-3, lr_final: float = 1e-6) -> float:
    """Exponential decay from ``lr_init`` at step 0 to ``lr_final`` at step total-1."""
    if total <= 1:
        return lr_init
    return lr_init * (lr_final / lr_init) ** (k / (total - 1))


def context_length(model: Detector, config: TrainConfig) -> int:
    kind = model.variant.kind
    if kind == "single":
        return 1
    if kind == "backT":
        return model.variant.T
    if kind == "drspa":
        return 2
    return config.context_frames


@dataclass
class _Data:
    seqs: list[ScanSequence]
    cutouts: list[np.ndarray]         # per sequence (F, N, M)
    targets: list[tuple]              # per sequence, per frame (labels, offsets, mask) or None
    samples: list[tuple[int, int]]    # annotated (sequence, frame) pairs


def prepare(model: Detector, seqs: Sequence[ScanSequence], assign_radius: float) -> _Data:
    cuts, targets, samples = [], [], []
    for si, seq in enumerate(seqs):
        if seq.config != model.config:
            raise TrainingError(f"sequence {si} does not match the model's lidar config")
        cuts.append(np.stack([cutouts_at(s.ranges, s.ranges, seq.config, model.cutout)
                              for s in seq.scans]))
        tg = []
        for fi, (scan, ann) in enumerate(zip(seq.scans, seq.annotations)):
            if ann is None:
                tg.append(None)
            else:
                tg.append(assign_targets(scan, ann, seq.config, assign_radius))
                samples.append((si, fi))
        targets.append(tg)
    if not samples:
        raise TrainingError("no annotated frames to train on")
    return _Data(list(seqs), cuts, targets, samples)


def make_batch(model: Detector, data: _Data, picks: Sequence[tuple[int, int]], K: int):
    """Assemble the TemporalBatch and stacked targets for ``picks``."""
    labels = np.stack([data.targets[s][f][0] for s, f in picks])
    offsets = np.stack([data.targets[s][f][1] for s, f in picks])
    mask = np.stack([data.targets[s][f][2] for s, f in picks])
    if model.variant.kind == "backT":
        sets = []
        for s, f in picks:
            seq = data.seqs[s]
            cur = seq.scans[f].ranges
            for k in range(f - K + 1, f + 1):
                prev = seq.scans[max(k, 0)].ranges
                sets.append(data.cutouts[s][f] if k == f else
                            cutouts_at(prev, cur, seq.config, model.cutout))
        ids = np.arange(len(picks) * K).reshape(len(picks), K)
        reset = np.zeros_like(ids, dtype=bool)
        return TemporalBatch(np.stack(sets), ids, reset), (labels, offsets, mask)
    keys: dict[tuple[int, int], int] = {}
    ids = np.zeros((len(picks), K), dtype=np.intp)
    reset = np.zeros((len(picks), K), dtype=bool)
    for b, (s, f) in enumerate(picks):
        start = max(f - K + 1, 0)
        for j, k in enumerate(range(f - K + 1, f + 1)):
            key = (s, max(k, start))
            ids[b, j] = keys.setdefault(key, len(keys))
            reset[b, j] = k == start
    cut = np.stack([data.cutouts[s][f] for s, f in keys])
    return TemporalBatch(cut, ids, reset), (labels, offsets, mask)


def loss_and_grads(model: Detector, batch: TemporalBatch, targets, reg_weight: float = 1.0):
    """Forward, loss and backward for one batch. Gradients accumulate into
    the model's parameters (call ``zero_grad`` first)."""
    labels, offsets_t, mask = targets
    logits, offsets, cache = model.forward_batch(batch)
    labels = labels.astype(logits.dtype)
    cls = nn.bce_loss(logits, labels)
    reg = nn.l1_loss(offsets, offsets_t.astype(offsets.dtype), mask[..., None])
    dlogits = nn.bce_loss_grad(logits, labels).astype(logits.dtype)
    doff = (reg_weight * nn.l1_loss_grad(offsets, offsets_t, mask[..., None])).astype(offsets.dtype)
    model.backward_batch(dlogits, doff, cache)
    return cls + reg_weight * reg, cls, reg


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["epoch", "loss", "val_ap05"])
        for r in self.rows:
            w.writerow([r["epoch"], f"{r['loss']:.6f}",
                        "" if r["val_ap05"] is None else f"{r['val_ap05']:.6f}"])
        return buf.getvalue()


def train(model: Detector, dataset: Sequence[ScanSequence], config: TrainConfig = TrainConfig(),
          val: Sequence[ScanSequence] | None = None, vote: VoteParams = VoteParams(),
          progress=None) -> TrainLog:
    """Train ``model`` in place; returns the per-epoch log."""
    from .pipeline import evaluate_model

    data = prepare(model, dataset, config.assign_radius)
    K = context_length(model, config)
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(len(data.samples) / config.batch_scans)
    total = per_epoch * config.epochs
    params = list(model.params.values())
    history = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(per_epoch):
            idx = rng.integers(0, len(data.samples), size=config.batch_scans)
            picks = [data.samples[i] for i in idx]
            batch, targets = make_batch(model, data, picks, K)
            model.zero_grad()
            loss, _, _ = loss_and_grads(model, batch, targets, config.reg_weight)
            nn.adam_step(params, lr_at(step, total, config.lr_init, config.lr_final))
            losses.append(loss)
            step += 1
        val_ap = None
        last = epoch == config.epochs - 1
        if val and (last or (config.val_every and (epoch + 1) % config.val_every == 0)):
            val_ap = evaluate_model(model, val, vote, 0.5).ap
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_ap05": val_ap}
        history.rows.append(row)
        log.info("epoch %d loss %.4f val_ap05 %s", epoch, row["loss"], val_ap)
        if progress:
            progress(row)
    return history
