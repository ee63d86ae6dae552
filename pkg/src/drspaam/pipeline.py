"""Run a detector over whole sequences and score the result."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .detector import Detector, DetectorStream, StreamOutput
from .evalmetrics import EvalResult, evaluate
from .scan_data import ScanSequence, subsample_temporal
from .vote import Detection, VoteParams, detect


def predict_sequence(model: Detector, seq: ScanSequence) -> list[StreamOutput]:
    """Stream every scan of ``seq`` through a fresh detector state."""
    stream = DetectorStream(model)
    return [stream.step(scan) for scan in seq.scans]


def detect_sequence(model: Detector, seq: ScanSequence,
                    vote: VoteParams = VoteParams(),
                    outputs: list[StreamOutput] | None = None) -> list[list[Detection]]:
    outputs = outputs if outputs is not None else predict_sequence(model, seq)
    return [detect(o.preds, s, seq.config, vote) for o, s in zip(outputs, seq.scans)]


def evaluate_model(model: Detector, seqs: Sequence[ScanSequence], vote: VoteParams = VoteParams(),
                   d: float = 0.5, outputs: list[list[StreamOutput]] | None = None) -> EvalResult:
    frames = []
    for i, seq in enumerate(seqs):
        dets = detect_sequence(model, seq, vote, outputs[i] if outputs is not None else None)
        frames.extend(zip(dets, seq.annotations))
    return evaluate(frames, d)


def stride_sweep(model: Detector, seqs: Sequence[ScanSequence], strides: Iterable[int] = range(1, 6),
                 d: float = 0.5, vote: VoteParams = VoteParams()) -> dict[int, EvalResult]:
    """Evaluate on temporally subsampled copies of ``seqs``."""
    return {s: evaluate_model(model, [subsample_temporal(q, s) for q in seqs], vote, d)
            for s in strides}


DEFAULT_VOTE_GRID = {
    "grid_bin": (0.05, 0.1, 0.2),
    "min_confidence": (0.1, 0.2, 0.3, 0.4, 0.5),
}


def tune_vote(model: Detector, seqs: Sequence[ScanSequence], grid: dict = DEFAULT_VOTE_GRID,
              d: float = 0.5, base: VoteParams = VoteParams()):
    """Exhaustive search over ``grid`` maximizing AP_d. Returns
    ``(best_params, best_result, table)``; earlier grid points win ties."""
    outputs = [predict_sequence(model, q) for q in seqs]
    keys = list(grid)
    best = None
    table = []
    for values in itertools.product(*(grid[k] for k in keys)):
        kw = dict(zip(keys, values))
        vp = VoteParams(**{**base.__dict__, **kw})
        res = evaluate_model(model, seqs, vp, d, outputs)
        table.append((kw, res.ap))
        if best is None or res.ap > best[1].ap:
            best = (vp, res)
    return best[0], best[1], table
