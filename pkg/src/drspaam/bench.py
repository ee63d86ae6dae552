"""Per-frame latency split into cutout, network and voting stages."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .cutout import cutouts_at
from .detector import Detector, DetectorStream, Variant
from .scan_data import ScanSequence
from .vote import VoteParams, detect


class _ParallelStream(DetectorStream):
    """Builds each cutout set in beam chunks on a thread pool."""

    def __init__(self, model, pool: ThreadPoolExecutor, chunks: int):
        super().__init__(model)
        self.pool = pool
        self.chunks = chunks

    def cutouts(self, scan):
        m = self.model
        if m.variant.kind != "backT":
            sources = [scan.ranges]
        else:
            past = list(self.past_ranges)
            pad = m.variant.T - 1 - len(past)
            sources = [scan.ranges] + [past[0] if past else scan.ranges] * pad + past
        parts = np.array_split(np.arange(m.config.num_points), self.chunks)

        def work(job):
            src, idx = job
            return cutouts_at(src, scan.ranges, m.config, m.cutout, beams=idx)

        jobs = [(src, idx) for src in sources for idx in parts]
        out = list(self.pool.map(work, jobs))
        return np.stack([np.concatenate(out[i * len(parts):(i + 1) * len(parts)])
                         for i in range(len(sources))])


def bench(model: Detector, seq: ScanSequence, variant: Variant | None = None,
          repetitions: int = 3, warmup: int = 5, vote: VoteParams = VoteParams(),
          parallel: int = 0) -> dict:
    """Median per-frame stage times (ms) over ``repetitions`` passes of ``seq``.

    The first ``warmup`` frames of every pass are discarded. With
    ``parallel > 0`` cutouts are built on that many threads.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if len(seq) <= warmup:
        raise ValueError(f"sequence needs more than {warmup} frames")
    model = model.with_variant(variant) if variant is not None else model
    pool = ThreadPoolExecutor(parallel) if parallel > 0 else None
    rows = []
    try:
        for _ in range(repetitions):
            stream = _ParallelStream(model, pool, parallel) if pool else DetectorStream(model)
            for k, scan in enumerate(seq.scans):
                t0 = time.perf_counter()
                cut = stream.cutouts(scan)
                t1 = time.perf_counter()
                out = stream.network(scan, cut)
                t2 = time.perf_counter()
                detect(out.preds, scan, seq.config, vote)
                t3 = time.perf_counter()
                if k >= warmup:
                    rows.append((t1 - t0, t2 - t1, t3 - t2, t3 - t0))
    finally:
        if pool:
            pool.shutdown()
    med = np.median(np.array(rows), axis=0) * 1000.0
    return {
        "variant": model.variant.name,
        "frames": len(rows),
        "cutout_ms": float(med[0]),
        "net_ms": float(med[1]),
        "vote_ms": float(med[2]),
        "total_ms": float(med[3]),
        "fps": float(1000.0 / med[3]),
        "threads": parallel or 1,
    }
