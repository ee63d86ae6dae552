"""Per-beam person detector with temporal feature fusion.

Every beam's cutout goes through a small 1D conv backbone that yields one
feature vector per beam. Those features are fused over time in one of five
ways, and two linear heads then predict a person logit and a 2D offset to
the person center for each beam.

Offsets live in the point-local frame: the first component runs along the
beam (radial), the second is 90 degrees counterclockwise from it.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .cutout import CutoutBatch, CutoutParams, build_cutouts, cutouts_at
from .scan_data import LidarConfig, Scan

VARIANTS = ("single", "backT", "dram", "drspa", "drspaam")


class StateError(RuntimeError):
    """Streaming state is inconsistent with the requested operation."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    channels: tuple[int, ...] = (32, 64)
    kernel: int = 3
    pool: int = 2
    feature_dim: int = 64

    def flat_dim(self, num_samples: int) -> int:
        length = num_samples
        for _ in self.channels:
            length //= self.pool
        if num_samples < 8 or length < 1:
            raise ConfigurationError(
                f"cutouts of {num_samples} samples are too short for {len(self.channels)} "
                f"pooling stages of {self.pool}")
        return length * self.channels[-1]


@dataclass(frozen=True)
class SpaamParams:
    window_half: int = 5
    alpha: float = 0.5
    embed_dim: int = 32

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ConfigurationError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.window_half < 0:
            raise ConfigurationError("window_half must be >= 0")

    @property
    def window(self) -> int:
        return 2 * self.window_half + 1


@dataclass(frozen=True)
class Variant:
    kind: str = "drspaam"
    T: int = 1

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.kind!r}; choose from {VARIANTS}")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")

    @property
    def name(self) -> str:
        return f"backT{self.T}" if self.kind == "backT" else self.kind

    @classmethod
    def parse(cls, text: str, T: int | None = None) -> "Variant":
        if text.startswith("backT"):
            tail = text[len("backT"):]
            return cls("backT", int(tail) if tail else (T or 5))
        return cls(text)


@dataclass
class FeatureTemplate:
    features: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.features is not None


@dataclass
class PointPredictions:
    cls_logits: np.ndarray     # (N,)
    offsets: np.ndarray        # (N, 2) point-local frame


# ---------------------------------------------------------------------------
# windowed attention (functional core)
# ---------------------------------------------------------------------------

def neighbor_index(num_points: int, window_half: int):
    """Index ``n - w + k`` of the k-th neighbor of beam n, clamped, plus a
    validity mask for neighbors that fall outside the scan."""
    k = np.arange(2 * window_half + 1)
    idx = np.arange(num_points)[:, None] - window_half + k[None, :]
    valid = (idx >= 0) & (idx < num_points)
    return np.clip(idx, 0, num_points - 1), valid


def pairwise_similarity(current: np.ndarray, previous: np.ndarray, psi_w: np.ndarray,
                        psi_b: np.ndarray, window_half: int):
    """Similarities ``<psi(prev_{n-w+k}), psi(cur_n)>`` of shape (..., N, W).

    ``previous`` may be a FeatureTemplate. Returns ``(sim, valid)``;
    invalid neighbors carry ``-inf``.
    """
    if isinstance(previous, FeatureTemplate):
        if not previous.initialized:
            raise StateError("template is not initialized")
        previous = previous.features
    e_cur = nn.linear(current, psi_w, psi_b)
    e_prev = nn.linear(previous, psi_w, psi_b)
    idx, valid = neighbor_index(current.shape[-2], window_half)
    sim = (e_prev[..., idx, :] @ e_cur[..., None])[..., 0]
    return np.where(valid, sim, -np.inf), valid


def spaam_forward(current, previous, psi_w, psi_b, window_half, alpha):
    """Fuse ``current`` (B, N, C) with ``previous`` (B, N, C) by windowed
    attention followed by the auto-regressive mix. Returns ``(fused, cache)``."""
    e_cur = nn.linear(current, psi_w, psi_b)
    e_prev = nn.linear(previous, psi_w, psi_b)
    idx, valid = neighbor_index(current.shape[-2], window_half)
    e_nb = e_prev[:, idx]                                   # (B, N, W, E)
    sim = (e_nb @ e_cur[..., None])[..., 0]                 # (B, N, W)
    att = nn.softmax(sim, axis=-1, mask=valid)
    f_nb = previous[:, idx]                                 # (B, N, W, C)
    agg = (att[:, :, None, :] @ f_nb)[:, :, 0, :]
    fused = alpha * current + (1.0 - alpha) * agg
    cache = (current, previous, e_cur, e_nb, f_nb, att, window_half, alpha)
    return fused, cache


def _scatter_neighbors(d_nb: np.ndarray, window_half: int) -> np.ndarray:
    """Adjoint of ``x[:, idx]``: accumulate (B, N, W, D) back to (B, N, D)."""
    bsz, n, w, d = d_nb.shape
    out = np.zeros((bsz, n, d), dtype=d_nb.dtype)
    for k in range(w):
        shift = k - window_half
        lo, hi = max(0, -shift), min(n, n - shift)
        if lo < hi:
            out[:, lo + shift:hi + shift] += d_nb[:, lo:hi, k]
    return out


def spaam_backward(dfused, cache, psi_w):
    """Returns ``(d_current, d_previous, d_psi_w, d_psi_b)``."""
    current, previous, e_cur, e_nb, f_nb, att, window_half, alpha = cache
    dcur = alpha * dfused
    dagg = (1.0 - alpha) * dfused
    datt = (f_nb @ dagg[..., None])[..., 0]                 # (B, N, W)
    df_nb = att[..., None] * dagg[:, :, None, :]
    dsim = nn.softmax_backward(datt, att)
    de_cur = (dsim[:, :, None, :] @ e_nb)[:, :, 0, :]
    de_nb = dsim[..., None] * e_cur[:, :, None, :]
    dprev = _scatter_neighbors(df_nb, window_half)
    de_prev = _scatter_neighbors(de_nb, window_half)
    dc, dw1, db1 = nn.linear_backward(de_cur, current, psi_w)
    dp, dw2, db2 = nn.linear_backward(de_prev, previous, psi_w)
    return dcur + dc, dprev + dp, dw1 + dw2, db1 + db2


def spaam_update(current: np.ndarray, template: FeatureTemplate, params: SpaamParams,
                 psi_w: np.ndarray, psi_b: np.ndarray) -> FeatureTemplate:
    """One template update for a single stream; (N, C) features."""
    if not template.initialized:
        return FeatureTemplate(np.array(current))
    fused, _ = spaam_forward(current[None], template.features[None], psi_w, psi_b,
                             params.window_half, params.alpha)
    return FeatureTemplate(fused[0])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class TemporalBatch:
    """Cutouts for a training batch.

    ``cutouts`` holds U distinct cutout sets (U, N, M). ``frame_ids`` (B, K)
    picks, per batch element, the K frames of its context window in time
    order. ``reset`` (B, K) marks where a window actually starts; at those
    steps the fused state is re-initialized with the raw features.
    For ``backT`` the K sets of an element are summed instead.
    """

    cutouts: np.ndarray
    frame_ids: np.ndarray
    reset: np.ndarray


class Detector:
    """Parameters plus training-time forward/backward for one variant."""

    def __init__(self, config: LidarConfig, variant: Variant = Variant(),
                 cutout: CutoutParams = CutoutParams(),
                 backbone: BackboneSpec = BackboneSpec(),
                 spaam: SpaamParams = SpaamParams(), seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.variant = variant
        self.cutout = cutout
        self.backbone = backbone
        self.spaam = spaam
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        bb = self.backbone
        p = {}
        c_in = 1
        for i, c_out in enumerate(bb.channels):
            p[f"conv{i}.w"] = nn.glorot_uniform(rng, (c_out, c_in, bb.kernel),
                                                c_in * bb.kernel, c_out * bb.kernel, self.dtype)
            p[f"conv{i}.b"] = np.zeros(c_out, self.dtype)
            c_in = c_out
        flat = bb.flat_dim(self.cutout.num_samples)
        c = bb.feature_dim
        e = self.spaam.embed_dim
        p["fc.w"] = nn.glorot_uniform(rng, (c, flat), flat, c, self.dtype)
        p["fc.b"] = np.zeros(c, self.dtype)
        p["psi.w"] = nn.glorot_uniform(rng, (e, c), c, e, self.dtype)
        p["psi.b"] = np.zeros(e, self.dtype)
        p["cls.w"] = nn.glorot_uniform(rng, (1, c), c, 1, self.dtype)
        p["cls.b"] = np.zeros(1, self.dtype)
        p["reg.w"] = nn.glorot_uniform(rng, (2, c), c, 2, self.dtype)
        p["reg.b"] = np.zeros(2, self.dtype)
        return {k: nn.Parameter(v) for k, v in p.items()}

    def astype(self, dtype) -> "Detector":
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.astype(self.dtype)
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def v(self, name):
        return self.params[name].value

    # -- backbone ----------------------------------------------------------

    def backbone_forward(self, cutouts: np.ndarray):
        """(..., M) cutouts to (..., C) features. Returns ``(features, cache)``."""
        lead = cutouts.shape[:-1]
        x = cutouts.reshape(-1, cutouts.shape[-1], 1).astype(self.dtype, copy=False)
        pad = self.backbone.kernel // 2
        caches = []
        for i in range(len(self.backbone.channels)):
            z = nn.conv1d(x, self.v(f"conv{i}.w"), self.v(f"conv{i}.b"), padding=pad)
            pooled = nn.max_pool1d(z, self.backbone.pool)
            caches.append((x, z, pooled))
            x = nn.relu(pooled)
        flat = x.reshape(x.shape[0], -1)
        h = nn.linear(flat, self.v("fc.w"), self.v("fc.b"))
        feats = nn.relu(h)
        return feats.reshape(*lead, -1), (lead, caches, flat, h, x.shape)

    def backbone_backward(self, dfeats: np.ndarray, cache) -> None:
        lead, caches, flat, h, xshape = cache
        dh = nn.relu_backward(dfeats.reshape(h.shape), h)
        dflat, dw, db = nn.linear_backward(dh, flat, self.v("fc.w"))
        self.params["fc.w"].grad += dw
        self.params["fc.b"].grad += db
        dx = dflat.reshape(xshape)
        pad = self.backbone.kernel // 2
        for i in reversed(range(len(self.backbone.channels))):
            x, z, pooled = caches[i]
            dpooled = nn.relu_backward(dx, pooled)
            dz = nn.max_pool1d_backward(dpooled, z, self.backbone.pool)
            dx, dw, db = nn.conv1d_backward(dz, x, self.v(f"conv{i}.w"), padding=pad)
            self.params[f"conv{i}.w"].grad += dw
            self.params[f"conv{i}.b"].grad += db

    def features(self, cutouts: np.ndarray) -> np.ndarray:
        return self.backbone_forward(cutouts)[0]

    # -- heads -------------------------------------------------------------

    def heads_forward(self, fused: np.ndarray):
        logits = nn.linear(fused, self.v("cls.w"), self.v("cls.b"))[..., 0]
        offsets = nn.linear(fused, self.v("reg.w"), self.v("reg.b"))
        return logits, offsets

    def heads_backward(self, dlogits, doffsets, fused):
        d1, dw, db = nn.linear_backward(dlogits[..., None], fused, self.v("cls.w"))
        self.params["cls.w"].grad += dw
        self.params["cls.b"].grad += db
        d2, dw, db = nn.linear_backward(doffsets, fused, self.v("reg.w"))
        self.params["reg.w"].grad += dw
        self.params["reg.b"].grad += db
        return d1 + d2

    # -- temporal fusion ---------------------------------------------------

    def _fuse_step(self, current, state):
        """One fusion step for the recurrent variants, batched over (B, N, C)."""
        sp = self.spaam
        if self.variant.kind == "dram":
            return sp.alpha * current + (1 - sp.alpha) * state, None
        return spaam_forward(current, state, self.v("psi.w"), self.v("psi.b"),
                             sp.window_half, sp.alpha)

    def _fuse_step_backward(self, dfused, cache):
        sp = self.spaam
        if cache is None:
            return sp.alpha * dfused, (1 - sp.alpha) * dfused
        dcur, dprev, dw, db = spaam_backward(dfused, cache, self.v("psi.w"))
        self.params["psi.w"].grad += dw
        self.params["psi.b"].grad += db
        return dcur, dprev

    def forward_batch(self, batch: TemporalBatch):
        """Training forward. Returns ``(logits (B, N), offsets (B, N, 2), cache)``."""
        feats_u, bb_cache = self.backbone_forward(batch.cutouts)     # (U, N, C)
        ids, reset = batch.frame_ids, batch.reset
        feats = feats_u[ids]                                         # (B, K, N, C)
        steps = []
        if self.variant.kind in ("single",):
            fused = feats[:, -1]
        elif self.variant.kind == "backT":
            fused = feats.sum(axis=1)
        else:
            state = feats[:, 0]
            for k in range(1, ids.shape[1]):
                new, cache = self._fuse_step(feats[:, k], state)
                r = reset[:, k][:, None, None]
                state = np.where(r, feats[:, k], new)
                steps.append((cache, r))
            fused = state
        logits, offsets = self.heads_forward(fused)
        return logits, offsets, (feats_u.shape, bb_cache, ids, fused, steps)

    def backward_batch(self, dlogits, doffsets, cache) -> None:
        ushape, bb_cache, ids, fused, steps = cache
        dfused = self.heads_backward(dlogits, doffsets, fused)
        dfeats = np.zeros(ids.shape + fused.shape[1:], dtype=fused.dtype)
        if self.variant.kind == "single":
            dfeats[:, -1] = dfused
        elif self.variant.kind == "backT":
            dfeats[:] = dfused[:, None]
        else:
            dstate = dfused
            for k in range(ids.shape[1] - 1, 0, -1):
                step_cache, r = steps[k - 1]
                dcur_new, dprev = self._fuse_step_backward(np.where(r, 0, dstate), step_cache)
                dfeats[:, k] += dcur_new + np.where(r, dstate, 0)
                dstate = dprev
            dfeats[:, 0] += dstate
        dfeats_u = np.zeros(ushape, dtype=fused.dtype)
        np.add.at(dfeats_u, ids.reshape(-1), dfeats.reshape(-1, *ushape[1:]))
        self.backbone_backward(dfeats_u, bb_cache)

    # -- persistence -------------------------------------------------------

    def hyperparameters(self) -> dict:
        return {
            "lidar": self.config.to_dict(),
            "variant": asdict(self.variant),
            "cutout": asdict(self.cutout),
            "backbone": asdict(self.backbone),
            "spaam": asdict(self.spaam),
            "seed": self.seed,
        }

    def save(self, path) -> None:
        """Write the parameter checkpoint plus a ``.json`` sidecar with the
        hyperparameters needed to rebuild the model."""
        nn.save_checkpoint(path, {k: p.value for k, p in self.params.items()})
        Path(str(path) + ".json").write_text(json.dumps(self.hyperparameters(), indent=2))

    @classmethod
    def load(cls, path, variant: Variant | None = None, spaam: SpaamParams | None = None,
             config: LidarConfig | None = None) -> "Detector":
        hp = json.loads(Path(str(path) + ".json").read_text())
        bb = hp["backbone"]
        bb["channels"] = tuple(bb["channels"])
        model = cls(config or LidarConfig(**hp["lidar"]),
                    variant or Variant(**hp["variant"]),
                    CutoutParams(**hp["cutout"]), BackboneSpec(**bb),
                    spaam or SpaamParams(**hp["spaam"]), seed=hp["seed"])
        arrays = nn.load_checkpoint(path)
        for name, p in model.params.items():
            if name not in arrays:
                raise ValueError(f"{path}: checkpoint lacks parameter {name}")
            if arrays[name].shape != p.value.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            p.value = arrays[name].astype(model.dtype)
        return model

    def with_variant(self, variant: Variant, spaam: SpaamParams | None = None) -> "Detector":
        """Same parameters, different inference variant (parameters shared)."""
        other = object.__new__(Detector)
        other.__dict__.update(self.__dict__)
        other.variant = variant
        if spaam is not None:
            other.spaam = spaam
        return other


# ---------------------------------------------------------------------------
# streaming inference
# ---------------------------------------------------------------------------

@dataclass
class StreamOutput:
    preds: PointPredictions
    # previous-frame beam index with the highest attention similarity per
    # beam, -1 where there is no previous frame; only for attention variants
    correspondence: np.ndarray | None = None
    similarity: np.ndarray | None = None


class DetectorStream:
    """Causal per-sequence inference state for one detector."""

    def __init__(self, model: Detector):
        self.model = model
        self.template = FeatureTemplate()
        keep = model.variant.T - 1 if model.variant.kind == "backT" else 0
        self.past_ranges: deque = deque(maxlen=keep)
        self.last_timing = {}

    def reset(self):
        self.template = FeatureTemplate()
        self.past_ranges.clear()

    def cutouts(self, scan: Scan) -> np.ndarray:
        """All cutout sets this frame needs: (S, N, M)."""
        m = self.model
        r = scan.ranges
        if r.shape != (m.config.num_points,):
            raise StateError("scan does not match the detector's lidar configuration")
        if m.variant.kind != "backT":
            return cutouts_at(r, r, m.config, m.cutout)[None]
        sets = [cutouts_at(r, r, m.config, m.cutout)]
        pad = m.variant.T - 1 - len(self.past_ranges)
        past = list(self.past_ranges)
        if past or pad:
            past = [past[0] if past else r] * pad + past
        for prev in past:
            sets.append(cutouts_at(prev, r, m.config, m.cutout))
        return np.stack(sets)

    def network(self, scan: Scan, cut: np.ndarray) -> StreamOutput:
        m = self.model
        kind = m.variant.kind
        if scan.ranges.shape != (m.config.num_points,):
            raise StateError("scan does not match the detector's lidar configuration")
        feats = m.features(cut)
        corr = sim = None
        if kind == "single":
            fused = feats[0]
        elif kind == "backT":
            fused = feats.sum(axis=0)
        elif kind == "dram":
            if self.template.initialized:
                a = m.spaam.alpha
                fused = a * feats[0] + (1 - a) * self.template.features
            else:
                fused = feats[0]
            self.template = FeatureTemplate(fused)
        else:
            cur = feats[0]
            if self.template.initialized:
                sim, _ = pairwise_similarity(cur, self.template.features, m.v("psi.w"),
                                             m.v("psi.b"), m.spaam.window_half)
                idx, _ = neighbor_index(len(cur), m.spaam.window_half)
                corr = idx[np.arange(len(cur)), np.argmax(sim, axis=1)]
                fused = spaam_update(cur, self.template, m.spaam,
                                     m.v("psi.w"), m.v("psi.b")).features
            else:
                fused = cur
                corr = np.full(len(cur), -1)
            # DR-SPA attends over the previous raw features, DR-SPAAM over the template
            self.template = FeatureTemplate(cur if kind == "drspa" else fused)
        if kind == "backT":
            self.past_ranges.append(scan.ranges)
        logits, offsets = m.heads_forward(fused)
        return StreamOutput(PointPredictions(logits, offsets), corr, sim)

    def step(self, scan: Scan) -> StreamOutput:
        return self.network(scan, self.cutouts(scan))


def forward_stream(stream: DetectorStream, scan: Scan) -> PointPredictions:
    return stream.step(scan).preds


def forward_variant(model: Detector, variant: Variant, window: list[Scan]) -> PointPredictions:
    """Predictions for the last scan of ``window`` under ``variant``.

    The window must hold at least ``T`` scans for backward fusion; recurrent
    variants are run over the whole window from a fresh state.
    """
    need = variant.T if variant.kind == "backT" else 1
    if len(window) < need:
        raise StateError(f"{variant.name} needs a window of {need} scans, got {len(window)}")
    stream = DetectorStream(model.with_variant(variant))
    scans = window[-need:] if variant.kind in ("backT", "single") else window
    if variant.kind == "drspa":
        scans = window[-2:]
    out = None
    for s in scans:
        out = stream.step(s)
    return out.preds
