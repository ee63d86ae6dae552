"""Small numpy kernel of differentiable operations.

Every op comes as a forward function plus an explicit backward function that
recomputes whatever it needs from the forward inputs. Arrays are plain numpy
``ndarray`` objects; float64 is used for gradient checks, float32 for training
and inference.

Conv and pooling ops use the channels-last ``(batch, length, channels)`` layout.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"SPAAMCKPT"
CHECKPOINT_VERSION = 1


class Parameter:
    """A trainable array together with its gradient and Adam moments."""

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def _as_batched(x):
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (L, C) or (B, L, C) input, got shape {x.shape}")
    return x, False


def _im2col(x, kernel, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (0, 0)))
    win = sliding_window_view(x, kernel, axis=1)[:, ::stride]   # (B, L', C, K)
    b, lout, c, k = win.shape
    return np.ascontiguousarray(win).reshape(b * lout, c * k), lout


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of channels-last ``x`` (B, L, C_in) with ``w``
    (C_out, C_in, K); returns (B, L', C_out)."""
    x, squeeze = _as_batched(x)
    c_out, c_in, k = w.shape
    if x.shape[2] != c_in:
        raise ValueError(f"conv1d: input has {x.shape[2]} channels, weights expect {c_in}")
    if x.shape[1] + 2 * padding < k:
        raise ValueError("conv1d: kernel longer than padded input")
    cols, lout = _im2col(x, k, stride, padding)
    out = cols @ w.reshape(c_out, c_in * k).T
    if b is not None:
        out += b
    out = out.reshape(x.shape[0], lout, c_out)
    return out[0] if squeeze else out


def conv1d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Returns ``(dx, dw, db)`` for :func:`conv1d`."""
    x, squeeze = _as_batched(x)
    dout, _ = _as_batched(dout)
    c_out, c_in, k = w.shape
    bsz, length, _ = x.shape
    cols, lout = _im2col(x, k, stride, padding)
    dout2 = dout.reshape(bsz * lout, c_out)
    dw = (dout2.T @ cols).reshape(w.shape)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w.reshape(c_out, c_in * k)).reshape(bsz, lout, c_in, k)
    dxp = np.zeros((bsz, length + 2 * padding, c_in), dtype=x.dtype)
    span = stride * (lout - 1) + 1
    for j in range(k):
        dxp[:, j:j + span:stride] += dcols[:, :, :, j]
    dx = dxp[:, padding:padding + length] if padding else dxp
    return (dx[0] if squeeze else dx), dw, db


# ---------------------------------------------------------------------------
# linear, relu, max-pool
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w.T + b`` over the last axis; ``w`` has shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        out += b
    return out


def linear_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = d2.T @ x2
    db = d2.sum(axis=0)
    dx = dout @ w
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def max_pool1d(x: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping max pooling over the length axis of (B, L, C) or
    (L, C) input; a ragged tail is dropped."""
    if window < 1:
        raise ValueError("max_pool1d: window must be >= 1")
    length = x.shape[-2]
    lout = length // window
    blocks = x[..., :lout * window, :].reshape(*x.shape[:-2], lout, window, x.shape[-1])
    return blocks.max(axis=-2)


def max_pool1d_backward(dout: np.ndarray, x: np.ndarray, window: int) -> np.ndarray:
    """Routes each output gradient to the first maximal element of its window."""
    length = x.shape[-2]
    lout = length // window
    blocks = x[..., :lout * window, :].reshape(*x.shape[:-2], lout, window, x.shape[-1])
    top = blocks.max(axis=-2, keepdims=True)
    hit = np.empty(blocks.shape, dtype=bool)
    taken = np.zeros(top.shape[:-2] + top.shape[-1:], dtype=bool)
    for j in range(window):
        h = (blocks[..., j, :] == top[..., 0, :]) & ~taken
        hit[..., j, :] = h
        taken |= h
    dx = np.zeros_like(x)
    dx[..., :lout * window, :] = (hit * dout[..., None, :]).reshape(
        *x.shape[:-2], lout * window, x.shape[-1])
    return dx


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    """Numerically safe softmax. Entries where ``mask`` is False get weight 0."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_binary(targets):
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("bce_loss: targets must be 0 or 1")


def bce_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean binary cross-entropy on logits, in the stable form
    ``max(z, 0) - z*t + log(1 + exp(-|z|))``."""
    if logits.shape != targets.shape:
        raise ValueError("bce_loss: shape mismatch")
    _check_binary(targets)
    z = logits
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean())


def bce_loss_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    _check_binary(targets)
    return (sigmoid(logits) - targets) / logits.size


def l1_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Sum of ``|pred - target|`` over masked entries / max(1, masked entry count).

    ``mask`` broadcasts against ``pred``.
    """
    if pred.shape != target.shape:
        raise ValueError("l1_loss: pred/target shape mismatch")
    m = np.broadcast_to(mask, pred.shape)
    return float(np.sum(np.abs(pred - target) * m) / max(1.0, float(m.sum())))


def l1_loss_grad(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = np.broadcast_to(mask, pred.shape)
    return np.sign(pred - target) * m / max(1.0, float(m.sum()))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    for p in params:
        p.step += 1
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** p.step)
        v_hat = p.adam_v / (1 - beta2 ** p.step)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[..., tuple[float, Sequence[np.ndarray]]],
               inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    ``fn(*inputs)`` must return ``(scalar, grads)`` with one gradient array per
    input. Inputs are perturbed in place (and restored), in float64.
    Returns the max over entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    _, analytic = fn(*inputs)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        g = np.asarray(g, dtype=np.float64)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*inputs)[0]
            flat[i] = orig - eps
            fm = fn(*inputs)[0]
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32 in the SPAAMCKPT layout."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = data.reshape(dims).astype(np.float32)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
