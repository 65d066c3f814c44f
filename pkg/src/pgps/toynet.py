"""A two-layer fully convolutional 3D segmenter with hand-written gradients.

Shapes follow ``(batch, channels, w, h, d)``. Parameters are float64 for
gradient checks and float32 for training.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .arch import PatchSize3D, as_patch
from .sampler import crop

DICE_EPS = 1e-5
CE_FLOOR = 1e-12
PARAM_NAMES = ("w1", "b1", "w2", "b2")
CHECKPOINT_MAGIC = b"PGPSNET1"


class NumericError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


# --- convolution primitives -------------------------------------------------


_OFFSETS = tuple((i, j, k) for i in range(3) for j in range(3) for k in range(3))

# Internally activations are laid out (C, B, W, H, D) so every convolution is
# a single matrix product against an im2col buffer of shape (27*Ci, B*W*H*D).


def _im2col(x: np.ndarray) -> np.ndarray:
    c, b, w, h, d = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((27, c, b, w, h, d), dtype=x.dtype)
    for n, (i, j, k) in enumerate(_OFFSETS):
        cols[n] = xp[:, :, i : i + w, j : j + h, k : k + d]
    return cols.reshape(27 * c, -1)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    c, b, w, h, d = shape
    cols = cols.reshape(27, c, b, w, h, d)
    xp = np.zeros((c, b, w + 2, h + 2, d + 2), dtype=cols.dtype)
    for n, (i, j, k) in enumerate(_OFFSETS):
        xp[:, :, i : i + w, j : j + h, k : k + d] += cols[n]
    return xp[:, :, 1:-1, 1:-1, 1:-1]


def _wmat(w: np.ndarray) -> np.ndarray:
    # (Co, Ci, 3, 3, 3) -> (Co, 27*Ci) matching the im2col row order (offset, channel).
    return w.transpose(0, 2, 3, 4, 1).reshape(w.shape[0], -1)


def _conv_cb(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]):
    cols = _im2col(x)
    out = _wmat(w) @ cols
    if b is not None:
        out += b[:, None]
    return out.reshape((w.shape[0],) + x.shape[1:]), cols


def _conv_cb_backward(cols, x_shape, w, gout, need_input_grad=True):
    co = w.shape[0]
    g = gout.reshape(co, -1)
    gw = (g @ cols.T).reshape(co, 3, 3, 3, -1).transpose(0, 4, 1, 2, 3)
    gb = g.sum(axis=1)
    gx = _col2im(_wmat(w).T @ g, x_shape) if need_input_grad else None
    return gx, np.ascontiguousarray(gw), gb


def conv3d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    """3x3x3 'same' cross-correlation with zero padding.

    ``x``: (B, Ci, W, H, D), ``w``: (Co, Ci, 3, 3, 3) -> (B, Co, W, H, D).
    """
    out, _ = _conv_cb(np.ascontiguousarray(x.swapaxes(0, 1)), w, b)
    return np.ascontiguousarray(out.swapaxes(0, 1))


def conv3d_backward(
    x: np.ndarray, w: np.ndarray, gout: np.ndarray, need_input_grad: bool = True
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of :func:`conv3d` w.r.t. input, weights and bias."""
    xc = np.ascontiguousarray(x.swapaxes(0, 1))
    gc = np.ascontiguousarray(gout.swapaxes(0, 1))
    gx, gw, gb = _conv_cb_backward(_im2col(xc), xc.shape, w, gc, need_input_grad)
    if gx is not None:
        gx = np.ascontiguousarray(gx.swapaxes(0, 1))
    return gx, gw, gb


def softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --- network ------------------------------------------------------------------


@dataclass
class ToyNet:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(
        cls, channels: int = 8, n_classes: int = 2, seed: int = 0, dtype=np.float32
    ) -> "ToyNet":
        rng = np.random.Generator(np.random.Philox(key=[seed, 0x70]))
        w1 = rng.normal(0.0, np.sqrt(2.0 / 27), size=(channels, 1, 3, 3, 3))
        w2 = rng.normal(0.0, np.sqrt(2.0 / (27 * channels)), size=(n_classes, channels, 3, 3, 3))
        return cls(
            w1=w1.astype(dtype),
            b1=np.zeros(channels, dtype),
            w2=w2.astype(dtype),
            b2=np.zeros(n_classes, dtype),
        )

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def dtype(self):
        return self.w1.dtype

    def params(self) -> Dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def astype(self, dtype) -> "ToyNet":
        return ToyNet(*(getattr(self, n).astype(dtype) for n in PARAM_NAMES))

    def copy(self) -> "ToyNet":
        return self.astype(self.dtype)

    def forward_cached(self, x: np.ndarray):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ContractError(f"expected (B, 1, W, H, D) input, got {x.shape}")
        xc = np.ascontiguousarray(x.swapaxes(0, 1))
        z1, cols1 = _conv_cb(xc, self.w1, self.b1)
        a1 = np.maximum(z1, 0)
        z2, cols2 = _conv_cb(a1, self.w2, self.b2)
        probs = np.ascontiguousarray(softmax(z2, axis=0).swapaxes(0, 1))
        if not np.all(np.isfinite(probs)):
            raise NumericError("non-finite activation in forward pass")
        return probs, (xc.shape, cols1, z1, cols2)

    def backward(self, cache, gprobs: np.ndarray, probs: np.ndarray) -> Dict[str, np.ndarray]:
        x_shape, cols1, z1, cols2 = cache
        gz2 = probs * (gprobs - (gprobs * probs).sum(axis=1, keepdims=True))
        gz2 = np.ascontiguousarray(gz2.swapaxes(0, 1), dtype=self.dtype)
        ga1, gw2, gb2 = _conv_cb_backward(cols2, z1.shape, self.w2, gz2)
        gz1 = ga1 * (z1 > 0)
        _, gw1, gb1 = _conv_cb_backward(cols1, x_shape, self.w1, gz1, need_input_grad=False)
        return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


def forward(net: ToyNet, x: np.ndarray) -> np.ndarray:
    """Per-voxel class probabilities, shape (B, n_classes, W, H, D)."""
    return net.forward_cached(x)[0]


# --- loss ---------------------------------------------------------------------


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray
    soft_dice: float
    cross_entropy: float


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, W, H, D) integer labels -> (B, K, W, H, D) one-hot."""
    oh = labels[:, None] == np.arange(n_classes).reshape(1, -1, 1, 1, 1)
    return oh.astype(dtype)


def dice_ce_loss(probs: np.ndarray, labels: np.ndarray) -> LossResult:
    """``(1 - softDice) + crossEntropy`` and its gradient w.r.t. ``probs``.

    Soft Dice is pooled over batch and space per foreground class, then
    averaged over classes. Cross-entropy is the voxel mean of ``-log p_true``
    with ``p`` floored at ``CE_FLOOR``.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 5 or labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ContractError(f"probs {probs.shape} and labels {labels.shape} are not congruent")
    n_classes = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"label out of range [0, {n_classes})")
    g = one_hot(labels, n_classes, probs.dtype)
    axes = (0, 2, 3, 4)

    fg = slice(1, None)
    inter = (probs[:, fg] * g[:, fg]).sum(axis=axes)
    denom = probs[:, fg].sum(axis=axes) + g[:, fg].sum(axis=axes) + DICE_EPS
    dice = (2 * inter + DICE_EPS) / denom
    n_fg = n_classes - 1
    soft_dice = float(dice.mean())

    grad = np.zeros_like(probs)
    coef = 1.0 / n_fg
    num = (2 * inter + DICE_EPS).reshape(1, -1, 1, 1, 1)
    den = denom.reshape(1, -1, 1, 1, 1)
    grad[:, fg] = -coef * (2 * g[:, fg] * den - num) / den**2

    n_vox = labels.size
    p_true = (probs * g).sum(axis=1)
    clipped = np.maximum(p_true, CE_FLOOR)
    ce = float(-np.log(clipped).sum() / n_vox)
    live = (p_true > CE_FLOOR).astype(probs.dtype)
    grad -= g * (live / (clipped * n_vox))[:, None]

    loss = (1.0 - soft_dice) + ce
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    return LossResult(loss, grad, soft_dice, ce)


def loss_and_grads(net: ToyNet, x: np.ndarray, labels: np.ndarray):
    probs, cache = net.forward_cached(x)
    res = dice_ce_loss(probs, labels)
    return res, net.backward(cache, res.grad, probs)


# --- optimisation ------------------------------------------------------------------


@dataclass
class OptimState:
    learning_rate: float = 0.05
    momentum: float = 0.9
    poly_exponent: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must be in [0, 1)")

    def lr_at(self, epoch: int, max_epochs: int) -> float:
        if max_epochs <= 0:
            return self.learning_rate
        frac = min(max(epoch / max_epochs, 0.0), 1.0)
        return self.learning_rate * (1.0 - frac) ** self.poly_exponent


def train_step(
    net: ToyNet,
    optim: OptimState,
    x: np.ndarray,
    labels: np.ndarray,
    epoch: int = 0,
    max_epochs: int = 1,
) -> float:
    """One momentum-SGD step with poly learning-rate decay; updates ``net`` in place."""
    res, grads = loss_and_grads(net, x, labels)
    lr = optim.lr_at(epoch, max_epochs)
    for name in PARAM_NAMES:
        p = getattr(net, name)
        v = optim.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p)
        v = optim.momentum * v - lr * grads[name].astype(p.dtype)
        optim.velocity[name] = v
        p += v
    return res.loss


# --- evaluation ---------------------------------------------------------------------


def dice_score(pred: np.ndarray, true: np.ndarray, n_classes: int = 2):
    """Hard Dice per foreground class and their mean; empty-vs-empty counts as 1."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {true.shape}")
    per_class = []
    for k in range(1, n_classes):
        p, g = pred == k, true == k
        total = int(p.sum()) + int(g.sum())
        per_class.append(1.0 if total == 0 else 2.0 * int((p & g).sum()) / total)
    return per_class, float(np.mean(per_class))


def predict_volume(net: ToyNet, image: np.ndarray, tile: "PatchSize3D | Sequence[int]") -> np.ndarray:
    """Argmax label map for a whole volume, tiled with non-overlapping ``tile`` patches."""
    tile = as_patch(tile).dims
    shape = image.shape
    out = np.zeros(shape, dtype=np.uint8)
    for i in range(0, shape[0], tile[0]):
        for j in range(0, shape[1], tile[1]):
            for k in range(0, shape[2], tile[2]):
                x = crop(image, (i, j, k), tile)[None, None]
                pred = forward(net, x)[0].argmax(axis=0).astype(np.uint8)
                sl = tuple(slice(o, min(o + t, s)) for o, t, s in zip((i, j, k), tile, shape))
                out[sl] = pred[tuple(slice(0, s.stop - s.start) for s in sl)]
    return out


# --- checkpoints ---------------------------------------------------------------------


def save_checkpoint(
    net: ToyNet, path: "str | os.PathLike", epoch: int = 0, hyperparameters: Optional[dict] = None
) -> None:
    """Magic, u64 header length, JSON header, then little-endian float64 parameters."""
    header = {
        "epoch": int(epoch),
        "hyperparameters": hyperparameters or {},
        "params": [{"name": n, "shape": list(getattr(net, n).shape)} for n in PARAM_NAMES],
        "dtype": "<f8",
        "train_dtype": np.dtype(net.dtype).name,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in PARAM_NAMES:
            f.write(getattr(net, n).astype("<f8").tobytes())


def load_checkpoint(path: "str | os.PathLike") -> Tuple[ToyNet, dict]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ContractError("not a toy-net checkpoint (magic mismatch at byte offset 0)")
    (n,) = struct.unpack_from("<Q", buf, 8)
    header = json.loads(buf[16 : 16 + n].decode("utf-8"))
    offset = 16 + n
    arrays = []
    for spec in header["params"]:
        count = int(np.prod(spec["shape"]))
        if len(buf) < offset + 8 * count:
            raise ContractError(f"truncated checkpoint at byte offset {len(buf)}")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
        arrays.append(arr.astype(header.get("train_dtype", "float32")))
        offset += 8 * count
    return ToyNet(*arrays), header
