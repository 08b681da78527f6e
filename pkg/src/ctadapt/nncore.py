"""Small deterministic convolutional softmax classifier.

The network is fixed-shape by design: a stack of 3x3 convolution blocks
(ReLU + 2x2 max-pool each, default 8 then 16 kernels), a flatten, a
dense layer with 8 units (ReLU, dropout during training), and a dense
softmax head.  Everything is float32 numpy; convolutions run through
im2col so the heavy lifting is matrix multiplication.

Determinism contract: ``init_model``, ``train`` and ``replace_head``
are pure functions of their inputs plus a 64-bit seed.  Repeated calls
with identical arguments produce bit-identical parameter tensors, and
checkpoints round-trip bit-exactly through ``save_checkpoint`` /
``load_checkpoint``.

Gradients are analytic backpropagation; tests verify them against
central finite differences, so any change here must keep the forward
and backward passes in exact correspondence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DimensionError,
    NumericError,
    TrainingError,
    UnsupportedVersionError,
)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"DLCK"

PENULT_UNITS = 8  # width of the feature layer feeding the softmax head


class TrainingStage(IntEnum):
    FRESH = 0
    POST_PRETEXT = 1
    POST_TRANSFER = 2


@dataclass
class ConvLayer:
    kernels: np.ndarray  # [out_ch, in_ch, 3, 3]
    bias: np.ndarray  # [out_ch]


@dataclass
class ClassifierModel:
    """Immutable-by-convention parameter bundle.

    Operations never mutate a model in place; they return new values.
    """

    conv_layers: list[ConvLayer]
    penult_w: np.ndarray  # [flat_features, PENULT_UNITS]
    penult_b: np.ndarray  # [PENULT_UNITS]
    head_w: np.ndarray  # [PENULT_UNITS, n_classes]
    head_b: np.ndarray  # [n_classes]
    dropout_rate: float
    weight_decay: float
    input_side: int

    @property
    def n_classes(self) -> int:
        return int(self.head_b.shape[0])

    def param_items(self):
        """(name, array) pairs in the canonical (checkpoint) order."""
        for i, layer in enumerate(self.conv_layers):
            yield f"conv{i}.kernels", layer.kernels
            yield f"conv{i}.bias", layer.bias
        yield "penult.w", self.penult_w
        yield "penult.b", self.penult_b
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def with_params(self, params: dict) -> "ClassifierModel":
        """New model with parameter arrays replaced by ``params``."""
        convs = [
            ConvLayer(params[f"conv{i}.kernels"], params[f"conv{i}.bias"])
            for i in range(len(self.conv_layers))
        ]
        return replace(
            self,
            conv_layers=convs,
            penult_w=params["penult.w"],
            penult_b=params["penult.b"],
            head_w=params["head.w"],
            head_b=params["head.b"],
        )

    def copy(self) -> "ClassifierModel":
        return self.with_params({k: v.copy() for k, v in self.param_items()})

    def astype(self, dtype) -> "ClassifierModel":
        return self.with_params({k: v.astype(dtype) for k, v in self.param_items()})


def models_identical(a: ClassifierModel, b: ClassifierModel) -> bool:
    """True when every parameter tensor matches bit for bit."""
    pa = dict(a.param_items())
    pb = dict(b.param_items())
    if pa.keys() != pb.keys():
        return False
    return all(
        pa[k].shape == pb[k].shape and pa[k].tobytes() == pb[k].tobytes() for k in pa
    )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    # Numeric safety valve: when set, each batch gradient is rescaled so
    # its global L2 norm is at most this value before the momentum
    # update.  None trains on raw gradients.  A rare outlier batch can
    # otherwise launch the velocity far enough to kill every ReLU unit,
    # which is unrecoverable at this model size.
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError(f"max_grad_norm must be > 0 or None, got {self.max_grad_norm}")


def _glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(
    n_classes: int,
    input_side: int,
    seed: int,
    *,
    conv_channels: tuple[int, ...] = (8, 16),
    dropout_rate: float = 0.25,
    weight_decay: float = 1e-4,
) -> ClassifierModel:
    """Fresh model with scaled-uniform weights U(-a, a), a = sqrt(6 / (fan_in + fan_out)).

    Biases start at zero.  Draw order is fixed (conv layers first, then
    the 8-unit dense layer, then the head), so a seed pins every weight.
    """
    if n_classes != 2:
        raise ConfigError(f"every model in this pipeline is binary; got n_classes={n_classes}")
    pools = len(conv_channels)
    if input_side < 8 or input_side % (2**pools) != 0:
        raise ConfigError(
            f"input_side must be >= 8 and divisible by {2 ** pools} "
            f"({pools} 2x2 pools), got {input_side}"
        )
    if not (0.0 <= dropout_rate < 1.0):
        raise ConfigError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    if weight_decay < 0.0:
        raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")

    rng = np.random.default_rng(seed)
    convs = []
    in_ch = 1
    for out_ch in conv_channels:
        fan_in, fan_out = in_ch * 9, out_ch * 9
        kernels = _glorot_uniform(rng, (out_ch, in_ch, 3, 3), fan_in, fan_out)
        convs.append(ConvLayer(kernels, np.zeros(out_ch, dtype=np.float32)))
        in_ch = out_ch

    feat = conv_channels[-1] * (input_side // (2**pools)) ** 2
    penult_w = _glorot_uniform(rng, (feat, PENULT_UNITS), feat, PENULT_UNITS)
    penult_b = np.zeros(PENULT_UNITS, dtype=np.float32)
    head_w = _glorot_uniform(rng, (PENULT_UNITS, n_classes), PENULT_UNITS, n_classes)
    head_b = np.zeros(n_classes, dtype=np.float32)
    return ClassifierModel(
        convs, penult_w, penult_b, head_w, head_b,
        dropout_rate, weight_decay, input_side,
    )


def replace_head(model: ClassifierModel, seed: int) -> ClassifierModel:
    """Swap in a fresh zero head; every other tensor is copied bit-exactly.

    The new head outputs uniform probabilities for every input, so transfer
    training starts from an unsaturated softmax no matter how hot the
    backbone activations are.  `seed` is accepted for signature stability
    (the zero initializer happens to be seed-independent).
    """
    del seed
    new = model.copy()
    return replace(
        new,
        head_w=np.zeros_like(model.head_w),
        head_b=np.zeros_like(model.head_b),
    )


# --- forward / backward ------------------------------------------------------


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values after {name}")


def _im2col3(x: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B, H*W, C*9] patches of the zero-padded 3x3 neighbourhood."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, k] = xp[:, :, dy : dy + h, dx : dx + w]
            k += 1
    return cols.transpose(0, 3, 4, 1, 2).reshape(b, h * w, c * 9)


def _col2im3(dcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of ``_im2col3``: scatter patch gradients back onto the input."""
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 9).transpose(0, 3, 4, 1, 2)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy : dy + h, dx : dx + w] += d[:, :, k]
            k += 1
    return dxp[:, :, 1 : h + 1, 1 : w + 1]


def _maxpool2(x: np.ndarray):
    b, c, h, w = x.shape
    xr = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = xr.argmax(axis=-1)  # ties resolve to the first maximum
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, c, ho, wo = dout.shape
    dxr = np.zeros((b, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return (
        dxr.reshape(b, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, 2 * ho, 2 * wo)
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _validate_batch(model: ClassifierModel, batch: np.ndarray):
    s = model.input_side
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (s, s):
        raise DimensionError(
            f"expected batch shape [B, 1, {s}, {s}], got {tuple(batch.shape)}"
        )


def _forward_pass(model: ClassifierModel, batch: np.ndarray, dropout_mask, *, check=False):
    """Run the network; returns (probs, cache) with everything backward needs."""
    x = batch
    cache = {"inputs": [], "cols": [], "pre_relu": [], "pool_idx": []}
    for i, layer in enumerate(model.conv_layers):
        cols = _im2col3(x)
        out_ch = layer.kernels.shape[0]
        wmat = layer.kernels.reshape(out_ch, -1)
        b, n, _ = cols.shape
        h = w = x.shape[2]
        conv = (cols @ wmat.T + layer.bias).transpose(0, 2, 1).reshape(b, out_ch, h, w)
        if check:
            _check_finite(f"conv{i}", conv)
        act = np.maximum(conv, 0)
        pooled, idx = _maxpool2(act)
        cache["inputs"].append(x)
        cache["cols"].append(cols)
        cache["pre_relu"].append(conv)
        cache["pool_idx"].append(idx)
        x = pooled

    flat = x.reshape(x.shape[0], -1)
    pre_penult = flat @ model.penult_w + model.penult_b
    if check:
        _check_finite("penult", pre_penult)
    penult = np.maximum(pre_penult, 0)
    dropped = penult if dropout_mask is None else penult * dropout_mask
    logits = dropped @ model.head_w + model.head_b
    if check:
        _check_finite("head", logits)
    probs = _softmax(logits)
    cache.update(
        conv_out_shape=x.shape, flat=flat, pre_penult=pre_penult,
        penult=penult, dropped=dropped, dropout_mask=dropout_mask, probs=probs,
    )
    return probs, cache


def forward(model: ClassifierModel, batch: np.ndarray) -> np.ndarray:
    """Class probabilities [B, n_classes] in inference mode (no dropout)."""
    batch = np.asarray(batch)
    _validate_batch(model, batch)
    probs, _ = _forward_pass(model, batch, None)
    _check_finite("softmax", probs)
    return probs


def _weight_square_sum(model: ClassifierModel) -> float:
    total = 0.0
    for name, arr in model.param_items():
        if name.endswith((".kernels", ".w")):
            total += float(np.sum(arr.astype(np.float64) ** 2))
    return total


def _dropout_mask(model: ClassifierModel, n: int, seed: int, dtype):
    if model.dropout_rate <= 0.0:
        return None
    rng = np.random.default_rng(seed)
    keep = rng.random((n, PENULT_UNITS)) >= model.dropout_rate
    scale = np.asarray(1.0 - model.dropout_rate, dtype=dtype)
    return keep.astype(dtype) / scale


def loss_and_gradients(
    model: ClassifierModel,
    batch: np.ndarray,
    labels,
    dropout_mask_seed: int = 0,
):
    """Mean cross-entropy plus L2 penalty, with gradients for every parameter.

    The loss is ``mean(-log p[label])  +  weight_decay * sum(w^2)`` where
    the squared sum runs over weight matrices and kernels (biases have no
    penalty).  The dropout mask is a pure function of ``dropout_mask_seed``
    so the loss surface is fixed while the seed is held, which is what
    makes finite-difference checking possible with dropout active.
    """
    batch = np.asarray(batch)
    labels = np.asarray(labels, dtype=np.intp)
    _validate_batch(model, batch)
    if labels.shape != (batch.shape[0],):
        raise DimensionError(
            f"labels must have shape [{batch.shape[0]}], got {tuple(labels.shape)}"
        )
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise DimensionError("label out of range for this model")

    n = batch.shape[0]
    dtype = batch.dtype
    mask = _dropout_mask(model, n, dropout_mask_seed, dtype)
    probs, cache = _forward_pass(model, batch, mask, check=True)

    picked = np.clip(probs[np.arange(n), labels], 1e-12, None)
    ce = float(-np.mean(np.log(picked)))
    loss = ce + model.weight_decay * _weight_square_sum(model)

    grads = {}
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    dlogits = (probs - onehot) / n

    grads["head.w"] = cache["dropped"].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    ddropped = dlogits @ model.head_w.T
    dpenult = ddropped if mask is None else ddropped * mask
    dpre_penult = dpenult * (cache["pre_penult"] > 0)
    grads["penult.w"] = cache["flat"].T @ dpre_penult
    grads["penult.b"] = dpre_penult.sum(axis=0)
    dflat = dpre_penult @ model.penult_w.T
    dx = dflat.reshape(cache["conv_out_shape"])

    for i in reversed(range(len(model.conv_layers))):
        layer = model.conv_layers[i]
        dact = _maxpool2_backward(dx, cache["pool_idx"][i])
        dconv = dact * (cache["pre_relu"][i] > 0)
        b, out_ch = dconv.shape[0], dconv.shape[1]
        dconv_r = dconv.reshape(b, out_ch, -1).transpose(0, 2, 1)  # [B, H*W, out]
        cols = cache["cols"][i]
        dw = np.einsum("bno,bnk->ok", dconv_r, cols)
        grads[f"conv{i}.kernels"] = dw.reshape(layer.kernels.shape)
        grads[f"conv{i}.bias"] = dconv.sum(axis=(0, 2, 3))
        dcols = dconv_r @ layer.kernels.reshape(out_ch, -1)
        dx = _col2im3(dcols, cache["inputs"][i].shape)

    wd = model.weight_decay
    if wd > 0.0:
        for name, arr in model.param_items():
            if name.endswith((".kernels", ".w")):
                grads[name] = grads[name] + (2.0 * wd) * arr

    for name in grads:
        _check_finite(f"grad:{name}", grads[name])
    return loss, grads


# --- training ----------------------------------------------------------------


def train(
    start: ClassifierModel,
    x: np.ndarray,
    y,
    cfg: TrainConfig,
) -> ClassifierModel:
    """SGD with momentum over shuffled minibatches.

    ``x`` is [N, 1, side, side] float32, ``y`` integer class indices.
    The epoch shuffles and per-batch dropout mask seeds all derive from
    ``cfg.seed``, so identical inputs give a bit-identical model.  The
    input model is never modified.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.intp)
    if x.ndim != 4 or x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"need matching x [N,1,s,s] and y [N]; got {x.shape} vs {y.shape}"
        )
    if x.shape[0] == 0:
        raise TrainingError("training set is empty")
    _validate_batch(start, x)
    if np.unique(y).size < 2:
        raise TrainingError(
            "training data contains a single class; downstream recall "
            "multipliers would be undefined"
        )

    model = start.copy()
    if cfg.epochs == 0:
        return model

    rng = np.random.default_rng(cfg.seed)
    params = dict(model.param_items())
    velocity = {name: np.zeros_like(arr) for name, arr in params.items()}
    n = x.shape[0]
    lr = cfg.learning_rate
    mom = cfg.momentum

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            mask_seed = int(rng.integers(0, 2**63))
            _, grads = loss_and_gradients(model, x[sel], y[sel], mask_seed)
            if cfg.max_grad_norm is not None:
                total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if total > cfg.max_grad_norm:
                    scale = cfg.max_grad_norm / total
                    grads = {name: g * scale for name, g in grads.items()}
            for name, arr in params.items():
                v = mom * velocity[name] - lr * grads[name].astype(arr.dtype)
                velocity[name] = v
                params[name] = arr + v
            model = model.with_params(params)
            params = dict(model.param_items())
    return model


def accuracy(model: ClassifierModel, x: np.ndarray, y) -> float:
    """Fraction of argmax predictions matching ``y``."""
    preds = forward(model, np.asarray(x, dtype=np.float32)).argmax(axis=1)
    return float(np.mean(preds == np.asarray(y)))


# --- checkpoints -------------------------------------------------------------
#
# Binary layout (all integers little-endian):
#   magic "DLCK" | u32 format_version | u8 stage | u32 input_side
#   | f64 dropout_rate | f64 weight_decay
#   | u32 rng_state length | rng_state bytes
#   | u32 tensor count
#   | per tensor: u32 ndim, u32 x ndim dims, float32 LE values
# Tensor order is ClassifierModel.param_items() order.


@dataclass
class Checkpoint:
    model: ClassifierModel
    stage: TrainingStage
    rng_state: bytes = b""
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<IB", ckpt.format_version, int(ckpt.stage))
    out += struct.pack("<I", ckpt.model.input_side)
    out += struct.pack("<dd", ckpt.model.dropout_rate, ckpt.model.weight_decay)
    out += struct.pack("<I", len(ckpt.rng_state))
    out += ckpt.rng_state
    tensors = list(ckpt.model.param_items())
    out += struct.pack("<I", len(tensors))
    for _, arr in tensors:
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    (version, stage_raw) = rd.unpack("<IB")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        stage = TrainingStage(stage_raw)
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: unknown training stage {stage_raw}") from exc
    (input_side,) = rd.unpack("<I")
    dropout_rate, weight_decay = rd.unpack("<dd")
    (rng_len,) = rd.unpack("<I")
    rng_state = rd.take(rng_len)
    (n_tensors,) = rd.unpack("<I")
    if n_tensors < 6 or n_tensors % 2 != 0:
        raise CorruptCheckpointError(f"{path}: implausible tensor count {n_tensors}")

    arrays = []
    for _ in range(n_tensors):
        (ndim,) = rd.unpack("<I")
        dims = rd.unpack(f"<{ndim}I")
        count = int(np.prod(dims)) if ndim else 1
        data = rd.take(4 * count)
        arrays.append(np.frombuffer(data, dtype="<f4").reshape(dims).copy())
    if rd.pos != len(rd.buf):
        raise CorruptCheckpointError(f"{path}: trailing bytes after tensors")

    n_conv = (n_tensors - 4) // 2
    convs = [ConvLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_conv)]
    penult_w, penult_b, head_w, head_b = arrays[2 * n_conv :]
    model = ClassifierModel(
        convs, penult_w, penult_b, head_w, head_b,
        dropout_rate, weight_decay, int(input_side),
    )
    return Checkpoint(model, stage, rng_state, version)
