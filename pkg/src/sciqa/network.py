"""Patch-level quality network: architecture, forward pass, loss, gradients.

The backbone is [conv3x3, conv3x3, maxpool2x2] x 4 followed by two fully
connected layers producing one scalar score per 32x32 grayscale patch.
Every convolution uses stride 1 with zero padding and is followed by batch
normalization and ReLU. The full-reference variant runs the reference patch
through an unshared copy of the first two conv blocks and concatenates the
two feature maps channel-wise before the first pooling stage, so everything
from backbone layer 3 onward sees twice the channels.

Implemented directly on numpy arrays with explicit backward passes so that
training is deterministic and every gradient is open to finite-difference
verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import PatchBatch

DEFAULT_CONV_CHANNELS = (32, 32, 64, 64, 128, 128, 256, 256)
BN_MOMENTUM = 0.9  # fraction of the old running statistic kept per batch
INPUT_SIZE = 32
N_CONV_LAYERS = 8
REF_BRANCH_DEPTH = 2  # conv blocks duplicated for the reference branch


class NumericalError(FloatingPointError):
    """Non-finite values encountered in a forward or backward pass."""


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "NR"  # "NR" or "FR"
    conv_channels: tuple[int, ...] = DEFAULT_CONV_CHANNELS
    fc_width: int = 512
    bn_epsilon: float = 1e-5
    weight_decay: float = 1e-5

    def validate(self) -> None:
        if self.mode not in ("NR", "FR"):
            raise ValueError(f"mode must be 'NR' or 'FR', got {self.mode!r}")
        if len(self.conv_channels) != N_CONV_LAYERS:
            raise ValueError(
                f"conv_channels needs exactly {N_CONV_LAYERS} entries, "
                f"got {len(self.conv_channels)}")
        if any(int(c) < 1 for c in self.conv_channels):
            raise ValueError("conv_channels entries must be >= 1")
        if self.fc_width < 1:
            raise ValueError("fc_width must be >= 1")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class Model:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["fc2.weight"].dtype

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class ForwardOutput:
    scores: np.ndarray  # (B,)
    cache: dict | None = field(default=None, repr=False)


def conv_input_channels(config: ModelConfig, layer: int) -> int:
    """Input channel count of backbone conv layer 1..8 (concatenation in FR
    mode doubles what layer 3 sees)."""
    if layer == 1:
        return 1
    cin = config.conv_channels[layer - 2]
    if layer == REF_BRANCH_DEPTH + 1 and config.mode == "FR":
        cin *= 2
    return cin


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Initialize all named tensors. Weights are zero-mean Gaussians with
    std sqrt(2 / fan_in); biases and BN shifts start at zero. Deterministic
    for a given seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}

    def add_conv_block(name: str, cin: int, cout: int) -> None:
        std = np.sqrt(2.0 / (9 * cin))
        tensors[f"{name}.kernel"] = rng.normal(0.0, std, (3, 3, cin, cout)).astype(dtype)
        tensors[f"{name}.bn_alpha"] = np.ones(cout, dtype=dtype)
        tensors[f"{name}.bn_beta"] = np.zeros(cout, dtype=dtype)
        tensors[f"{name}.bn_mean"] = np.zeros(cout, dtype=dtype)
        tensors[f"{name}.bn_var"] = np.ones(cout, dtype=dtype)

    for i in range(1, N_CONV_LAYERS + 1):
        add_conv_block(f"conv{i}", conv_input_channels(config, i),
                       config.conv_channels[i - 1])

    flat = 2 * 2 * config.conv_channels[-1]  # spatial 32 -> 16 -> 8 -> 4 -> 2
    tensors["fc1.weight"] = rng.normal(
        0.0, np.sqrt(2.0 / flat), (flat, config.fc_width)).astype(dtype)
    tensors["fc1.bias"] = np.zeros(config.fc_width, dtype=dtype)
    tensors["fc2.weight"] = rng.normal(
        0.0, np.sqrt(2.0 / config.fc_width), (config.fc_width, 1)).astype(dtype)
    tensors["fc2.bias"] = np.zeros(1, dtype=dtype)

    if config.mode == "FR":
        for i in range(1, REF_BRANCH_DEPTH + 1):
            add_conv_block(f"ref_conv{i}",
                           1 if i == 1 else config.conv_channels[i - 2],
                           config.conv_channels[i - 1])
    return Model(config, tensors)


def trainable_names(model: Model) -> list[str]:
    """Tensors updated by the optimizer (running BN statistics are not)."""
    return [n for n in model.tensors
            if not (n.endswith(".bn_mean") or n.endswith(".bn_var"))]


def penalized_names(model: Model) -> list[str]:
    """Tensors entering the L2 penalty: multiplicative weights only."""
    return [n for n in model.tensors
            if n.endswith(".kernel") or n.endswith(".weight")]


# ---------------------------------------------------------------------------
# layer primitives


def conv2d_forward(x: np.ndarray, kernel: np.ndarray):
    """3x3 convolution, stride 1, zero 'same' padding, no bias.

    x: (B, H, W, Cin), kernel: (3, 3, Cin, Cout) -> (B, H, W, Cout).
    """
    b, h, w, cin = x.shape
    cout = kernel.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, h, w, 9 * cin), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            idx = i * 3 + j
            cols[..., idx * cin:(idx + 1) * cin] = xp[:, i:i + h, j:j + w, :]
    y = cols.reshape(-1, 9 * cin) @ kernel.reshape(9 * cin, cout)
    return y.reshape(b, h, w, cout), (cols, x.shape)


def conv2d_backward(dy: np.ndarray, cache, kernel: np.ndarray):
    cols, x_shape = cache
    b, h, w, cin = x_shape
    cout = kernel.shape[3]
    dy_flat = dy.reshape(-1, cout)
    dkernel = (cols.reshape(-1, 9 * cin).T @ dy_flat).reshape(kernel.shape)
    dcols = (dy_flat @ kernel.reshape(9 * cin, cout).T).reshape(b, h, w, 9 * cin)
    dxp = np.zeros((b, h + 2, w + 2, cin), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            idx = i * 3 + j
            dxp[:, i:i + h, j:j + w, :] += dcols[..., idx * cin:(idx + 1) * cin]
    return dxp[:, 1:-1, 1:-1, :], dkernel


def bn_forward(z, alpha, beta, mode, running_mean, running_var, epsilon,
               momentum=BN_MOMENTUM):
    """Per-channel batch normalization over the batch and spatial axes.

    Train mode normalizes with batch statistics (population variance,
    std = sqrt(var + epsilon)) and folds them into the running statistics
    in place; infer mode reads the running statistics only.
    """
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite batch-normalization input")
    axes = tuple(range(z.ndim - 1))
    if mode == "train":
        n = int(np.prod([z.shape[a] for a in axes]))
        if n < 2:
            raise ValueError("batch normalization needs at least 2 samples per channel")
        mean = z.mean(axis=axes)
        var = z.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + epsilon)
    zhat = (z - mean) * inv_std
    y = alpha * zhat + beta
    return y.astype(z.dtype), (zhat.astype(z.dtype), inv_std.astype(z.dtype),
                               alpha, mode)


def bn_backward(dy, cache):
    zhat, inv_std, alpha, mode = cache
    axes = tuple(range(dy.ndim - 1))
    dalpha = (dy * zhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if mode == "train":
        n = np.prod([dy.shape[a] for a in axes])
        dzhat = dy * alpha
        dz = (inv_std / n) * (n * dzhat - dzhat.sum(axis=axes)
                              - zhat * (dzhat * zhat).sum(axis=axes))
    else:
        dz = dy * (alpha * inv_std)
    return dz.astype(dy.dtype), dalpha, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, cache):
    return dy * cache


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2. Ties go to the first position in
    row-major window order."""
    b, h, w, c = x.shape
    windows = (x.reshape(b, h // 2, 2, w // 2, 2, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(b, h // 2, w // 2, 4, c))
    idx = windows.argmax(axis=3)
    y = np.take_along_axis(windows, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, (idx, x.shape)


def maxpool2x2_backward(dy, cache):
    idx, x_shape = cache
    b, h, w, c = x_shape
    dwindows = np.zeros((b, h // 2, w // 2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dwindows, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    return (dwindows.reshape(b, h // 2, w // 2, 2, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, h, w, c))


def fc_forward(x, weight, bias):
    return x @ weight + bias, x


def fc_backward(dy, cache, weight):
    x = cache
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


def concat_forward(a, b):
    return np.concatenate([a, b], axis=3), a.shape[3]


def concat_backward(dy, split):
    return dy[..., :split], dy[..., split:]


# ---------------------------------------------------------------------------
# model forward / backward


def _as_input(patches, dtype) -> np.ndarray:
    if isinstance(patches, PatchBatch):
        patches = patches.patches
    x = np.asarray(patches, dtype=dtype)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1] != INPUT_SIZE or x.shape[2] != INPUT_SIZE or x.shape[3] != 1:
        raise ValueError(
            f"expected patches shaped (B, {INPUT_SIZE}, {INPUT_SIZE}), got {x.shape}")
    return x


def _conv_block_forward(x, model, name, mode, caches):
    t = model.tensors
    y, conv_cache = conv2d_forward(x, t[f"{name}.kernel"])
    y, bn_cache = bn_forward(y, t[f"{name}.bn_alpha"], t[f"{name}.bn_beta"],
                             mode, t[f"{name}.bn_mean"], t[f"{name}.bn_var"],
                             model.config.bn_epsilon)
    y, relu_cache = relu_forward(y)
    if caches is not None:
        caches[name] = (conv_cache, bn_cache, relu_cache)
    return y


def _conv_block_backward(dy, model, name, caches, grads):
    conv_cache, bn_cache, relu_cache = caches[name]
    dy = relu_backward(dy, relu_cache)
    dy, dalpha, dbeta = bn_backward(dy, bn_cache)
    grads[f"{name}.bn_alpha"] = dalpha
    grads[f"{name}.bn_beta"] = dbeta
    dx, dkernel = conv2d_backward(dy, conv_cache, model.tensors[f"{name}.kernel"])
    grads[f"{name}.kernel"] = dkernel
    return dx


def forward(model: Model, patches, ref_patches=None, mode: str = "infer") -> ForwardOutput:
    """Score a batch of patches. FR models require an index-aligned reference
    batch; NR models reject one. Train mode keeps activation caches for
    :func:`backward` and updates BN running statistics."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = model.config
    x = _as_input(patches, model.dtype)
    if cfg.mode == "FR":
        if ref_patches is None:
            raise ValueError("full-reference model called without a reference batch")
        xr = _as_input(ref_patches, model.dtype)
        if xr.shape != x.shape:
            raise ValueError(
                f"reference batch shape {xr.shape} does not match {x.shape}")
    else:
        if ref_patches is not None:
            raise ValueError("no-reference model called with a reference batch")
        xr = None
    caches: dict | None = {} if mode == "train" else None

    y = _conv_block_forward(x, model, "conv1", mode, caches)
    y = _conv_block_forward(y, model, "conv2", mode, caches)
    if cfg.mode == "FR":
        yr = _conv_block_forward(xr, model, "ref_conv1", mode, caches)
        yr = _conv_block_forward(yr, model, "ref_conv2", mode, caches)
        y, split = concat_forward(y, yr)
        if caches is not None:
            caches["concat_split"] = split
    for stage in range(4):
        y, pool_cache = maxpool2x2_forward(y)
        if caches is not None:
            caches[f"pool{stage + 1}"] = pool_cache
        if stage < 3:
            y = _conv_block_forward(y, model, f"conv{2 * stage + 3}", mode, caches)
            y = _conv_block_forward(y, model, f"conv{2 * stage + 4}", mode, caches)

    b = y.shape[0]
    flat_shape = y.shape
    y = y.reshape(b, -1)
    t = model.tensors
    y, fc1_cache = fc_forward(y, t["fc1.weight"], t["fc1.bias"])
    y, relu_fc_cache = relu_forward(y)
    y, fc2_cache = fc_forward(y, t["fc2.weight"], t["fc2.bias"])
    scores = y[:, 0]
    if not np.all(np.isfinite(scores)):
        raise NumericalError("non-finite network output")
    if caches is not None:
        caches.update(flat_shape=flat_shape, fc1=fc1_cache,
                      relu_fc=relu_fc_cache, fc2=fc2_cache)
    return ForwardOutput(scores=scores, cache=caches)


def score_in_chunks(model: Model, patches, ref_patches=None,
                    chunk_size: int = 256) -> np.ndarray:
    """Inference scores for an arbitrarily large patch set, bounded memory."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if isinstance(patches, PatchBatch):
        patches = patches.patches
    pieces = []
    for start in range(0, len(patches), chunk_size):
        chunk = patches[start:start + chunk_size]
        ref_chunk = None if ref_patches is None else ref_patches[start:start + chunk_size]
        pieces.append(forward(model, chunk, ref_patches=ref_chunk, mode="infer").scores)
    if not pieces:
        raise ValueError("empty patch set")
    return np.concatenate(pieces)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(np.abs(pred - target)))


def objective(model: Model, pred: np.ndarray, target: np.ndarray) -> float:
    """L1 loss plus (alpha / 2B) * sum of squared multiplicative weights."""
    loss = l1_loss(pred, target)
    alpha = model.config.weight_decay
    if alpha > 0:
        b = np.asarray(pred).size
        penalty = sum(float(np.sum(model.tensors[n].astype(np.float64) ** 2))
                      for n in penalized_names(model))
        loss += alpha / (2.0 * b) * penalty
    return loss


def backward(model: Model, fwd: ForwardOutput, target: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the regularized L1 objective for every trainable tensor.

    Subgradient 0 is used at the loss kink and at ReLU zeros; max-pool ties
    route all gradient to the first window position.
    """
    if fwd.cache is None:
        raise ValueError("backward requires a train-mode forward output")
    caches = fwd.cache
    target = np.asarray(target, dtype=fwd.scores.dtype)
    b = fwd.scores.shape[0]
    if target.shape != fwd.scores.shape:
        raise ValueError(f"target shape {target.shape} != scores shape {fwd.scores.shape}")
    grads: dict[str, np.ndarray] = {}
    t = model.tensors

    dscores = np.sign(fwd.scores - target) / b
    dy = dscores[:, None].astype(fwd.scores.dtype)
    dy, grads["fc2.weight"], grads["fc2.bias"] = fc_backward(dy, caches["fc2"], t["fc2.weight"])
    dy = relu_backward(dy, caches["relu_fc"])
    dy, grads["fc1.weight"], grads["fc1.bias"] = fc_backward(dy, caches["fc1"], t["fc1.weight"])
    dy = dy.reshape(caches["flat_shape"])

    for stage in range(3, -1, -1):
        if stage < 3:
            dy = _conv_block_backward(dy, model, f"conv{2 * stage + 4}", caches, grads)
            dy = _conv_block_backward(dy, model, f"conv{2 * stage + 3}", caches, grads)
        dy = maxpool2x2_backward(dy, caches[f"pool{stage + 1}"])
    if model.config.mode == "FR":
        dy, dyr = concat_backward(dy, caches["concat_split"])
        dyr = _conv_block_backward(dyr, model, "ref_conv2", caches, grads)
        _conv_block_backward(dyr, model, "ref_conv1", caches, grads)
    dy = _conv_block_backward(dy, model, "conv2", caches, grads)
    _conv_block_backward(dy, model, "conv1", caches, grads)

    alpha = model.config.weight_decay
    if alpha > 0:
        for name in penalized_names(model):
            grads[name] = grads[name] + (alpha / b) * t[name]
    return grads


def loss_and_grads(model: Model, patches, targets, ref_patches=None):
    """One train-mode forward/backward pass: (objective value, gradient map)."""
    fwd = forward(model, patches, ref_patches=ref_patches, mode="train")
    targets = np.asarray(targets, dtype=fwd.scores.dtype)
    obj = objective(model, fwd.scores, targets)
    grads = backward(model, fwd, targets)
    return obj, grads
