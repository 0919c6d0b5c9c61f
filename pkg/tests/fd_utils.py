"""Finite-difference helpers shared by the gradient and acceptance tests.

The micro network here is assembled directly from the layer primitives in
``sciqa.network`` so that every layer type (convolution, batch norm, ReLU,
max pooling, fully connected, channel concatenation) sits on the path from
parameters to the scalar objective.  Central differences at a moderate step
only approximate the analytic gradient when no piecewise boundary (ReLU
sign, pool argmax, L1 residual sign) is crossed between the two perturbed
evaluations, so the check records those activation patterns and reports how
many probes disturbed them.
"""

from __future__ import annotations

import numpy as np

from sciqa import network as nw

MICRO_CHANNELS = (3, 3)
MICRO_INPUT = 8


def build_micro_params(seed: int, two_branch: bool) -> dict[str, np.ndarray]:
    """Random float64 parameters for the micro network."""
    c1, c2 = MICRO_CHANNELS
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def block(name: str, cin: int, cout: int) -> None:
        params[f"{name}.kernel"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        params[f"{name}.alpha"] = rng.uniform(0.8, 1.2, cout)
        params[f"{name}.beta"] = rng.normal(0.0, 0.3, cout)

    block("a1", 1, c1)
    block("a2", c1, c2)
    if two_branch:
        block("b1", 1, c1)
        block("b2", c1, c2)
    half = MICRO_INPUT // 2
    flat = half * half * (2 * c2 if two_branch else c2)
    params["fc.weight"] = rng.normal(0.0, np.sqrt(2.0 / flat), (flat, 1))
    params["fc.bias"] = np.zeros(1)
    return params


def _block_forward(x, params, name, caches, patterns):
    cout = params[f"{name}.alpha"].shape[0]
    running_mean = np.zeros(cout)
    running_var = np.ones(cout)
    y, conv_cache = nw.conv2d_forward(x, params[f"{name}.kernel"])
    y, bn_cache = nw.bn_forward(y, params[f"{name}.alpha"], params[f"{name}.beta"],
                                "train", running_mean, running_var, 1e-5)
    pre_activation = y
    patterns.append(np.signbit(y).copy())
    y, relu_cache = nw.relu_forward(y)
    caches[name] = (conv_cache, bn_cache, relu_cache, pre_activation)
    return y


def micro_forward(params, x, x_ref, targets, weight_decay):
    """Objective, predictions, backward caches, and activation patterns."""
    caches: dict[str, object] = {}
    patterns: list[np.ndarray] = []
    a = _block_forward(x, params, "a1", caches, patterns)
    a = _block_forward(a, params, "a2", caches, patterns)
    if x_ref is not None:
        b = _block_forward(x_ref, params, "b1", caches, patterns)
        b = _block_forward(b, params, "b2", caches, patterns)
        a, split = nw.concat_forward(a, b)
        caches["split"] = split
    batch, h, w, c = a.shape
    windows = a.reshape(batch, h // 2, 2, w // 2, 2, c)
    windows = windows.transpose(0, 1, 3, 2, 4, 5).reshape(batch, h // 2, w // 2, 4, c)
    patterns.append(np.argmax(windows, axis=3).copy())
    y, pool_cache = nw.maxpool2x2_forward(a)
    caches["pool"] = pool_cache
    caches["flat_shape"] = y.shape
    out, fc_cache = nw.fc_forward(y.reshape(batch, -1), params["fc.weight"], params["fc.bias"])
    caches["fc"] = fc_cache
    pred = out[:, 0]
    patterns.append(np.signbit(pred - targets).copy())
    objective = float(np.mean(np.abs(pred - targets)))
    penalty = sum(float(np.sum(params[k] ** 2))
                  for k in params if k.endswith("kernel") or k == "fc.weight")
    objective += weight_decay / (2.0 * batch) * penalty
    return objective, pred, caches, patterns


def _block_backward(dy, params, name, caches, grads):
    conv_cache, bn_cache, relu_cache, _ = caches[name]
    dy = nw.relu_backward(dy, relu_cache)
    dy, dalpha, dbeta = nw.bn_backward(dy, bn_cache)
    grads[f"{name}.alpha"] = dalpha
    grads[f"{name}.beta"] = dbeta
    dx, dkernel = nw.conv2d_backward(dy, conv_cache, params[f"{name}.kernel"])
    grads[f"{name}.kernel"] = dkernel
    return dx


def micro_backward(params, pred, targets, caches, weight_decay):
    """Analytic gradients matching ``micro_forward``."""
    grads: dict[str, np.ndarray] = {}
    batch = len(pred)
    dpred = np.sign(pred - targets) / batch
    dy, dweight, dbias = nw.fc_backward(dpred[:, None], caches["fc"], params["fc.weight"])
    grads["fc.weight"] = dweight
    grads["fc.bias"] = dbias
    dy = dy.reshape(caches["flat_shape"])
    dy = nw.maxpool2x2_backward(dy, caches["pool"])
    if "split" in caches:
        dy, dy_ref = nw.concat_backward(dy, caches["split"])
        dy_ref = _block_backward(dy_ref, params, "b2", caches, grads)
        _block_backward(dy_ref, params, "b1", caches, grads)
    dy = _block_backward(dy, params, "a2", caches, grads)
    _block_backward(dy, params, "a1", caches, grads)
    for k, g in grads.items():
        if k.endswith("kernel") or k == "fc.weight":
            grads[k] = g + weight_decay / batch * params[k]
    return grads


def micro_inputs(seed: int, two_branch: bool):
    """Deterministic inputs and targets that leave the predictions nonzero."""
    rng = np.random.default_rng(1000 + seed)
    x = rng.random((2, MICRO_INPUT, MICRO_INPUT, 1))
    x_ref = rng.random((2, MICRO_INPUT, MICRO_INPUT, 1)) if two_branch else None
    return x, x_ref


def relu_margin(params, x, x_ref, weight_decay):
    """Smallest |pre-activation| over every ReLU input in the network."""
    _, _, caches, _ = micro_forward(params, x, x_ref, np.zeros(x.shape[0]), weight_decay)
    names = [n for n in ("a1", "a2", "b1", "b2") if n in caches]
    return min(float(np.abs(caches[n][3]).min()) for n in names)


def _patterns_equal(p1, p2):
    return all(np.array_equal(a, b) for a, b in zip(p1, p2))


def run_micro_fd_check(seed: int, two_branch: bool, step: float, weight_decay: float = 1e-3):
    """Central-difference check over every micro-network parameter.

    Returns (worst relative error, number of probes that crossed a piecewise
    boundary, name of the tensor holding the worst element).
    """
    params = build_micro_params(seed, two_branch)
    x, x_ref = micro_inputs(seed, two_branch)
    _, pred, _, _ = micro_forward(params, x, x_ref, np.zeros(2), weight_decay)
    targets = pred + np.array([1.5, -2.0])
    _, pred, caches, base_patterns = micro_forward(params, x, x_ref, targets, weight_decay)
    grads = micro_backward(params, pred, targets, caches, weight_decay)

    worst = 0.0
    worst_name = None
    crossings = 0
    for name, tensor in params.items():
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = tensor[idx]
            tensor[idx] = saved + step
            obj_plus, _, _, pat_plus = micro_forward(params, x, x_ref, targets, weight_decay)
            tensor[idx] = saved - step
            obj_minus, _, _, pat_minus = micro_forward(params, x, x_ref, targets, weight_decay)
            tensor[idx] = saved
            if not (_patterns_equal(pat_plus, base_patterns)
                    and _patterns_equal(pat_minus, base_patterns)):
                crossings += 1
            fd = (obj_plus - obj_minus) / (2.0 * step)
            analytic = grads[name][idx]
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            if rel > worst:
                worst = rel
                worst_name = name
    return worst, crossings, worst_name


def run_full_model_fd_check(seed: int, mode: str, step: float = 1e-5):
    """Central-difference check of ``network.backward`` on a small full model.

    Uses float64 and a randomized batch-norm running state so the training
    and inference statistics genuinely differ.  Running statistics mutated by
    each forward call are restored before the next evaluation.
    """
    cfg = nw.ModelConfig(mode=mode, conv_channels=(2,) * 8, fc_width=4, weight_decay=1e-3)
    model = nw.build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 991)
    x = rng.random((2, 32, 32), dtype=np.float64)
    x_ref = rng.random((2, 32, 32), dtype=np.float64) if mode == "FR" else None
    targets = rng.uniform(20.0, 90.0, 2)
    for name in model.tensors:
        if name.endswith("bn_mean"):
            model.tensors[name] = rng.normal(0.0, 0.1, model.tensors[name].shape)
        elif name.endswith("bn_var"):
            model.tensors[name] = rng.uniform(0.5, 2.0, model.tensors[name].shape)
    running = {k: v.copy() for k, v in model.tensors.items()
               if k.endswith(("bn_mean", "bn_var"))}

    def restore_running():
        for k, v in running.items():
            model.tensors[k][...] = v

    _, grads = nw.loss_and_grads(model, x, targets, ref_patches=x_ref)
    restore_running()

    worst = 0.0
    worst_name = None
    for name in nw.trainable_names(model):
        tensor = model.tensors[name]
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = tensor[idx]
            tensor[idx] = saved + step
            scores = nw.forward(model, x, ref_patches=x_ref, mode="train").scores
            obj_plus = nw.objective(model, scores, targets)
            restore_running()
            tensor[idx] = saved - step
            scores = nw.forward(model, x, ref_patches=x_ref, mode="train").scores
            obj_minus = nw.objective(model, scores, targets)
            restore_running()
            tensor[idx] = saved
            fd = (obj_plus - obj_minus) / (2.0 * step)
            analytic = grads[name][idx]
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            if rel > worst:
                worst = rel
                worst_name = name
    return worst, worst_name
