"""Dense-tensor operators with hand-written forward and backward passes.

Exactly the operators the convolutional and dense autoencoders need:
3x3 same-padding convolution, batch normalization, ReLU, 2x2 max pooling,
2x nearest-neighbor upsampling, dense (affine) layers, MSE and
softmax-crossentropy losses, plus a finite-difference gradient checker.

Layout convention is NCHW for 4-d tensors and (batch, features) for 2-d.
All functions are pure except ``batchnorm_forward``, which updates the
running statistics in place during training.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


class Parameter:
    """A trainable array with a gradient slot of identical shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# convolution (3x3 kernel, stride 1, zero padding 1: output dims == input dims)
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-correlate ``x`` (B,C_in,H,W) with ``w`` (C_out,C_in,3,3) + bias.

    Same-padding: output spatial dims equal input spatial dims.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weights, got {x.shape} / {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B,C,H,W,3,3) view
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B,H,W,C_out)
    y += b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``conv2d_forward`` w.r.t. input, weights and bias."""
    if grad_out.shape[:2] != (x.shape[0], w.shape[0]) or grad_out.shape[2:] != x.shape[2:]:
        raise ShapeError(
            f"conv2d_backward shape mismatch: grad {grad_out.shape}, "
            f"input {x.shape}, weights {w.shape}"
        )
    db = grad_out.sum(axis=(0, 2, 3))

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    dw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out,C_in,3,3)

    gp = np.pad(grad_out, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))  # (B,C_out,H,W,3,3)
    wf = w[:, :, ::-1, ::-1]
    dx = np.tensordot(gwin, wf, axes=([1, 4, 5], [0, 2, 3]))  # (B,H,W,C_in)
    dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    return dx, dw, db


# ---------------------------------------------------------------------------
# batch normalization (per channel; 4-d NCHW or 2-d (batch, features))
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")


def _bn_expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v.reshape(1, -1)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> tuple[np.ndarray, dict]:
    """Normalize per channel; affine by gamma/beta.

    Train mode uses batch statistics and updates ``running_mean`` /
    ``running_var`` in place with the given momentum; inference mode uses
    the running statistics as constants.
    """
    axes = _bn_axes(x)
    n_channels = x.shape[1]
    if gamma.shape != (n_channels,):
        raise ShapeError(f"batchnorm gamma shape {gamma.shape} != ({n_channels},)")
    if train:
        n = int(np.prod([x.shape[a] for a in axes]))
        if n < 2:
            raise ShapeError("batchnorm train mode needs >= 2 elements per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean[...] = momentum * running_mean + (1.0 - momentum) * mean
        running_var[...] = momentum * running_var + (1.0 - momentum) * var
    else:
        n = 0
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_expand(mean, x.ndim)) * _bn_expand(inv_std, x.ndim)
    y = _bn_expand(gamma, x.ndim) * xhat + _bn_expand(beta, x.ndim)
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "axes": axes,
             "n": n, "train": train}
    return y, cache


def batchnorm_backward(
    grad_out: np.ndarray, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batchnorm w.r.t. input, gamma and beta."""
    xhat = cache["xhat"]
    inv_std = _bn_expand(cache["inv_std"], grad_out.ndim)
    gamma = _bn_expand(cache["gamma"], grad_out.ndim)
    axes = cache["axes"]
    dgamma = (grad_out * xhat).sum(axis=axes)
    dbeta = grad_out.sum(axis=axes)
    if not cache["train"]:
        # running stats are constants: the map is affine per channel
        return grad_out * gamma * inv_std, dgamma, dbeta
    n = cache["n"]
    dxhat = grad_out * gamma
    sum_dxhat = dxhat.sum(axis=axes, keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, keepdims=True)
    dx = (inv_std / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations / pooling / resampling
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; zero elsewhere (subgradient 0 at x == 0)."""
    return grad_out * (x > 0)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pool; returns (pooled, argmax indices).

    Ties route to the first cell in row-major window scan order.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(
    grad_out: np.ndarray, idx: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    """Route each pooled gradient back to its argmax cell."""
    b, c, h, w = input_shape
    g = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(b, c, h, w))


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling: each cell copied into a 2x2 block."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    """Sum the four gradient copies per source cell."""
    b, c, h2, w2 = grad_out.shape
    return grad_out.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map: (B,D_in) @ (D_in,D_out) + bias. Linear (no activation)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weights {w.shape}")
    return x @ w + b


def dense_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"dense_backward shape mismatch: grad {grad_out.shape}")
    dx = grad_out @ w.T
    dw = x.T @ grad_out
    db = grad_out.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all elements of (pred - target)^2; returns (loss, dL/dpred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / pred.size) * diff
    return loss, grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cce_loss(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean categorical crossentropy over the batch; returns (loss, dL/dlogits).

    ``labels`` are integer class indices in [0, K).
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cce_loss expects (B,K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradient_check(
    loss_fn,
    grad_fn,
    wrt: list[np.ndarray],
    h: float = 1e-5,
    n_coords: int = 100,
    rng: np.random.Generator | None = None,
    resample=None,
    resample_threshold: float = 1e-4,
    max_resamples: int = 3,
) -> float:
    """Compare analytic gradients with central finite differences.

    Perturbs a random subsample of at least ``n_coords`` coordinates drawn
    across the ``wrt`` arrays (all coordinates if fewer exist), evaluating
    ``loss_fn()`` at +/- h in place, and returns the max relative error
    against ``grad_fn()`` (a list of arrays aligned with ``wrt``).

    If ``resample`` is given and the error exceeds ``resample_threshold``
    (e.g. the probe sits on a max-pool tie, where the loss is not
    differentiable), the probe point is redrawn by calling ``resample()``
    and the check reruns; the best error across attempts is returned.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    best = np.inf
    for _ in range(max_resamples + 1):
        grads = grad_fn()
        sizes = [a.size for a in wrt]
        total = sum(sizes)
        take = min(n_coords, total)
        flat_ids = rng.choice(total, size=take, replace=False)
        max_err = 0.0
        for fid in np.sort(flat_ids):
            ai, off = 0, int(fid)
            while off >= sizes[ai]:
                off -= sizes[ai]
                ai += 1
            arr = wrt[ai]
            orig = arr.flat[off]
            arr.flat[off] = orig + h
            loss_plus = loss_fn()
            arr.flat[off] = orig - h
            loss_minus = loss_fn()
            arr.flat[off] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = grads[ai].flat[off]
            denom = max(abs(numeric) + abs(analytic), 1e-6)
            max_err = max(max_err, abs(numeric - analytic) / denom)
        best = min(best, max_err)
        if best <= resample_threshold or resample is None:
            break
        resample()
    return best
