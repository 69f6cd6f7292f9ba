"""Dense layers, losses, initialisation and the RMSPROP optimiser.

Everything works on plain numpy arrays. Batched tensors are laid out
``(N, C, H, W)`` for convolutions and ``(N, F)`` for fully connected layers;
unbatched inputs are accepted and promoted where noted. Arrays keep the dtype
they are given, so the same code runs in float32 for training and float64 for
gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

LAYER_KINDS = ("conv2d", "fully_connected", "relu", "dropout", "concat", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a network's layer list.

    ``extents`` holds the kind-specific sizes: ``(out_channels, in_channels, k)``
    for conv2d, ``(out_features, in_features)`` for fully_connected, ``(p,)`` for
    dropout, ``(width_a, width_b)`` for concat.
    """

    kind: str
    name: str
    extents: Tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")


# ---------------------------------------------------------------------------
# convolution


def _as_batch(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d or {ndim}-d array, got shape {x.shape}")
    return x, False


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray]) -> None:
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"weights must be [C_out, C_in, k, k], got {weights.shape}")
    c_out, c_in, k, _ = weights.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"channel axis mismatch: input has {x.shape[1]} channels, weights expect {c_in}")
    if x.shape[2] < k:
        raise ShapeError(f"height axis too small: {x.shape[2]} < kernel {k}")
    if x.shape[3] < k:
        raise ShapeError(f"width axis too small: {x.shape[3]} < kernel {k}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias axis mismatch: expected ({c_out},), got {bias.shape}")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold channels-last ``(N, H, W, C)`` into ``(N*Ho*Wo, k*k*C)`` rows.

    Row order is (n, y, x); column order is (i, j, c).
    """
    n, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    windows = sliding_window_view(x, (k, k), axis=(1, 2))  # N, Ho, Wo, C, k, k
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def weight_matrix(weights: np.ndarray) -> np.ndarray:
    """``[C_out, C_in, k, k]`` -> ``[C_out, k*k*C_in]`` matching :func:`im2col` columns."""
    return np.ascontiguousarray(weights.transpose(0, 2, 3, 1)).reshape(weights.shape[0], -1)


# OpenBLAS picks different kernels (with different rounding) depending on the
# matrix shape. Running every row-wise product in fixed-size row blocks makes
# a row's result independent of how many other rows share the call.
ROW_BLOCK = 256


def row_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for 2-D ``a``, computed in zero-padded blocks of ``ROW_BLOCK`` rows."""
    n = a.shape[0]
    pad = (-n) % ROW_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]), dtype=a.dtype)])
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for i in range(0, a.shape[0], ROW_BLOCK):
        np.matmul(a[i:i + ROW_BLOCK], b, out=out[i:i + ROW_BLOCK])
    return out[:n]


def conv_forward_nhwc(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Channels-last convolution; returns ``(output, cols)`` with cols kept for backward."""
    n, h, w, _ = x.shape
    c_out, _, k, _ = weights.shape
    cols = im2col(x, k)
    out = row_matmul(cols, weight_matrix(weights).T)
    out += bias
    return out.reshape(n, h - k + 1, w - k + 1, c_out), cols


def conv_backward_nhwc(grad_out: np.ndarray, input_shape, weights: np.ndarray, cols: np.ndarray,
                       need_input_grad: bool = True):
    n, h, w, c_in = input_shape
    c_out, _, k, _ = weights.shape
    ho, wo = h - k + 1, w - k + 1
    g2 = grad_out.reshape(n * ho * wo, c_out)
    weight_grad = (g2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
    bias_grad = g2.sum(axis=0)
    input_grad = None
    if need_input_grad:
        dcols = (g2 @ weight_matrix(weights)).reshape(n, ho, wo, k, k, c_in)
        input_grad = np.zeros(input_shape, dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                input_grad[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    return input_grad, np.ascontiguousarray(weight_grad), bias_grad


def _conv_direct(x, weights):
    n, _, h, w = x.shape
    c_out, _, k, _ = weights.shape
    ho, wo = h - k + 1, w - k + 1
    out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(x, weights))
    for i in range(k):
        for j in range(k):
            # (N, C_in, Ho, Wo) x (C_out, C_in) -> (N, C_out, Ho, Wo)
            out += np.einsum("nchw,oc->nohw", x[:, :, i:i + ho, j:j + wo], weights[:, :, i, j])
    return out


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   method: str = "im2col") -> np.ndarray:
    """Valid, stride-1 cross-correlation plus bias on ``[C, H, W]`` or ``[N, C, H, W]``.

    ``out[o, y, x] = bias[o] + sum_{c,i,j} x[c, y+i, x+j] * weights[o, c, i, j]``
    """
    x, squeeze = _as_batch(np.asarray(x), 4)
    _check_conv_shapes(x, weights, bias)
    if method == "im2col":
        out_nhwc, _ = conv_forward_nhwc(to_nhwc(x), weights, bias)
        out = to_nchw(out_nhwc)
    elif method == "direct":
        out = _conv_direct(x, weights) + bias[None, :, None, None]
    else:
        raise ValidationError(f"unknown convolution method {method!r}")
    return out[0] if squeeze else out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    need_input_grad: bool = True):
    """Adjoint of :func:`conv2d_forward`: ``(input_grad, weight_grad, bias_grad)``."""
    x, squeeze = _as_batch(np.asarray(x), 4)
    grad_out, _ = _as_batch(np.asarray(grad_out), 4)
    _check_conv_shapes(x, weights, None)
    c_out, _, k, _ = weights.shape
    n, _, h, w = x.shape
    expected = (n, c_out, h - k + 1, w - k + 1)
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient shape {grad_out.shape} does not match forward output {expected}")
    xh = to_nhwc(x)
    cols = im2col(xh, k)
    gx, gw, gb = conv_backward_nhwc(to_nhwc(grad_out), xh.shape, weights, cols, need_input_grad)
    if gx is not None:
        gx = to_nchw(gx)
        if squeeze:
            gx = gx[0]
    return gx, gw, gb


# ---------------------------------------------------------------------------
# fully connected, activations, dropout, loss


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``out = W x + b`` for a vector ``x`` or row-wise for a batch ``(N, in)``."""
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input length {x.shape[-1]} does not match weight columns {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias length {bias.shape} does not match weight rows {weights.shape[0]}")
    if x.ndim == 1:
        return row_matmul(x[None], weights.T)[0] + bias
    return row_matmul(x, weights.T) + bias


def fully_connected_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                             need_input_grad: bool = True):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    weight_grad = g2.T @ x2
    bias_grad = g2.sum(axis=0)
    input_grad = (grad_out @ weights) if need_input_grad else None
    return input_grad, weight_grad, bias_grad


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ValidationError(f"drop probability must lie in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) * dtype(1.0 / (1.0 - p))


def dropout(x: np.ndarray, p: float, mode: str = "train",
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if not 0 <= p < 1:
        raise ValidationError(f"drop probability must lie in [0, 1), got {p}")
    if mode == "infer" or p == 0:
        return x
    if mode != "train":
        raise ValidationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ValidationError("train-mode dropout needs a random generator")
    return x * dropout_mask(x.shape, p, rng, x.dtype.type)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Binary softmax + cross-entropy.

    Accepts a single ``[2]`` logit vector with an int label, or a batch
    ``(N, 2)`` with ``(N,)`` labels, in which case the loss and gradient are
    averaged over the batch. Returns ``(loss, probabilities, logit_grad)``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    if z.shape[-1] != 2:
        raise ShapeError(f"expected exactly 2 logits per sample, got {z.shape[-1]}")
    if not np.all(np.isfinite(z)):
        raise ValidationError("non-finite logits")
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    probs = np.exp(log_p)
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = -log_p[rows, y].sum() / n
    grad = probs.copy()
    grad[rows, y] -= 1
    grad /= n
    if single:
        return float(loss), probs[0], grad[0]
    return float(loss), probs, grad


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                dtype=np.float32) -> np.ndarray:
    """Uniform Glorot draw on ``[-L, L]`` with ``L = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValidationError(f"fans must be positive, got fan_in={fan_in} fan_out={fan_out}")
    limit = glorot_limit(fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# parameters and optimiser


@dataclass
class ParameterStore:
    """Ordered named parameters with matching gradient and RMSPROP buffers."""

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    accum: Dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.accum[name] = np.zeros_like(value)
        return value

    def names(self) -> List[str]:
        return list(self.params)

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    @property
    def dtype(self):
        first = next(iter(self.params.values()))
        return first.dtype

    def size(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value.astype(dtype))
            out.accum[name] = self.accum[name].astype(dtype)
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)


def rmsprop_step(store: ParameterStore, learning_rate: float = 1e-3, decay: float = 0.9,
                 epsilon: float = 1e-8) -> ParameterStore:
    """In-place RMSPROP update; gradients are cleared afterwards."""
    if learning_rate <= 0:
        raise ValidationError(f"learning rate must be positive, got {learning_rate}")
    if not 0 <= decay < 1:
        raise ValidationError(f"decay must lie in [0, 1), got {decay}")
    for name, w in store.params.items():
        g = store.grads[name]
        r = store.accum[name]
        r *= decay
        r += (1 - decay) * g * g
        w -= learning_rate * g / np.sqrt(r + epsilon)
        g.fill(0)
    return store


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    per_parameter: Dict[str, float]
    tolerance: float
    checked_entries: int
    kink_crossings: int = 0

    @property
    def max_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(loss_and_grad: Callable[[bool], object], store: ParameterStore, step: float = 1e-5,
                   tolerance: float = 1e-4, entries_per_parameter: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad(True)`` computes the loss from ``store.params`` and writes
    the analytic gradient into ``store.grads``. ``loss_and_grad(False)`` returns
    the loss alone, or ``(loss, signature)`` where the signature identifies the
    piecewise-linear region; a probe whose signatures differ from the
    unperturbed one straddles a kink and is skipped. With
    ``entries_per_parameter`` set, that many entries of each tensor are probed
    instead of all.
    """
    if store.dtype != np.float64:
        raise ValidationError("gradient checks need float64 parameters")
    store.zero_grad()
    loss_and_grad(True)
    analytic = {name: g.copy() for name, g in store.grads.items()}
    base = loss_and_grad(False)
    base_sig = base[1] if isinstance(base, tuple) else None
    gen = rng if rng is not None else np.random.default_rng(0)

    def probe():
        out = loss_and_grad(False)
        return out if isinstance(out, tuple) else (out, None)

    errors: Dict[str, float] = {}
    checked = crossings = 0
    for name, w in store.params.items():
        flat = w.reshape(-1)
        want = flat.size if entries_per_parameter is None else min(entries_per_parameter, flat.size)
        order = np.arange(flat.size) if want == flat.size else gen.permutation(flat.size)
        got_a, got_n = [], []
        for i in order:
            if len(got_n) == want:
                break
            orig = flat[i]
            flat[i] = orig + step
            plus, sig_p = probe()
            flat[i] = orig - step
            minus, sig_m = probe()
            flat[i] = orig
            if base_sig is not None and (sig_p != base_sig or sig_m != base_sig):
                crossings += 1
                continue
            got_a.append(analytic[name].reshape(-1)[i])
            got_n.append((plus - minus) / (2 * step))
        if got_n:
            errors[name] = float(relative_error(np.array(got_a), np.array(got_n)).max())
        checked += len(got_n)
    store.zero_grad()
    return GradCheckReport(errors, tolerance, checked, crossings)
