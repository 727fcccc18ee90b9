"""Dense 4-D tensor layer primitives with exact adjoints.

Tensors are plain ``numpy.ndarray`` objects laid out as (N, C, H, W) in
row-major order.  Every forward primitive here has a matching ``*_adjoint``
function that returns the exact vector-Jacobian product.  Layers keep the
dtype of their input, so the same code runs in float32 for training and in
float64 for gradient verification.

Per-sample loops are deliberate: each batch item is lowered and multiplied
with identically shaped BLAS calls, which keeps results bit-identical no
matter how a batch is split.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

__all__ = [
    "Parameter",
    "GradCheckReport",
    "check_tensor",
    "conv2d",
    "conv2d_adjoint",
    "relu",
    "relu_adjoint",
    "maxpool2x2",
    "maxpool2x2_adjoint",
    "transposed_conv2d",
    "transposed_conv2d_adjoint",
    "concat_channels",
    "split_channels",
    "sigmoid",
    "sigmoid_adjoint",
    "grad_check",
]


def check_tensor(x, name="input"):
    """Validate that ``x`` is a 4-D floating point array and return it."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


@dataclass
class Parameter:
    """A learnable tensor together with its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


# ---------------------------------------------------------------------------
# convolution


def _conv_padding(r, padding):
    if padding == "same":
        if r % 2 == 0:
            raise ConfigError(f"same padding needs an odd kernel size, got r={r}")
        return r // 2
    if padding == "valid":
        return 0
    raise ConfigError(f"unknown padding mode {padding!r}")


def _check_conv_args(x, kernel, bias):
    x = check_tensor(x)
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (outC, inC, r, r), got {kernel.shape}")
    out_c, in_c, kh, kw = kernel.shape
    if kh != kw:
        raise DimensionError(f"kernel must be square, got {kh}x{kw}")
    if in_c != x.shape[1]:
        raise DimensionError(
            f"kernel expects {in_c} input channels, input has {x.shape[1]}"
        )
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (out_c,):
            raise DimensionError(f"bias must have shape ({out_c},), got {bias.shape}")
    return x, kernel, bias


def _im2col(sample, r, pad):
    """Lower one (C, H, W) sample to a (Ho*Wo, C*r*r) patch matrix."""
    if pad:
        sample = np.pad(sample, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(sample, (r, r), axis=(1, 2))  # C, Ho, Wo, r, r
    c, ho, wo = windows.shape[:3]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * r * r)
    return cols, ho, wo


def conv2d(x, kernel, bias=None, padding="same"):
    """Stride-1 2-D cross-correlation.

    ``out[n, o, y, x] = bias[o] + sum_{c,i,j} in[n, c, y+i-r//2, x+j-r//2] * k[o, c, i, j]``
    with zeros outside the input for ``padding="same"``.
    """
    x, kernel, bias = _check_conv_args(x, kernel, bias)
    out_c, _, r, _ = kernel.shape
    pad = _conv_padding(r, padding)
    n, _, h, w = x.shape
    ho, wo = h + 2 * pad - r + 1, w + 2 * pad - r + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {r}x{r} larger than input {h}x{w}")
    dtype = np.result_type(x.dtype, kernel.dtype)
    kmat = kernel.reshape(out_c, -1).astype(dtype, copy=False)
    out = np.empty((n, out_c, ho, wo), dtype=dtype)
    for b in range(n):
        cols, _, _ = _im2col(x[b], r, pad)
        out[b] = (kmat @ cols.T).reshape(out_c, ho, wo)
    if bias is not None:
        out += bias.astype(dtype, copy=False)[None, :, None, None]
    return out


def conv2d_adjoint(x, kernel, grad_out, padding="same"):
    """Adjoint of :func:`conv2d`.

    Returns
    -------
    grad_input, grad_kernel, grad_bias
    """
    x, kernel, _ = _check_conv_args(x, kernel, None)
    out_c, in_c, r, _ = kernel.shape
    pad = _conv_padding(r, padding)
    n, _, h, w = x.shape
    ho, wo = h + 2 * pad - r + 1, w + 2 * pad - r + 1
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, out_c, ho, wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != conv output shape {(n, out_c, ho, wo)}"
        )
    dtype = np.result_type(x.dtype, kernel.dtype, grad_out.dtype)
    kmat = kernel.reshape(out_c, -1).astype(dtype, copy=False)
    grad_kmat = np.zeros_like(kmat)
    grad_in = np.zeros((n, in_c, h, w), dtype=dtype)
    for b in range(n):
        cols, _, _ = _im2col(x[b], r, pad)
        gmat = grad_out[b].reshape(out_c, ho * wo)
        grad_kmat += gmat @ cols
        gcols = (gmat.T @ kmat).reshape(ho, wo, in_c, r, r)
        gpad = np.zeros((in_c, h + 2 * pad, w + 2 * pad), dtype=dtype)
        for i in range(r):
            for j in range(r):
                gpad[:, i : i + ho, j : j + wo] += gcols[:, :, :, i, j].transpose(2, 0, 1)
        grad_in[b] = gpad[:, pad : pad + h, pad : pad + w]
    grad_bias = grad_out.sum(axis=(0, 2, 3)).astype(dtype, copy=False)
    return grad_in, grad_kmat.reshape(kernel.shape), grad_bias


# ---------------------------------------------------------------------------
# transposed convolution (2x2, stride 2)


def _check_tconv_args(x, kernel, stride):
    x = check_tensor(x)
    kernel = np.asarray(kernel)
    if stride != 2:
        raise ConfigError(f"only stride 2 is supported, got {stride}")
    if kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise DimensionError(f"kernel must be (inC, outC, 2, 2), got {kernel.shape}")
    if kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"kernel expects {kernel.shape[0]} input channels, input has {x.shape[1]}"
        )
    return x, kernel


def transposed_conv2d(x, kernel, bias=None, stride=2):
    """Learned 2x upsampling: every input pixel stamps a scaled 2x2 kernel.

    ``kernel`` has shape (inC, outC, 2, 2).
    """
    x, kernel = _check_tconv_args(x, kernel, stride)
    in_c, out_c = kernel.shape[:2]
    n, _, h, w = x.shape
    dtype = np.result_type(x.dtype, kernel.dtype)
    kmat = kernel.reshape(in_c, out_c * 4).astype(dtype, copy=False)
    out = np.empty((n, out_c, 2 * h, 2 * w), dtype=dtype)
    for b in range(n):
        t = kmat.T @ x[b].reshape(in_c, h * w)  # (O*2*2, H*W)
        out[b] = t.reshape(out_c, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(
            out_c, 2 * h, 2 * w
        )
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (out_c,):
            raise DimensionError(f"bias must have shape ({out_c},), got {bias.shape}")
        out += bias.astype(dtype, copy=False)[None, :, None, None]
    return out


def transposed_conv2d_adjoint(x, kernel, grad_out, stride=2):
    """Adjoint of :func:`transposed_conv2d`; returns (grad_input, grad_kernel, grad_bias).

    ``grad_input`` is the stride-2 valid convolution of ``grad_out`` with ``kernel``.
    """
    x, kernel = _check_tconv_args(x, kernel, stride)
    in_c, out_c = kernel.shape[:2]
    n, _, h, w = x.shape
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, out_c, 2 * h, 2 * w):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != output shape {(n, out_c, 2 * h, 2 * w)}"
        )
    dtype = np.result_type(x.dtype, kernel.dtype, grad_out.dtype)
    kmat = kernel.reshape(in_c, out_c * 4).astype(dtype, copy=False)
    grad_kmat = np.zeros_like(kmat)
    grad_in = np.empty((n, in_c, h, w), dtype=dtype)
    for b in range(n):
        g = grad_out[b].reshape(out_c, h, 2, w, 2).transpose(0, 2, 4, 1, 3)
        g = g.reshape(out_c * 4, h * w)
        xm = x[b].reshape(in_c, h * w)
        grad_in[b] = (kmat @ g).reshape(in_c, h, w)
        grad_kmat += xm @ g.T
    grad_bias = grad_out.sum(axis=(0, 2, 3)).astype(dtype, copy=False)
    return grad_in, grad_kmat.reshape(kernel.shape), grad_bias


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x):
    return np.maximum(x, 0)


def relu_adjoint(x, grad_out):
    """Mask ``grad_out`` by ``x > 0``; the derivative at exactly 0 is 0."""
    return np.where(x > 0, grad_out, 0).astype(np.result_type(x, grad_out), copy=False)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_adjoint(out, grad_out):
    """Adjoint of :func:`sigmoid` given its *output* ``out``."""
    return out * (1 - out) * grad_out


def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and the in-window argmax (0..3, row-major).
    Ties go to the first window element.
    """
    x = check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_adjoint(grad_out, argmax, input_shape):
    """Route ``grad_out`` back to the stored argmax positions."""
    n, c, h, w = input_shape
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, c, h // 2, w // 2) or argmax.shape != grad_out.shape:
        raise DimensionError(
            f"grad_out {grad_out.shape} / argmax {argmax.shape} do not match "
            f"pooled shape {(n, c, h // 2, w // 2)}"
        )
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h, w)


def concat_channels(a, b):
    a, b = check_tensor(a, "a"), check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"cannot concatenate {a.shape} and {b.shape}: N, H, W must agree"
        )
    return np.concatenate([a, b], axis=1)


def split_channels(grad_out, channels_a):
    """Adjoint of :func:`concat_channels`."""
    return grad_out[:, :channels_a], grad_out[:, channels_a:]


# ---------------------------------------------------------------------------
# verification harness


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol):
        return self.max_rel_error < tol


def grad_check(func, grad, x, step=1e-5, n_samples=None, rng=None):
    """Compare an analytic gradient against central finite differences.

    Parameters
    ----------
    func : callable
        Scalar function of the array ``x``.
    grad : callable
        Returns the analytic gradient of ``func`` at ``x`` (same shape).
    x : np.ndarray
        Evaluation point; promoted to float64.
    step : float
        Finite-difference step.
    n_samples : int, optional
        Check only this many randomly chosen coordinates.

    Returns
    -------
    GradCheckReport
        ``max_rel_error`` is ``max|a - n| / max(max|a|, max|n|)`` over the
        checked coordinates, a scale-aware relative error that is not
        dominated by coordinates whose true gradient is ~0.
    """
    x = np.array(x, dtype=np.float64)
    analytic_full = np.asarray(grad(x.copy()), dtype=np.float64)
    if analytic_full.shape != x.shape:
        raise DimensionError(
            f"gradient shape {analytic_full.shape} != input shape {x.shape}"
        )
    flat_idx = np.arange(x.size)
    if n_samples is not None and n_samples < x.size:
        rng = np.random.default_rng(rng)
        flat_idx = np.sort(rng.choice(x.size, size=n_samples, replace=False))
    numeric = np.empty(len(flat_idx))
    xf = x.reshape(-1)
    for k, i in enumerate(flat_idx):
        orig = xf[i]
        xf[i] = orig + step
        fp = func(x)
        xf[i] = orig - step
        fm = func(x)
        xf[i] = orig
        numeric[k] = (fp - fm) / (2 * step)
    analytic = analytic_full.reshape(-1)[flat_idx]
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0))
    err = np.abs(analytic - numeric).max(initial=0)
    rel = 0.0 if scale == 0 else float(err / scale)
    return GradCheckReport(rel, len(flat_idx), analytic, numeric)
