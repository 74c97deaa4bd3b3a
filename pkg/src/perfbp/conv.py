"""2-D convolution (cross-correlation) and max pooling on NCHW arrays.

Convolutions are lowered to a single matrix product through ``im2col``:
every output location becomes one row holding the receptive field, ordered
``(channel, kernel_row, kernel_col)`` to match a ``(out, in, kh, kw)`` kernel
reshaped to ``(out, in * kh * kw)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold ``x`` of shape (B, C, H, W) into rows of shape (B*Ho*Wo, C*kh*kw)."""
    B, C, H, W = x.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)


def col2im(rows, x_shape, kh, kw, stride=1, padding=0, transposed=False):
    """Adjoint of :func:`im2col`: scatter-add row gradients back to (B, C, H, W).

    With ``transposed`` the input is the (C*kh*kw, B*Ho*Wo) transpose of the
    rows, which is the cheaper layout to scatter from.
    """
    B, C, H, W = x_shape
    Ho = output_size(H, kh, stride, padding)
    Wo = output_size(W, kw, stride, padding)
    if transposed:
        d = rows.reshape(C, kh, kw, B, Ho, Wo)
    else:
        d = rows.T.reshape(C, kh, kw, B, Ho, Wo)
    out = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=rows.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += d[:, ky, kx]
    if padding:
        out = out[:, :, padding:padding + H, padding:padding + W]
    return out.transpose(1, 0, 2, 3)


def conv2d_eval(input, kernel, bias=0.0, stride=1, padding=0):
    """Cross-correlate ``input`` with ``kernel``.

    Accepts (H, W), (C, H, W) or (B, C, H, W) inputs and (kh, kw),
    (C, kh, kw) or (O, C, kh, kw) kernels; the result drops the leading axes
    that were absent from both arguments.  ``bias`` is a scalar or one value
    per output channel.
    """
    x = np.asarray(input, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    squeeze_batch = x.ndim < 4
    squeeze_out = k.ndim < 4
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if k.ndim == 2:
        k = k[None, None]
    elif k.ndim == 3:
        k = k[None]
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"unsupported ranks: input {np.ndim(input)}, kernel {np.ndim(kernel)}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    B, _, H, W = x.shape
    O, _, kh, kw = k.shape
    rows = im2col(x, kh, kw, stride, padding)
    Ho, Wo = output_size(H, kh, stride, padding), output_size(W, kw, stride, padding)
    out = rows @ k.reshape(O, -1).T + np.broadcast_to(np.asarray(bias, dtype=np.float64), (O,))
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if squeeze_out:
        out = out[:, 0]
    if squeeze_batch:
        out = out[0]
    return out


def maxpool2d(x, k):
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped.

    Returns the pooled array and, per window, the flat index (row-major
    inside the window) of the first maximum, which :func:`maxpool2d_backward`
    needs.
    """
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"pool size {k} larger than input {H}x{W}")
    views = [x[:, :, dy:Ho * k:k, dx:Wo * k:k] for dy in range(k) for dx in range(k)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)
    arg = np.full(out.shape, k * k - 1, dtype=np.int64)
    for j in range(k * k - 2, -1, -1):
        arg = np.where(views[j] == out, j, arg)
    return out, arg


def maxpool2d_backward(dout, arg, x_shape, k):
    B, C, H, W = x_shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for j in range(k * k):
        dy, dxo = divmod(j, k)
        dx[:, :, dy:Ho * k:k, dxo:Wo * k:k] = dout * (arg == j)
    return dx
