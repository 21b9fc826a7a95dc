"""Pure numpy reference kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. These are
what runs when the extension is not built, and what the compiled versions are
tested against.
"""
import numpy as np


def im2col(x, r, stride, pad):
    """Unfold ``x`` of shape (B, C, H, W) into (B*OH*OW, C*r*r) patch rows."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - r) // stride + 1
    ow = (w + 2 * pad - r) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, r, r, oh, ow), dtype=np.float64)
    for j in range(r):
        jmax = j + stride * oh
        for k in range(r):
            kmax = k + stride * ow
            cols[:, :, j, k, :, :] = xp[:, :, j:jmax:stride, k:kmax:stride]
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(b * oh * ow, c * r * r)


def col2im(cols, x_shape, r, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back to (B, C, H, W)."""
    b, c, h, w = x_shape
    oh = (h + 2 * pad - r) // stride + 1
    ow = (w + 2 * pad - r) // stride + 1
    cols = cols.reshape(b, oh, ow, c, r, r).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for j in range(r):
        jmax = j + stride * oh
        for k in range(r):
            kmax = k + stride * ow
            xp[:, :, j:jmax:stride, k:kmax:stride] += cols[:, :, j, k, :, :]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool_forward(x, r, stride):
    """Max over r x r windows. Returns (out, argmax) where argmax is the flat
    index into the H*W plane of the winning element; ties go to the first
    element in row-major window order."""
    b, c, h, w = x.shape
    oh = (h - r) // stride + 1
    ow = (w - r) // stride + 1
    win = np.empty((b, c, oh, ow, r * r), dtype=np.float64)
    for j in range(r):
        for k in range(r):
            win[..., j * r + k] = x[:, :, j:j + stride * oh:stride, k:k + stride * ow:stride]
    pos = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, pos[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + pos // r
    cols = np.arange(ow)[None, :] * stride + pos % r
    return out, (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, argmax, x_shape):
    b, c, h, w = x_shape
    dx = np.zeros((b * c, h * w), dtype=np.float64)
    flat_idx = argmax.reshape(b * c, -1)
    src = dout.reshape(b * c, -1)
    np.add.at(dx, (np.arange(b * c)[:, None], flat_idx), src)
    return dx.reshape(x_shape)


def gather_rows(values, rows, starts, width):
    """out[i, j] = values[rows[i], starts[i] + j]."""
    rows = np.asarray(rows, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    idx = starts[:, None] + np.arange(width, dtype=np.int64)[None, :]
    return values[rows[:, None], idx]
