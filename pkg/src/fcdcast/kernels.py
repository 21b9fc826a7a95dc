"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled module ``fcdcast._ckernels`` is used when it has been built
(``python setup.py build_ext --inplace`` or an editable install). Setting the
environment variable ``FCDCAST_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from fcdcast import _pykernels

_compiled = None
if not os.environ.get("FCDCAST_PURE_PYTHON"):
    try:
        from fcdcast import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"


def backends():
    """Available kernel modules, keyed by name."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def im2col(x, r, stride, pad):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.im2col(x, r, stride, pad)


def col2im(cols, x_shape, r, stride, pad):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(x_shape), r, stride, pad)


def maxpool_forward(x, r, stride):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.maxpool_forward(x, r, stride)


def maxpool_backward(dout, argmax, x_shape):
    return _impl.maxpool_backward(dout, argmax, tuple(x_shape))


def gather_rows(values, rows, starts, width):
    rows = np.asarray(rows, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    if rows.size:
        # the compiled path does no bounds checking
        if rows.min() < 0 or rows.max() >= values.shape[0]:
            raise IndexError("row index out of range")
        if starts.min() < 0 or starts.max() + width > values.shape[1]:
            raise IndexError("slot window out of range")
    return _impl.gather_rows(values, rows, starts, width)
