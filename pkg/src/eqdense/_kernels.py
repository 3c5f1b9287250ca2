"""Hot convolution kernels with backend selection at import time.

The compiled extension ``eqdense._ckernels`` is used when it was built;
otherwise the pure-numpy implementations below are used.  Setting the
environment variable ``EQDENSE_PURE_PYTHON=1`` forces the numpy path.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col_numpy(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Lower ``x[N,C,H,W]`` to patch rows of shape ``[C*kh*kw, N*Ho*Wo]``."""
    N, C, H, W = x.shape
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    cols = windows.transpose(1, 4, 5, 0, 2, 3)
    return np.ascontiguousarray(cols).reshape(C * kh * kw, -1)


def col2im_numpy(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add patch rows into ``shape``."""
    N, C, H, W = shape
    Ho, Wo = H - kh + 1, W - kw + 1
    out = np.zeros(shape, dtype=cols.dtype)
    blocks = cols.reshape(C, kh, kw, N, Ho, Wo)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + Ho, v:v + Wo] += blocks[:, u, v].transpose(1, 0, 2, 3)
    return out


BACKEND = "numpy"
im2col = im2col_numpy
col2im = col2im_numpy

if os.environ.get("EQDENSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from eqdense._ckernels import col2im as _c_col2im
        from eqdense._ckernels import im2col as _c_im2col
    except ImportError:
        pass
    else:
        im2col = _c_im2col
        col2im = _c_col2im
        BACKEND = "cython"


def available_backends() -> dict:
    """Map backend name to its ``(im2col, col2im)`` pair."""
    backends = {"numpy": (im2col_numpy, col2im_numpy)}
    try:
        from eqdense import _ckernels
    except ImportError:
        return backends
    backends["cython"] = (_ckernels.im2col, _ckernels.col2im)
    return backends
