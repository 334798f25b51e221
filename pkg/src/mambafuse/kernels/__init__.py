"""Scan kernel backend selection.

The sequential recurrence ships in two forms: a Cython extension
(``mambafuse.kernels._scan``) and a numpy fallback. The compiled form is
used when it imported successfully, unless ``MAMBAFUSE_NO_EXT`` is set in
the environment. The associative prefix-scan route is always the numpy
implementation (it is already vectorized over log2(L) strides).
"""

import os

import numpy as np

from . import scan_numpy

try:
    from . import _scan as _compiled
except ImportError:
    _compiled = None

COMPILED_AVAILABLE = _compiled is not None


def use_compiled() -> bool:
    return COMPILED_AVAILABLE and not os.environ.get("MAMBAFUSE_NO_EXT")


def scan_forward(a, bx, c):
    if use_compiled():
        return _compiled.scan_forward(np.ascontiguousarray(a),
                                      np.ascontiguousarray(bx),
                                      np.ascontiguousarray(c))
    return scan_numpy.scan_forward(a, bx, c)


def scan_backward(a, c, h, dy):
    if use_compiled():
        return _compiled.scan_backward(np.ascontiguousarray(a),
                                       np.ascontiguousarray(c),
                                       np.ascontiguousarray(h),
                                       np.ascontiguousarray(dy))
    return scan_numpy.scan_backward(a, c, h, dy)


scan_forward_assoc = scan_numpy.scan_forward_assoc
