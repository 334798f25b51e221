"""Pure numpy implementations of the selective-scan recurrence.

Shapes follow the convention used throughout the sequence branch:
``a`` and ``bx`` are the per-step decay and driven input, both
``[N, L, D, S]``; ``c`` is the per-step readout ``[N, L, S]``. The
recurrence is ``h_k = a_k * h_{k-1} + bx_k`` (elementwise, ``h_0 = 0``)
with output ``y_k[n, d] = sum_s c_k[n, s] * h_k[n, d, s]``.

Two forward routes are provided: the sequential recurrence (one python
step per position, vectorized over everything else) and an associative
prefix scan combining pairs ``(a, b)`` as ``(a2*a1, a2*b1 + b2)`` in
``log2(L)`` strides. Both return the hidden states so the caller can run
the analytic backward pass.
"""

import numpy as np


def scan_forward(a, bx, c):
    """Sequential recurrence. Returns (y [N,L,D], h [N,L,D,S])."""
    n, length, d, s = a.shape
    h = np.empty_like(a)
    prev = np.zeros((n, d, s), dtype=a.dtype)
    for k in range(length):
        prev = a[:, k] * prev + bx[:, k]
        h[:, k] = prev
    y = np.einsum("nlds,nls->nld", h, c)
    return y, h


def scan_forward_assoc(a, bx, c):
    """Associative prefix-scan route; identical contract to scan_forward."""
    length = a.shape[1]
    acc_a = a.copy()
    acc_b = bx.copy()
    stride = 1
    while stride < length:
        right_a = acc_a[:, stride:]
        acc_b[:, stride:] = right_a * acc_b[:, :-stride] + acc_b[:, stride:]
        acc_a[:, stride:] = right_a * acc_a[:, :-stride]
        stride *= 2
    y = np.einsum("nlds,nls->nld", acc_b, c)
    return y, acc_b


def scan_backward(a, c, h, dy):
    """Adjoint of the recurrence. Returns (da, dbx, dc).

    ``h`` is the hidden-state stack saved by either forward route.
    """
    n, length, d, s = a.shape
    da = np.empty_like(a)
    dbx = np.empty_like(a)
    dc = np.einsum("nld,nlds->nls", dy, h)
    lam = np.zeros((n, d, s), dtype=a.dtype)
    for k in range(length - 1, -1, -1):
        lam = dy[:, k, :, None] * c[:, k, None, :] + lam
        dbx[:, k] = lam
        if k > 0:
            da[:, k] = lam * h[:, k - 1]
        else:
            da[:, k] = 0.0
        lam = a[:, k] * lam
    return da, dbx, dc
