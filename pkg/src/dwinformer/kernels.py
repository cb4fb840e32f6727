"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``DWINFORMER_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from dwinformer import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DWINFORMER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dwinformer import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def use_backend(name):
    """Switch kernels at runtime (``"cython"`` or ``"python"``). Used by the benchmark."""
    global _impl, BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from dwinformer import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def im2col(xpad, kh, kw, stride, oh, ow):
    return _impl.im2col(xpad, kh, kw, stride, oh, ow)


def col2im(dcols, hp, wp, stride):
    return _impl.col2im(dcols, hp, wp, stride)


def dwconv_forward(xpad, w, stride, oh, ow):
    return _impl.dwconv_forward(xpad, w, stride, oh, ow)


def dwconv_backward(xpad, w, dy, stride):
    return _impl.dwconv_backward(xpad, w, dy, stride)
