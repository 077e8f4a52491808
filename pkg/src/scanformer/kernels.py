"""Hot forward kernels with a compiled backend and a numpy fallback.

The compiled extension (``scanformer._kernels``) is used when it imports;
set ``SCANFORMER_KERNELS=python`` to force the numpy implementation.
``BACKEND`` names the active one.
"""
from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError


def attention_py(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray, scale: float) -> np.ndarray:
    """Reference numpy path over ``(G, n, dh)`` stacks; ``bias`` is ``(G, nq, nk)``."""
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * q.dtype.type(scale) + bias
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return np.matmul(s, v)


def downsample2x_py(img: np.ndarray) -> np.ndarray:
    h, w, c = img.shape
    return img.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3), dtype=np.float64).astype(img.dtype)


_attention_impl = attention_py
_downsample_impl = downsample2x_py
BACKEND = "python"

if os.environ.get("SCANFORMER_KERNELS", "").lower() != "python":
    try:
        from . import _kernels
    except ImportError:  # extension not built
        _kernels = None
    if _kernels is not None:
        _attention_impl = _kernels.attention_forward
        _downsample_impl = _kernels.downsample2x
        BACKEND = "compiled"


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


@contextmanager
def use_backend(name: str):
    """Temporarily route the default kernels to ``"compiled"`` or ``"python"``."""
    global _attention_impl, _downsample_impl, BACKEND
    saved = _attention_impl, _downsample_impl, BACKEND
    if name == "python":
        _attention_impl, _downsample_impl = attention_py, downsample2x_py
    elif name == "compiled":
        from . import _kernels
        _attention_impl, _downsample_impl = _kernels.attention_forward, _kernels.downsample2x
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    try:
        yield
    finally:
        _attention_impl, _downsample_impl, BACKEND = saved


def attention(q, k, v, bias=None, scale: float | None = None, backend: str | None = None) -> np.ndarray:
    """softmax(q k^T * scale + bias) v over arbitrary leading dims.

    q: (..., nq, dh); k, v: (..., nk, dh); bias broadcastable to (..., nq, nk).
    """
    if q.shape[:-2] != k.shape[:-2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    lead, nq, dh = q.shape[:-2], q.shape[-2], q.shape[-1]
    nk = k.shape[-2]
    scale = 1.0 / np.sqrt(dh) if scale is None else scale
    dtype = q.dtype
    g = int(np.prod(lead)) if lead else 1
    q3 = np.ascontiguousarray(q.reshape(g, nq, dh), dtype=dtype)
    k3 = np.ascontiguousarray(k.reshape(g, nk, dh), dtype=dtype)
    v3 = np.ascontiguousarray(v.reshape(g, nk, dh), dtype=dtype)
    if bias is None:
        b3 = np.zeros((g, nq, nk), dtype=dtype)
    else:
        b3 = np.ascontiguousarray(np.broadcast_to(np.asarray(bias, dtype=dtype), lead + (nq, nk)).reshape(g, nq, nk))
    impl = _attention_impl
    if backend == "python":
        impl = attention_py
    elif backend == "compiled":
        from . import _kernels
        impl = _kernels.attention_forward
    if impl is attention_py:
        out = attention_py(q3, k3, v3, b3, scale)
    else:
        out = impl(q3, k3, v3, b3, float(scale))
    return out.reshape(lead + (nq, dh))


def downsample2x(img: np.ndarray, backend: str | None = None) -> np.ndarray:
    img = np.ascontiguousarray(img)
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise DimensionError(f"downsample2x needs even sides, got {img.shape}")
    if backend == "python":
        return downsample2x_py(img)
    if backend == "compiled":
        from . import _kernels
        return _kernels.downsample2x(img)
    return _downsample_impl(img)
