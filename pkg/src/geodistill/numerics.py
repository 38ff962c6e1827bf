"""Dense float64 tensor kernels shared by every module.

All functions take and return numpy float64 arrays, never mutate their
inputs, and use deterministic reduction orders so repeated runs are
bit-identical.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict

import numpy as np

from .errors import FormatError, NumericError, ShapeError


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


@dataclass
class LossResult:
    """Scalar loss value plus its gradient w.r.t. the differentiated input.

    ``grad`` is an ndarray for single-tensor losses, a list of ndarrays
    for per-target losses, or a dict keyed by parameter name for
    composed losses.  ``empty`` marks degenerate calls that had nothing
    to supervise (value 0, zero gradient).
    """

    value: float
    grad: Any
    empty: bool = False
    components: Dict[str, float] = field(default_factory=dict)


def matmul(a, b) -> np.ndarray:
    """Matrix product with ascending-index summation over the inner axis.

    The contraction accumulates k = 0, 1, ... in order, so the result is
    bit-identical to a scalar triple loop with the k loop innermost.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents disagree: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def frobenius_sq_distance(a, b) -> float:
    """Sum of squared elementwise differences."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def softmax_rows(logits) -> np.ndarray:
    """Softmax over the trailing axis, with max-subtraction for stability."""
    logits = as_tensor(logits)
    if logits.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty trailing axis")
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Serves as the independent oracle for every analytic gradient in the
    package; it only ever calls ``f`` as a black box.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_tensor(x)
    # flatten through a copy: reshape(-1) on a strided view would not give a
    # writable alias, so accumulate into a fresh flat buffer instead
    flat = np.ascontiguousarray(x).reshape(-1)
    grad = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        fp = float(f(xp.reshape(x.shape)))
        xm = flat.copy()
        xm[i] -= h
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function evaluated non-finite at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# TSR v1 text format
#
#   line 1:  TSR 1
#   line 2:  whitespace-separated extents
#   rest:    row-major values, written with shortest round-trip precision
# ---------------------------------------------------------------------------


def write_tsr(dest, arr) -> None:
    """Write a tensor in TSR v1 format to a path or text file object."""
    arr = as_tensor(arr)
    if arr.ndim < 1:
        raise ShapeError("TSR tensors need at least one extent")
    if not np.all(np.isfinite(arr)):
        raise FormatError("TSR tensors must be finite")
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w") as fobj:
            _write_tsr_body(fobj, arr)
    else:
        _write_tsr_body(dest, arr)


def _write_tsr_body(fobj, arr: np.ndarray) -> None:
    fobj.write("TSR 1\n")
    fobj.write(" ".join(str(e) for e in arr.shape) + "\n")
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
    for row in rows:
        fobj.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_tsr(src) -> np.ndarray:
    """Read a TSR v1 tensor from a path or text file object."""
    if isinstance(src, (str, os.PathLike)):
        with open(src) as fobj:
            return _read_tsr_body(fobj)
    return _read_tsr_body(src)


def _read_tsr_body(fobj) -> np.ndarray:
    header = fobj.readline().strip()
    if header != "TSR 1":
        raise FormatError(f"expected 'TSR 1' header, got {header!r}")
    try:
        shape = tuple(int(tok) for tok in fobj.readline().split())
    except ValueError as exc:
        raise FormatError(f"bad extents line: {exc}") from exc
    if not shape or any(e < 1 for e in shape):
        raise FormatError(f"extents must be positive, got {shape}")
    count = int(np.prod(shape))
    values = np.empty(count)
    have = 0
    for line in fobj:
        toks = line.split()
        if not toks:
            continue
        if have + len(toks) > count:
            raise FormatError("more values than the extents allow")
        try:
            values[have : have + len(toks)] = [float(t) for t in toks]
        except ValueError as exc:
            raise FormatError(f"bad value token: {exc}") from exc
        have += len(toks)
        if have == count:
            break
    if have != count:
        raise FormatError(f"expected {count} values, got {have}")
    if not np.all(np.isfinite(values)):
        raise FormatError("TSR stream contains non-finite values")
    return values.reshape(shape)


def tsr_string(arr) -> str:
    """Serialize a tensor to an in-memory TSR v1 string."""
    buf = io.StringIO()
    write_tsr(buf, arr)
    return buf.getvalue()
