"""Instrumented dense block kernels.

Every factorization and inversion routine in the package reaches LAPACK and
BLAS only through the four functions defined here. Each call is recorded in
the :class:`KernelLedger` that is active in the current context (if any),
keyed by kernel kind and by the shape class of the block-operation count
table (``"b3"``, ``"ab2"``, ``"a2b"``, ``"a3"``). Shape classes are assigned
by the caller, since a kernel cannot tell ``a`` from ``b`` by looking at
array shapes.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import time
from collections import defaultdict

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import AsymmetryDetected, NotPositiveDefinite, ShapeMismatch, SingularTriangular

__all__ = [
    "KernelLedger",
    "current_ledger",
    "chol_lower",
    "solve_lower_right",
    "invert_lower",
    "gemm_acc",
    "KINDS",
    "SHAPE_CLASSES",
]

KINDS = ("POTRF", "TRSM", "GEMM")
SHAPE_CLASSES = ("b3", "ab2", "a2b", "a3")
SYMMETRY_RTOL = 1e-12

_ACTIVE: contextvars.ContextVar["KernelLedger | None"] = contextvars.ContextVar(
    "btaselinv_ledger", default=None
)


class KernelLedger:
    """Per-rank tally of kernel calls, modeled FLOPs and wall time.

    Counters are keyed by ``(kind, shape_class)``. A ledger only records
    while it is active, see :meth:`active`.
    """

    def __init__(self):
        self.calls: dict[tuple[str, str], int] = defaultdict(int)
        self.flops: dict[tuple[str, str], float] = defaultdict(float)
        self.seconds: dict[str, float] = defaultdict(float)

    def record(self, kind: str, cls: str, flops: float, seconds: float = 0.0) -> None:
        if kind not in KINDS or cls not in SHAPE_CLASSES:
            raise ValueError(f"unknown ledger key ({kind}, {cls})")
        self.calls[(kind, cls)] += 1
        self.flops[(kind, cls)] += flops
        self.seconds[kind] += seconds

    def count(self, kind: str, cls: str) -> int:
        return self.calls.get((kind, cls), 0)

    def counts(self) -> dict[tuple[str, str], int]:
        """Nonzero call counts as a plain dict."""
        return {k: v for k, v in self.calls.items() if v}

    def total_flops(self) -> float:
        return float(sum(self.flops.values()))

    def reset(self) -> None:
        self.calls.clear()
        self.flops.clear()
        self.seconds.clear()

    def merge(self, other: "KernelLedger") -> "KernelLedger":
        """Add the tallies of ``other`` into this ledger and return self."""
        for k, v in other.calls.items():
            self.calls[k] += v
        for k, v in other.flops.items():
            self.flops[k] += v
        for k, v in other.seconds.items():
            self.seconds[k] += v
        return self

    @classmethod
    def merged(cls, ledgers) -> "KernelLedger":
        out = cls()
        for led in ledgers:
            out.merge(led)
        return out

    def to_records(self) -> list[dict]:
        """Rows ``{kernel, shape_class, calls, flops}`` in a fixed order."""
        rows = []
        for kind in KINDS:
            for cls in SHAPE_CLASSES:
                calls = self.calls.get((kind, cls), 0)
                if calls:
                    rows.append(
                        {
                            "kernel": kind,
                            "shape_class": cls,
                            "calls": calls,
                            "flops": self.flops[(kind, cls)],
                        }
                    )
        return rows

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_records(), **kwargs)

    @contextlib.contextmanager
    def active(self):
        """Make this ledger the recording target inside a ``with`` block."""
        token = _ACTIVE.set(self)
        try:
            yield self
        finally:
            _ACTIVE.reset(token)


def current_ledger() -> KernelLedger | None:
    """Return the ledger active in the current context, if any."""
    return _ACTIVE.get()


def _record(kind: str, cls: str, flops: float, t0: float) -> None:
    led = _ACTIVE.get()
    if led is not None:
        led.record(kind, cls, flops, time.perf_counter() - t0)


def _check_diag(L: np.ndarray) -> None:
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeMismatch(f"triangular operand must be square, got {L.shape}")
    zero = np.flatnonzero(np.diagonal(L) == 0.0)
    if zero.size:
        raise SingularTriangular(f"zero diagonal entry at index {int(zero[0])}")


def chol_lower(S: np.ndarray, cls: str = "b3", block: int | None = None) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite block.

    Parameters
    ----------
    S : ndarray
        Square symmetric block. Symmetry is checked to ``1e-12`` relative.
    cls : str, optional
        Shape class recorded in the ledger.
    block : int, optional
        Block index reported in errors.

    Returns
    -------
    ndarray
        ``L`` with ``L @ L.T == S`` and a strictly positive diagonal.

    Raises
    ------
    NotPositiveDefinite
        With ``pivot`` set to the zero-based failing pivot.
    """
    t0 = time.perf_counter()
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeMismatch(f"Cholesky operand must be square, got {S.shape}")
    scale = np.max(np.abs(S)) if S.size else 0.0
    if S.size and np.max(np.abs(S - S.T)) > SYMMETRY_RTOL * scale:
        raise AsymmetryDetected(f"block {block}: Cholesky operand is not symmetric")
    s = S.shape[0]
    if s == 0:
        L = S.copy()
    else:
        c, info = lapack.dpotrf(S, lower=1, clean=1, overwrite_a=0)
        if info > 0:
            raise NotPositiveDefinite(
                f"block {block}: non-positive pivot at index {info - 1}",
                pivot=int(info - 1),
                block=block,
            )
        if info < 0:
            raise ValueError(f"dpotrf rejected argument {-info}")
        L = np.tril(c)
    _record("POTRF", cls, s**3 / 3.0, t0)
    return L


def solve_lower_right(L: np.ndarray, B: np.ndarray, cls: str = "b3", transpose: bool = True) -> np.ndarray:
    """Right triangular solve against a lower-triangular block.

    With ``transpose=True`` (the default) returns ``X = B @ inv(L).T``, the
    solution of ``X @ L.T == B``. With ``transpose=False`` returns
    ``X = B @ inv(L)``.

    Raises
    ------
    SingularTriangular
        If ``L`` has a zero diagonal entry.
    ShapeMismatch
        If ``B`` does not have ``L.shape[0]`` columns.
    """
    t0 = time.perf_counter()
    L = np.asarray(L, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_diag(L)
    if B.ndim != 2 or B.shape[1] != L.shape[0]:
        raise ShapeMismatch(f"cannot solve {B.shape} against triangular {L.shape}")
    m, s = B.shape
    if m == 0 or s == 0:
        X = B.copy()
    else:
        # X L^T = B  <=>  L X^T = B^T ;  X L = B  <=>  L^T X^T = B^T
        X = solve_triangular(L, B.T, lower=True, trans=0 if transpose else 1, check_finite=False).T
    _record("TRSM", cls, float(m) * s * s, t0)
    return np.ascontiguousarray(X)


def invert_lower(L: np.ndarray, cls: str = "b3") -> np.ndarray:
    """Inverse of a lower-triangular block, tallied as one TRSM.

    Raises
    ------
    SingularTriangular
        If ``L`` has a zero diagonal entry.
    """
    t0 = time.perf_counter()
    L = np.asarray(L, dtype=np.float64)
    _check_diag(L)
    s = L.shape[0]
    if s == 0:
        inv = L.copy()
    else:
        inv, info = lapack.dtrtri(L, lower=1, unitdiag=0, overwrite_c=0)
        if info > 0:
            raise SingularTriangular(f"zero diagonal entry at index {info - 1}")
        inv = np.tril(inv)
    _record("TRSM", cls, float(s) ** 3, t0)
    return inv


def gemm_acc(
    C: np.ndarray | None,
    A: np.ndarray,
    B: np.ndarray,
    alpha: float = 1.0,
    beta: float = 1.0,
    transA: bool = False,
    transB: bool = False,
    cls: str = "b3",
) -> np.ndarray:
    """Return ``beta * C + alpha * op(A) @ op(B)`` as a new array.

    ``C`` may be ``None`` when ``beta == 0``. The inputs are never modified.

    Raises
    ------
    ShapeMismatch
        If the operands are not conformable.
    """
    t0 = time.perf_counter()
    opA = np.asarray(A, dtype=np.float64)
    opB = np.asarray(B, dtype=np.float64)
    if transA:
        opA = opA.T
    if transB:
        opB = opB.T
    if opA.ndim != 2 or opB.ndim != 2 or opA.shape[1] != opB.shape[0]:
        raise ShapeMismatch(f"cannot multiply {opA.shape} by {opB.shape}")
    m, k = opA.shape
    ncol = opB.shape[1]
    prod = opA @ opB
    if beta == 0.0:
        out = alpha * prod if alpha != 1.0 else prod
    else:
        C = np.asarray(C, dtype=np.float64)
        if C.shape != (m, ncol):
            raise ShapeMismatch(f"accumulator has shape {C.shape}, expected {(m, ncol)}")
        if alpha == 0.0:
            out = beta * C
        else:
            out = (C if beta == 1.0 else beta * C) + (prod if alpha == 1.0 else alpha * prod)
    _record("GEMM", cls, 2.0 * m * ncol * k, t0)
    return np.ascontiguousarray(out)
