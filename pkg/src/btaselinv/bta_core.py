"""Block-dense storage of block-tridiagonal-arrowhead (BTA) matrices.

A BTA matrix with parameters ``(n, b, a)`` has ``n`` diagonal blocks of
size ``b x b``, ``n - 1`` sub-diagonal blocks (block ``(i+1, i)``), an
arrow row made of ``n`` blocks of size ``a x b`` (block ``(n, i)``) and an
``a x a`` tip (block ``(n, n)``). The upper triangle is implied by symmetry
and never stored. With ``a = 0`` the matrix is plain block-tridiagonal.

Blocks are held in stacked arrays: ``diag`` has shape ``(n, b, b)``,
``lower`` ``(n - 1, b, b)``, ``arrow`` ``(n, a, b)`` and ``tip`` ``(a, a)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AsymmetryDetected,
    BadMagic,
    InvalidDensity,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)

__all__ = [
    "BTAMatrix",
    "BTAFactor",
    "SelectedInverse",
    "diagnose",
    "validate",
    "generate_spd_bta",
    "identity_bta",
    "to_dense",
    "extract_pattern",
    "pattern_max_rel_error",
    "read_bta",
    "write_bta",
    "HEADER",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = b"BTA1"
FORMAT_VERSION = 1
FLAG_SYMMETRIC = 0x1
HEADER = struct.Struct("<4sIIQQQ")


def _stack(blocks, count: int, rows: int, cols: int, name: str) -> np.ndarray:
    """Convert a sequence of blocks into a float64 array of shape (count, rows, cols)."""
    try:
        arr = np.array(blocks, dtype=np.float64)
    except ValueError as exc:  # ragged input
        raise ShapeMismatch(f"{name}: blocks have inconsistent shapes") from exc
    if arr.size == 0 and count * rows * cols == 0:
        return np.zeros((count, rows, cols))
    return arr


@dataclass(eq=False)
class _BlockLayout:
    """Shared storage for matrices, factors and inverses in the BTA pattern."""

    n: int
    b: int
    a: int
    diag: np.ndarray
    lower: np.ndarray
    arrow: np.ndarray
    tip: np.ndarray

    def __post_init__(self):
        self.n, self.b, self.a = int(self.n), int(self.b), int(self.a)
        self.diag = _stack(self.diag, self.n, self.b, self.b, "diag")
        self.lower = _stack(self.lower, max(self.n - 1, 0), self.b, self.b, "lower")
        self.arrow = _stack(self.arrow, self.n, self.a, self.b, "arrow")
        tip = np.array(self.tip, dtype=np.float64)
        if tip.size == 0 and self.a == 0:
            tip = np.zeros((0, 0))
        self.tip = tip

    @property
    def N(self) -> int:
        """Total dense size ``n * b + a``."""
        return self.n * self.b + self.a

    def blocks(self):
        """Yield ``(name, index, block)`` for every stored block in file order."""
        for i in range(self.diag.shape[0]):
            yield "diag", i, self.diag[i]
        for i in range(self.lower.shape[0]):
            yield "lower", i, self.lower[i]
        for i in range(self.arrow.shape[0]):
            yield "arrow", i, self.arrow[i]
        yield "tip", 0, self.tip

    def copy_blocks(self) -> dict:
        """Return fresh writable copies of the four block arrays."""
        return dict(
            diag=self.diag.copy(),
            lower=self.lower.copy(),
            arrow=self.arrow.copy(),
            tip=self.tip.copy(),
        )

    def equal(self, other: "_BlockLayout") -> bool:
        """Bit-exact equality of shape parameters and every block."""
        return (
            (self.n, self.b, self.a) == (other.n, other.b, other.a)
            and np.array_equal(self.diag, other.diag)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.arrow, other.arrow)
            and np.array_equal(self.tip, other.tip)
        )


@dataclass(eq=False)
class BTAMatrix(_BlockLayout):
    """Immutable BTA matrix.

    Parameters
    ----------
    n, b, a : int
        Number of diagonal blocks, diagonal block size and arrow tip size.
    diag, lower, arrow, tip : array_like
        Blocks as described in the module docstring. Inputs are copied and
        the stored arrays are marked read-only.
    symmetric : bool, optional
        Whether the matrix claims symmetry. When set, ``validate`` checks
        every diagonal block and the tip bit-for-bit against its transpose.
    """

    symmetric: bool = True

    def __post_init__(self):
        super().__post_init__()
        for arr in (self.diag, self.lower, self.arrow, self.tip):
            arr.flags.writeable = False


@dataclass(eq=False)
class BTAFactor(_BlockLayout):
    """Lower block-Cholesky factor in the BTA pattern.

    Diagonal blocks and the tip hold lower-triangular factors. ``fill_in``
    is only set for factors of a middle partition in a parallel run and
    holds the permutation-induced blocks coupling each local block row to
    the partition's first block. ``tip_update`` is the partial arrow-tip
    downdate accumulated by a partition.
    """

    fill_in: np.ndarray | None = None
    tip_update: np.ndarray | None = None


@dataclass(eq=False)
class SelectedInverse(_BlockLayout):
    """Entries of the inverse restricted to the BTA pattern."""


def identity_bta(n: int, b: int, a: int) -> BTAMatrix:
    """Return the identity matrix in BTA storage."""
    return BTAMatrix(
        n,
        b,
        a,
        np.broadcast_to(np.eye(b), (n, b, b)),
        np.zeros((max(n - 1, 0), b, b)),
        np.zeros((n, a, b)),
        np.eye(a),
    )


def diagnose(A: _BlockLayout) -> list[str]:
    """List every violated structural invariant of ``A``.

    Returns
    -------
    list of str
        Empty when ``A`` is well formed. Shape problems are prefixed with
        ``"shape:"`` and symmetry problems with ``"symmetry:"``.
    """
    problems = []
    n, b, a = A.n, A.b, A.a
    if n < 1:
        problems.append(f"shape: n must be >= 1, got {n}")
    if b < 1:
        problems.append(f"shape: b must be >= 1, got {b}")
    if a < 0:
        problems.append(f"shape: a must be >= 0, got {a}")
    expected = {
        "diag": (n, b, b),
        "lower": (max(n - 1, 0), b, b),
        "arrow": (n, a, b),
        "tip": (a, a),
    }
    for name, shape in expected.items():
        got = getattr(A, name).shape
        if got != shape:
            problems.append(f"shape: {name} has shape {got}, expected {shape}")
    if problems or not getattr(A, "symmetric", False):
        return problems
    for i in range(n):
        if not np.array_equal(A.diag[i], A.diag[i].T):
            problems.append(f"symmetry: diag[{i}] differs from its transpose")
    if not np.array_equal(A.tip, A.tip.T):
        problems.append("symmetry: tip differs from its transpose")
    return problems


def validate(A: _BlockLayout) -> None:
    """Raise if ``A`` violates a structural invariant.

    Raises
    ------
    ShapeMismatch
        If any block shape disagrees with ``(n, b, a)``.
    AsymmetryDetected
        If ``A`` is flagged symmetric and a diagonal block or the tip is not
        exactly equal to its transpose.
    """
    problems = diagnose(A)
    shape = [p for p in problems if p.startswith("shape:")]
    if shape:
        raise ShapeMismatch("; ".join(shape))
    if problems:
        raise AsymmetryDetected("; ".join(problems))


def generate_spd_bta(seed: int, n: int, b: int, a: int, density: float = 1.0) -> BTAMatrix:
    """Generate a random symmetric positive-definite BTA matrix.

    Every block is filled with uniform values in [-1, 1], each entry kept
    with probability ``density``. Diagonal blocks and the tip are
    symmetrized, then each diagonal entry receives the absolute row sum of
    its dense row plus one, which makes the matrix strictly diagonally
    dominant and hence SPD.

    Parameters
    ----------
    seed : int
        Seed for ``numpy.random.default_rng``.
    n, b, a : int
        Shape parameters.
    density : float, optional
        Fraction of nonzero entries inside each block, in (0, 1].

    Returns
    -------
    BTAMatrix
    """
    if not (0.0 < density <= 1.0):
        raise InvalidDensity(f"density must lie in (0, 1], got {density}")
    if n < 1 or b < 1 or a < 0:
        raise ShapeMismatch(f"invalid shape parameters n={n}, b={b}, a={a}")
    rng = np.random.default_rng(seed)

    def draw(*shape):
        vals = rng.uniform(-1.0, 1.0, size=shape)
        if density < 1.0:
            vals *= rng.random(size=shape) < density
        return vals

    diag = draw(n, b, b)
    lower = draw(n - 1, b, b)
    arrow = draw(n, a, b)
    tip = draw(a, a)
    diag = 0.5 * (diag + diag.transpose(0, 2, 1))
    tip = 0.5 * (tip + tip.T)

    rows = np.abs(diag).sum(axis=2)
    rows[1:] += np.abs(lower).sum(axis=2)
    rows[:-1] += np.abs(lower).sum(axis=1)
    rows += np.abs(arrow).sum(axis=1)
    tip_rows = np.abs(tip).sum(axis=1) + np.abs(arrow).sum(axis=(0, 2))

    idx = np.arange(b)
    diag[:, idx, idx] += rows + 1.0
    tip[np.arange(a), np.arange(a)] += tip_rows + 1.0
    return BTAMatrix(n, b, a, diag, lower, arrow, tip)


def to_dense(A: _BlockLayout) -> np.ndarray:
    """Expand ``A`` into a dense symmetric ``N x N`` array.

    Lower blocks and arrow blocks are mirrored into the upper triangle;
    entries outside the pattern are exactly zero.
    """
    n, b = A.n, A.b
    D = np.zeros((A.N, A.N))
    nb = n * b
    for i in range(n):
        s = slice(i * b, (i + 1) * b)
        D[s, s] = A.diag[i]
        D[nb:, s] = A.arrow[i]
        D[s, nb:] = A.arrow[i].T
        if i < n - 1:
            t = slice((i + 1) * b, (i + 2) * b)
            D[t, s] = A.lower[i]
            D[s, t] = A.lower[i].T
    D[nb:, nb:] = A.tip
    return D


def extract_pattern(D: np.ndarray, n: int, b: int, a: int, cls=SelectedInverse) -> _BlockLayout:
    """Read the lower BTA-pattern blocks of a dense matrix.

    Parameters
    ----------
    D : ndarray
        Dense ``N x N`` matrix with ``N = n * b + a``.
    n, b, a : int
        Shape parameters.
    cls : type, optional
        Result class, ``SelectedInverse`` by default. Pass ``BTAMatrix`` to
        round-trip ``to_dense``.
    """
    D = np.asarray(D, dtype=np.float64)
    N = n * b + a
    if D.shape != (N, N):
        raise ShapeMismatch(f"dense matrix has shape {D.shape}, expected {(N, N)}")
    nb = n * b
    diag = np.stack([D[i * b:(i + 1) * b, i * b:(i + 1) * b] for i in range(n)])
    lower = np.zeros((max(n - 1, 0), b, b))
    for i in range(n - 1):
        lower[i] = D[(i + 1) * b:(i + 2) * b, i * b:(i + 1) * b]
    arrow = np.stack([D[nb:, i * b:(i + 1) * b] for i in range(n)])
    return cls(n, b, a, diag, lower, arrow, D[nb:, nb:].copy())


def pattern_max_rel_error(X: _BlockLayout, ref: _BlockLayout) -> float:
    """Max-norm relative difference over the BTA pattern.

    Returns ``max |X - ref| / max |ref|`` taken over every stored block.
    """
    if (X.n, X.b, X.a) != (ref.n, ref.b, ref.a):
        raise ShapeMismatch("operands have different BTA shapes")
    num = 0.0
    den = 0.0
    for name in ("diag", "lower", "arrow", "tip"):
        x, r = getattr(X, name), getattr(ref, name)
        if r.size:
            num = max(num, float(np.max(np.abs(x - r))))
            den = max(den, float(np.max(np.abs(r))))
    return num / den if den > 0 else num


def write_bta(path: str | os.PathLike, A: _BlockLayout) -> None:
    """Write ``A`` to the little-endian BTA container format."""
    validate(A)
    flags = FLAG_SYMMETRIC if getattr(A, "symmetric", True) else 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, flags, A.n, A.b, A.a))
        for arr in (A.diag, A.lower, A.arrow, A.tip):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_bta(path: str | os.PathLike) -> BTAMatrix:
    """Read a BTA container file written by :func:`write_bta`.

    Raises
    ------
    BadMagic, UnsupportedVersion, TruncatedFile
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC and not (len(raw) < 4 and MAGIC.startswith(raw)):
        raise BadMagic(f"{path}: not a BTA container")
    if len(raw) < HEADER.size:
        raise TruncatedFile(f"{path}: header is incomplete")
    magic, version, flags, n, b, a = HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version} is not supported")
    counts = [n * b * b, max(n - 1, 0) * b * b, n * a * b, a * a]
    need = HEADER.size + 8 * sum(counts)
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise ShapeMismatch(f"{path}: {len(raw) - need} trailing bytes after payload")
    values = np.frombuffer(raw, dtype="<f8", offset=HEADER.size).astype(np.float64)
    parts = np.split(values, np.cumsum(counts)[:-1])
    return BTAMatrix(
        n,
        b,
        a,
        parts[0].reshape(n, b, b),
        parts[1].reshape(max(n - 1, 0), b, b),
        parts[2].reshape(n, a, b),
        parts[3].reshape(a, a),
        symmetric=bool(flags & FLAG_SYMMETRIC),
    )
