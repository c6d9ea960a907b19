"""Block-sequential Cholesky factorization and selected inversion.

``pobtaf`` factorizes a whole BTA matrix from the first block row to the
arrow tip. ``pobtasi`` runs the matching backward recurrence and returns
the entries of the inverse on the BTA pattern. Both are out of place: the
input is never modified.

The backward step inverts the diagonal factor once and replaces every
further triangular solve by a multiplication with that inverse. Each step
therefore costs one triangular inversion and three multiplications,
independent of how many block rows couple to the eliminated column. The
forward and backward step helpers are shared with the distributed
routines, which call them with longer row stacks.
"""

from __future__ import annotations

import numpy as np

from .bta_core import BTAFactor, BTAMatrix, SelectedInverse, validate
from .errors import ShapeMismatch
from .kernels import chol_lower, gemm_acc, invert_lower, solve_lower_right

__all__ = ["pobtaf", "pobtasi", "selinv", "backward_step", "backward_sweep", "symmetrize"]


def symmetrize(X: np.ndarray) -> np.ndarray:
    """Average a block with its transpose (a no-op on exactly symmetric input)."""
    return 0.5 * (X + X.T)


def _forward_step(diag, lower, arrow, U, i: int, a: int) -> np.ndarray:
    """Eliminate block column ``i`` of a top-style partition in place.

    Returns the updated arrow-tip accumulator ``U``.
    """
    L = chol_lower(diag[i], "b3", block=i)
    diag[i] = L
    lower[i] = solve_lower_right(L, lower[i], "b3")
    diag[i + 1] = gemm_acc(diag[i + 1], lower[i], lower[i], -1.0, 1.0, transB=True, cls="b3")
    if a:
        arrow[i] = solve_lower_right(L, arrow[i], "ab2")
        arrow[i + 1] = gemm_acc(arrow[i + 1], arrow[i], lower[i], -1.0, 1.0, transB=True, cls="ab2")
        U = gemm_acc(U, arrow[i], arrow[i], -1.0, 1.0, transB=True, cls="a2b")
    return U


def backward_step(Lii: np.ndarray, Lstack: np.ndarray, XRR: np.ndarray):
    """One step of the selected-inversion recurrence.

    Parameters
    ----------
    Lii : ndarray
        Diagonal factor block of the column being processed.
    Lstack : ndarray
        Factor blocks below ``Lii`` in that column, stacked row-wise in the
        same order as the rows and columns of ``XRR``.
    XRR : ndarray
        Already computed inverse entries on the coupled rows.

    Returns
    -------
    Xoff : ndarray
        Inverse blocks below the diagonal, stacked like ``Lstack``.
    Xii : ndarray
        The diagonal inverse block.
    """
    Linv = invert_lower(Lii, "b3")
    Lhat = gemm_acc(None, Lstack, Linv, 1.0, 0.0, cls="ab2")
    Xoff = gemm_acc(None, XRR, Lhat, -1.0, 0.0, cls="a2b")
    Xii = gemm_acc(None, np.vstack([Linv, Lhat]), np.vstack([Linv, -Xoff]), 1.0, 0.0, transA=True, cls="b3")
    return Xoff, symmetrize(Xii)


def backward_sweep(L: BTAFactor, Xd, Xl, Xa, Xt) -> None:
    """Fill ``Xd``, ``Xl``, ``Xa`` for columns ``L.n - 2`` down to 0 in place.

    ``Xd[-1]``, ``Xa[-1]`` and ``Xt`` must already hold the inverse entries
    of the last block and the tip.
    """
    b = L.b
    for i in range(L.n - 2, -1, -1):
        Lstack = np.vstack([L.lower[i], L.arrow[i]])
        XRR = np.block([[Xd[i + 1], Xa[i + 1].T], [Xa[i + 1], Xt]])
        Xoff, Xd[i] = backward_step(L.diag[i], Lstack, XRR)
        Xl[i] = Xoff[:b]
        Xa[i] = Xoff[b:]


def _closing_factor(diag_last, arrow_last, tip, b: int, a: int, block: int):
    """Factor the last diagonal block and the arrow tip."""
    L = chol_lower(diag_last, "b3", block=block)
    if a:
        arrow_last = solve_lower_right(L, arrow_last, "ab2")
        tip = gemm_acc(tip, arrow_last, arrow_last, -1.0, 1.0, transB=True, cls="a2b")
        tip = chol_lower(tip, "a3", block=block + 1)
    return L, arrow_last, tip


def pobtaf(A: BTAMatrix) -> BTAFactor:
    """Block Cholesky factorization ``A = L L^T`` of an SPD BTA matrix.

    Tip downdates from the loop are summed in a separate accumulator and
    added to the original tip once, before the closing step. The
    distributed factorization sums per-partition accumulators the same way,
    so a single-rank run reproduces this routine bit for bit.

    Raises
    ------
    NotPositiveDefinite
        With ``block`` set to the failing diagonal block (``n`` for the tip).
    """
    validate(A)
    n, b, a = A.n, A.b, A.a
    blk = A.copy_blocks()
    diag, lower, arrow = blk["diag"], blk["lower"], blk["arrow"]
    U = np.zeros((a, a))
    for i in range(n - 1):
        U = _forward_step(diag, lower, arrow, U, i, a)
    diag[n - 1], arrow[n - 1], tip = _closing_factor(diag[n - 1], arrow[n - 1], A.tip + U, b, a, n - 1)
    return BTAFactor(n, b, a, diag, lower, arrow, tip)


def _boundary_inverse(L_last, L_arrow, L_tip, b: int, a: int):
    """Inverse entries on the last diagonal block, its arrow block and the tip."""
    Lc = np.zeros((b + a, b + a))
    Lc[:b, :b] = L_last
    Lc[b:, :b] = L_arrow
    Lc[b:, b:] = L_tip
    M = invert_lower(Lc, "ab2")
    Xc = gemm_acc(None, M, M, 1.0, 0.0, transA=True, cls="a3")
    return symmetrize(Xc[:b, :b]), Xc[b:, :b].copy(), symmetrize(Xc[b:, b:])


def pobtasi(L: BTAFactor) -> SelectedInverse:
    """Selected inverse of ``L L^T`` on the BTA pattern.

    Raises
    ------
    SingularTriangular
        If a diagonal factor block has a zero on its diagonal.
    """
    n, b, a = L.n, L.b, L.a
    if L.diag.shape != (n, b, b) or L.arrow.shape != (n, a, b) or L.tip.shape != (a, a):
        raise ShapeMismatch("factor blocks do not match (n, b, a)")
    Xd = np.empty((n, b, b))
    Xl = np.empty((max(n - 1, 0), b, b))
    Xa = np.empty((n, a, b))
    Xd[n - 1], Xa[n - 1], Xt = _boundary_inverse(L.diag[n - 1], L.arrow[n - 1], L.tip, b, a)
    backward_sweep(L, Xd, Xl, Xa, Xt)
    return SelectedInverse(n, b, a, Xd, Xl, Xa, Xt)


def selinv(A: BTAMatrix) -> SelectedInverse:
    """Selected inverse of an SPD BTA matrix (``pobtasi(pobtaf(A))``)."""
    return pobtasi(pobtaf(A))
