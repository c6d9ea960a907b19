"""Distributed selected inversion over contiguous block-row partitions.

The ``n`` diagonal blocks are split into ``P`` contiguous ranges. Rank 0
owns the top range and eliminates every local block except its last one.
Each other rank owns a middle range and eliminates its interior blocks
while keeping both its first and last block. It does so as if the first
block had been moved behind the last, without moving anything in memory.
Eliminating towards both ends creates one extra block column coupling
each interior row to the first block. These fill-in blocks are kept in
``BTAFactor.fill_in``.

The blocks left over on every rank, together with the couplings between
neighbouring ranges and the arrow tip, form a reduced BTA system with
``2P - 1`` diagonal blocks. Its diagonal blocks are ordered::

    [top last, p1 first, p1 last, p2 first, p2 last, ...]

The reduced system is solved on the root rank, or on half of the ranks
in nested mode. Its inverse entries are then scattered back, and every
rank runs the backward recurrence over its own range.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bta_core import BTAFactor, BTAMatrix, SelectedInverse, validate
from .errors import NestedInfeasible, TooFewBlocks
from .kernels import KernelLedger, chol_lower, gemm_acc, solve_lower_right
from .sequential import (
    _forward_step,
    backward_step,
    backward_sweep,
    selinv,
    symmetrize,
)
from .transport import InProcessTransport

__all__ = [
    "DEFAULT_RATIO",
    "THEORETICAL_RATIO",
    "PartitionPlan",
    "Partition",
    "PartitionFactor",
    "PartitionInverse",
    "PipelineResult",
    "plan_partitions",
    "partition_view",
    "partial_pobtaf",
    "permuted_pobtaf",
    "ppobtaf",
    "boundary_blocks",
    "build_reduced_system",
    "assemble_reduced_system",
    "check_nested",
    "pobtarssi",
    "reduced_scatter_map",
    "partial_pobtasi",
    "permuted_pobtasi",
    "ppobtasi",
    "pselinv",
    "run_pipeline",
]

DEFAULT_RATIO = 1.8
THEORETICAL_RATIO = 2.25


@dataclass(frozen=True)
class PartitionPlan:
    """Assignment of contiguous block-row ranges to ranks.

    Attributes
    ----------
    n : int
        Total number of diagonal blocks.
    P : int
        Number of ranks.
    ranges : tuple of (int, int)
        Half-open ``[start, end)`` block range per rank; rank 0 is the top.
    ratio : float
        Requested top-to-middle size ratio.
    """

    n: int
    P: int
    ranges: tuple
    ratio: float

    @property
    def sizes(self) -> list[int]:
        return [e - s for s, e in self.ranges]


def plan_partitions(n: int, P: int, r: float = DEFAULT_RATIO) -> PartitionPlan:
    """Split ``n`` diagonal blocks among ``P`` ranks.

    The top range gets ``round(r * n / (r + P - 1))`` blocks (halves round
    up), clamped to ``[2, n - 3 (P - 1)]`` so that every middle range keeps
    at least three blocks. The rest is split as evenly as possible, with the
    earliest middle ranges taking one extra block each.

    Raises
    ------
    TooFewBlocks
        If ``n < 3 P``.
    """
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    if r <= 0:
        raise ValueError(f"ratio must be positive, got {r}")
    if n < 3 * P:
        raise TooFewBlocks(f"n={n} diagonal blocks cannot be split over P={P} ranks (need n >= {3 * P})")
    top = math.floor(r * n / (r + P - 1) + 0.5)
    top = min(max(top, 2), n - 3 * (P - 1))
    sizes = [top]
    if P > 1:
        base, extra = divmod(n - top, P - 1)
        sizes += [base + (1 if k < extra else 0) for k in range(P - 1)]
    ranges, start = [], 0
    for s in sizes:
        ranges.append((start, start + s))
        start += s
    return PartitionPlan(n, P, tuple(ranges), float(r))


@dataclass
class Partition:
    """Rank-private copy of one block-row range of a BTA matrix.

    ``lower`` holds the couplings inside the range; ``lower_out`` couples
    the range's last block to the next range's first block (``None`` on the
    last rank).
    """

    rank: int
    start: int
    end: int
    b: int
    a: int
    diag: np.ndarray
    lower: np.ndarray
    arrow: np.ndarray
    lower_out: np.ndarray | None

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass
class PartitionFactor:
    """Result of a partition's forward pass.

    ``factor`` stores the eliminated blocks as factor blocks and the
    boundary blocks as Schur-complement updates. For a middle range,
    ``coupling`` is the fill-in block between the first and the last local
    block (row first, column last).
    """

    rank: int
    start: int
    end: int
    role: str
    factor: BTAFactor
    lower_out: np.ndarray | None
    coupling: np.ndarray | None = None


@dataclass
class PartitionInverse:
    """Inverse entries of one range, ready to be stitched on the root."""

    start: int
    end: int
    diag: np.ndarray
    lower: np.ndarray
    arrow: np.ndarray
    lower_out: np.ndarray | None


def partition_view(A: BTAMatrix, plan: PartitionPlan, rank: int) -> Partition:
    """Copy rank ``rank``'s blocks out of ``A``."""
    s, e = plan.ranges[rank]
    return Partition(
        rank,
        s,
        e,
        A.b,
        A.a,
        A.diag[s:e].copy(),
        A.lower[s:e - 1].copy(),
        A.arrow[s:e].copy(),
        A.lower[e - 1].copy() if e < A.n else None,
    )


def partial_pobtaf(part: Partition) -> PartitionFactor:
    """Forward pass of the top range.

    Eliminates local blocks ``0 .. n_p - 2`` exactly like the sequential
    factorization, but collects the arrow-tip downdates in
    ``factor.tip_update`` and leaves the last block un-factorized.
    """
    n_p, b, a = part.size, part.b, part.a
    diag, lower, arrow = part.diag.copy(), part.lower.copy(), part.arrow.copy()
    U = np.zeros((a, a))
    for i in range(n_p - 1):
        U = _forward_step(diag, lower, arrow, U, i, a)
    fac = BTAFactor(n_p, b, a, diag, lower, arrow, np.zeros((a, a)), tip_update=U)
    return PartitionFactor(part.rank, part.start, part.end, "top", fac, part.lower_out)


def permuted_pobtaf(part: Partition) -> PartitionFactor:
    """Forward pass of a middle range.

    Eliminates local blocks ``1 .. n_p - 2``. The row of the first block is
    carried along the elimination as fill-in, and both the first and the
    last block receive Schur-complement updates. Each step stacks the
    sub-diagonal block over the fill-in block so that one triangular solve
    and one product serve both.
    """
    n_p, b, a = part.size, part.b, part.a
    diag, lower, arrow = part.diag.copy(), part.lower.copy(), part.arrow.copy()
    fill = np.zeros((n_p, b, b))
    U = np.zeros((a, a))
    B = lower[0].T.copy()
    for i in range(1, n_p - 1):
        L = chol_lower(diag[i], "b3", block=part.start + i)
        diag[i] = L
        Lb = solve_lower_right(L, np.vstack([lower[i], B]), "b3")
        lower[i], fill[i] = Lb[:b], Lb[b:]
        G = gemm_acc(None, Lb, Lb, 1.0, 0.0, transB=True, cls="b3")
        diag[i + 1] = diag[i + 1] - G[:b, :b]
        diag[0] = diag[0] - G[b:, b:]
        B = -G[b:, :b]
        if a:
            arrow[i] = solve_lower_right(L, arrow[i], "ab2")
            H = gemm_acc(None, arrow[i], Lb, 1.0, 0.0, transB=True, cls="ab2")
            arrow[i + 1] = arrow[i + 1] - H[:, :b]
            arrow[0] = arrow[0] - H[:, b:]
            U = gemm_acc(U, arrow[i], arrow[i], -1.0, 1.0, transB=True, cls="a2b")
    fac = BTAFactor(n_p, b, a, diag, lower, arrow, np.zeros((a, a)), fill_in=fill, tip_update=U)
    return PartitionFactor(part.rank, part.start, part.end, "middle", fac, part.lower_out, coupling=B)


def ppobtaf(ctx, A: BTAMatrix, plan: PartitionPlan):
    """Parallel forward pass on one rank.

    Returns
    -------
    pf : PartitionFactor
        This rank's factorized range.
    tip : ndarray or None
        On rank 0, the original tip plus the sum of all ranks' tip
        downdates (summed in rank order); ``None`` elsewhere.
    """
    part = partition_view(A, plan, ctx.rank)
    pf = partial_pobtaf(part) if ctx.rank == 0 else permuted_pobtaf(part)
    total = ctx.reduce_sum(pf.factor.tip_update, 0)
    tip = A.tip + total if ctx.rank == 0 else None
    return pf, tip


def boundary_blocks(pf: PartitionFactor) -> dict:
    """Blocks of a factorized range that enter the reduced system."""
    f = pf.factor
    if pf.role == "top":
        return {"diag": [f.diag[-1]], "arrow": [f.arrow[-1]], "inner": None, "lower_out": pf.lower_out}
    return {
        "diag": [f.diag[0], f.diag[-1]],
        "arrow": [f.arrow[0], f.arrow[-1]],
        "inner": pf.coupling.T.copy(),
        "lower_out": pf.lower_out,
    }


def build_reduced_system(boundaries: list[dict], tip: np.ndarray) -> BTAMatrix:
    """Stack per-rank boundary blocks (rank order) into the reduced system."""
    diag, arrow, lower = [], [], []
    for bnd in boundaries:
        diag += bnd["diag"]
        arrow += bnd["arrow"]
        if bnd["inner"] is not None:
            lower.append(bnd["inner"])
        if bnd["lower_out"] is not None:
            lower.append(bnd["lower_out"])
    b = diag[0].shape[0]
    a = tip.shape[0]
    n_r = len(diag)
    return BTAMatrix(
        n_r,
        b,
        a,
        np.stack([symmetrize(d) for d in diag]),
        np.stack(lower) if lower else np.zeros((0, b, b)),
        np.stack(arrow),
        symmetrize(tip),
    )


def assemble_reduced_system(ctx, pf: PartitionFactor, tip: np.ndarray | None) -> BTAMatrix | None:
    """Gather boundary blocks on rank 0 and build the reduced system there."""
    parts = ctx.gather_blocks(boundary_blocks(pf), 0)
    if ctx.rank != 0:
        return None
    return build_reduced_system(parts, tip)


def check_nested(P: int, n_r: int) -> int:
    """Return the rank count for nested solving or raise ``NestedInfeasible``."""
    P_ns = P // 2
    if P_ns < 2 or n_r < 3 * P_ns:
        raise NestedInfeasible(f"nested solving needs P//2 >= 2 and n_r >= 3 (P//2); got P={P}, n_r={n_r}")
    return P_ns


def pobtarssi(
    Ar: BTAMatrix,
    mode: str = "sequential",
    P: int | None = None,
    ratio: float = DEFAULT_RATIO,
    transport=None,
) -> SelectedInverse:
    """Selected inverse of a reduced system.

    Parameters
    ----------
    Ar : BTAMatrix
        The reduced system (``2P - 1`` diagonal blocks).
    mode : {"sequential", "nested"}
        ``"sequential"`` factorizes and inverts ``Ar`` directly.
        ``"nested"`` runs the parallel pipeline once more on ``P // 2``
        ranks, without further nesting.
    P : int, optional
        Rank count of the outer run; needed for ``"nested"``. Defaults to
        ``(Ar.n + 1) // 2``.
    """
    if mode == "sequential":
        return selinv(Ar)
    if mode != "nested":
        raise ValueError(f"unknown mode {mode!r}")
    P = (Ar.n + 1) // 2 if P is None else P
    P_ns = check_nested(P, Ar.n)
    transport = transport or InProcessTransport(P_ns)
    plan = plan_partitions(Ar.n, P_ns, ratio)
    return transport.run(_pipeline, Ar, plan, False, ratio, {})[0]


def reduced_scatter_map(Xr: SelectedInverse, P: int) -> list[dict]:
    """Per-rank boundary inverse blocks taken from the reduced inverse."""
    out = [
        {
            "diag_last": Xr.diag[0],
            "arrow_last": Xr.arrow[0],
            "lower_out": Xr.lower[0] if P > 1 else None,
            "tip": Xr.tip,
        }
    ]
    for p in range(1, P):
        out.append(
            {
                "diag_first": Xr.diag[2 * p - 1],
                "arrow_first": Xr.arrow[2 * p - 1],
                "diag_last": Xr.diag[2 * p],
                "arrow_last": Xr.arrow[2 * p],
                "inner": Xr.lower[2 * p - 1],
                "lower_out": Xr.lower[2 * p] if p < P - 1 else None,
                "tip": Xr.tip,
            }
        )
    return out


def partial_pobtasi(pf: PartitionFactor, xb: dict) -> PartitionInverse:
    """Backward pass of the top range, seeded with its boundary inverse blocks."""
    f = pf.factor
    n_p, b, a = f.n, f.b, f.a
    Xd = np.empty((n_p, b, b))
    Xl = np.empty((n_p - 1, b, b))
    Xa = np.empty((n_p, a, b))
    Xd[-1], Xa[-1] = xb["diag_last"], xb["arrow_last"]
    backward_sweep(f, Xd, Xl, Xa, xb["tip"])
    return PartitionInverse(pf.start, pf.end, Xd, Xl, Xa, xb["lower_out"])


def permuted_pobtasi(pf: PartitionFactor, xb: dict) -> PartitionInverse:
    """Backward pass of a middle range, seeded with its boundary inverse blocks.

    Rows coupled to each eliminated column are, in order, the next block,
    the range's first block (through the fill-in) and the arrow.
    """
    f = pf.factor
    n_p, b, a = f.n, f.b, f.a
    Xt = xb["tip"]
    Xd = np.empty((n_p, b, b))
    Xl = np.empty((n_p - 1, b, b))
    Xa = np.empty((n_p, a, b))
    Xd[0], Xa[0] = xb["diag_first"], xb["arrow_first"]
    Xd[-1], Xa[-1] = xb["diag_last"], xb["arrow_last"]
    X0 = xb["inner"].T  # row of the first block, column of the current block
    for i in range(n_p - 2, 0, -1):
        Lstack = np.vstack([f.lower[i], f.fill_in[i], f.arrow[i]])
        XRR = np.block(
            [
                [Xd[i + 1], X0.T, Xa[i + 1].T],
                [X0, Xd[0], Xa[0].T],
                [Xa[i + 1], Xa[0], Xt],
            ]
        )
        Xoff, Xd[i] = backward_step(f.diag[i], Lstack, XRR)
        Xl[i], X0, Xa[i] = Xoff[:b], Xoff[b:2 * b], Xoff[2 * b:]
    Xl[0] = X0.T
    return PartitionInverse(pf.start, pf.end, Xd, Xl, Xa, xb["lower_out"])


def ppobtasi(ctx, pf: PartitionFactor, xb: dict) -> PartitionInverse:
    """Parallel backward pass on one rank."""
    return partial_pobtasi(pf, xb) if ctx.rank == 0 else permuted_pobtasi(pf, xb)


def _stitch(parts: list[PartitionInverse], n: int, b: int, a: int, tip: np.ndarray) -> SelectedInverse:
    Xd = np.empty((n, b, b))
    Xl = np.empty((max(n - 1, 0), b, b))
    Xa = np.empty((n, a, b))
    for p in parts:
        Xd[p.start:p.end] = p.diag
        Xl[p.start:p.end - 1] = p.lower
        Xa[p.start:p.end] = p.arrow
        if p.lower_out is not None:
            Xl[p.end - 1] = p.lower_out
    return SelectedInverse(n, b, a, Xd, Xl, Xa, tip)


def _pipeline(ctx, A: BTAMatrix, plan: PartitionPlan, nested: bool, ratio: float, timings: dict):
    """Rank body of the full pipeline; returns the inverse on rank 0."""
    t0 = time.perf_counter()
    pf, tip = ppobtaf(ctx, A, plan)
    t1 = time.perf_counter()
    Ar = assemble_reduced_system(ctx, pf, tip)
    if nested:
        sub = ctx.subgroup(ctx.size // 2)
        Xr = None
        if sub is not None:
            Ar = sub.bcast(Ar, 0)
            Xr = _pipeline(sub, Ar, plan_partitions(Ar.n, sub.size, ratio), False, ratio, {})
    else:
        Xr = pobtarssi(Ar) if ctx.rank == 0 else None
    xb = ctx.scatter_blocks(reduced_scatter_map(Xr, ctx.size) if ctx.rank == 0 else None, 0)
    t2 = time.perf_counter()
    Xp = ppobtasi(ctx, pf, xb)
    parts = ctx.gather_blocks(Xp, 0)
    X = _stitch(parts, A.n, A.b, A.a, xb["tip"]) if ctx.rank == 0 else None
    t3 = time.perf_counter()
    timings.update(PPOBTAF=t1 - t0, POBTARSSI=t2 - t1, PPOBTASI=t3 - t2)
    return X


@dataclass
class PipelineResult:
    """Outcome of :func:`run_pipeline`.

    Attributes
    ----------
    inverse : SelectedInverse
    plan : PartitionPlan
    timings : list of dict
        Per-rank wall seconds of the three phases.
    ledgers : list of KernelLedger
        Per-rank kernel ledgers.
    """

    inverse: SelectedInverse
    plan: PartitionPlan
    timings: list = field(default_factory=list)
    ledgers: list = field(default_factory=list)

    def merged_ledger(self) -> KernelLedger:
        return KernelLedger.merged(self.ledgers)


def run_pipeline(
    A: BTAMatrix,
    P: int,
    r: float = DEFAULT_RATIO,
    nested: bool = False,
    transport=None,
) -> PipelineResult:
    """Run the distributed selected inversion and keep per-rank diagnostics.

    Raises
    ------
    TooFewBlocks
        If ``A.n < 3 P``.
    NestedInfeasible
        If ``nested`` is set and ``P // 2 < 2``.
    """
    validate(A)
    plan = plan_partitions(A.n, P, r)
    if nested:
        check_nested(P, 2 * P - 1)
    transport = transport or InProcessTransport(P)
    if transport.P != P:
        raise ValueError(f"transport has {transport.P} ranks, plan needs {P}")
    timings = [dict() for _ in range(P)]

    def body(ctx):
        return _pipeline(ctx, A, plan, nested, r, timings[ctx.rank])

    results = transport.run(body)
    return PipelineResult(results[0], plan, timings, list(transport.ledgers))


def pselinv(
    A: BTAMatrix,
    P: int,
    r: float = DEFAULT_RATIO,
    nested: bool = False,
    transport=None,
) -> SelectedInverse:
    """Selected inverse of ``A`` computed by ``P`` ranks.

    The result agrees with :func:`~btaselinv.sequential.selinv` to rounding
    error for every feasible ``P``, ``r`` and ``nested``; for ``P = 1`` the
    two run the same kernel sequence.
    """
    return run_pipeline(A, P, r, nested, transport).inverse
