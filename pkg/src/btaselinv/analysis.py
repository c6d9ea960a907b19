"""Operation-count model, load-balance ratio and parallel-efficiency bound.

Costs are expressed per shape class: a call in class ``b3`` costs
``b**3``, ``ab2`` costs ``a * b**2``, ``a2b`` costs ``a**2 * b`` and ``a3``
costs ``a**3`` (the ``"volume"`` weighting). The ``"textbook"`` weighting
multiplies these by the leading-order kernel constants instead (POTRF 1/3,
GEMM 2, TRSM 1).

Call counts per routine are exact closed forms of what the instrumented
kernels record, so the model can be checked against a
:class:`~btaselinv.kernels.KernelLedger` call for call.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import InfeasibleParameters, TooFewBlocks
from .kernels import KINDS, SHAPE_CLASSES
from .parallel import plan_partitions

__all__ = [
    "ROUTINES",
    "CostModel",
    "flop_count",
    "LoadBalance",
    "ideal_load_balance",
    "theoretical_efficiency",
    "rank_work",
    "predicted_rank_counts",
    "efficiency_grid",
    "model_report",
]

ROUTINES = ("POBTAF", "POBTASI", "PPOBTAF", "POBTARSSI", "PPOBTASI", "PARTIAL_POBTAF", "PARTIAL_POBTASI")

_TEXTBOOK = {"POTRF": 1.0 / 3.0, "GEMM": 2.0, "TRSM": 1.0}


def _volume(cls: str, b: float, a: float) -> float:
    return {"b3": b**3, "ab2": a * b * b, "a2b": a * a * b, "a3": a**3}[cls]


def _merge(*tables: dict) -> dict:
    out: dict = {}
    for t in tables:
        for k, v in t.items():
            out[k] = out.get(k, 0) + v
    return {k: v for k, v in out.items() if v}


def _pobtaf_counts(n: int, arrow: bool) -> dict:
    c = {("POTRF", "b3"): n, ("GEMM", "b3"): n - 1, ("TRSM", "b3"): n - 1}
    if arrow:
        c.update({("POTRF", "a3"): 1, ("GEMM", "a2b"): n, ("GEMM", "ab2"): n - 1, ("TRSM", "ab2"): n})
    return c


def _pobtasi_counts(n: int) -> dict:
    return {
        ("GEMM", "a3"): 1,
        ("GEMM", "a2b"): n - 1,
        ("GEMM", "ab2"): n - 1,
        ("GEMM", "b3"): n - 1,
        ("TRSM", "ab2"): 1,
        ("TRSM", "b3"): n - 1,
    }


def _forward_steps(k: int, arrow: bool) -> dict:
    c = {("POTRF", "b3"): k, ("GEMM", "b3"): k, ("TRSM", "b3"): k}
    if arrow:
        c.update({("GEMM", "a2b"): k, ("GEMM", "ab2"): k, ("TRSM", "ab2"): k})
    return c


def _backward_steps(k: int) -> dict:
    return {("GEMM", "a2b"): k, ("GEMM", "ab2"): k, ("GEMM", "b3"): k, ("TRSM", "b3"): k}


@dataclass(frozen=True)
class CostModel:
    """Closed-form kernel-call counts and FLOP weights.

    Parameters
    ----------
    weighting : {"volume", "textbook"}
        FLOP weight per call; see the module docstring.
    """

    weighting: str = "volume"

    def counts(self, routine: str, n: int, a: int = 1, P: int = 1) -> dict:
        """Calls per ``(kind, shape_class)`` for one routine.

        Parameters
        ----------
        routine : str
            One of :data:`ROUTINES`. ``PPOBTAF`` and ``PPOBTASI`` give the
            per-rank counts of a middle range; ``PARTIAL_*`` those of the
            top range. For all four, ``n`` is the size of the range.
            ``POBTARSSI`` uses ``2P - 1`` blocks and ignores ``n``.
        n : int
            Number of diagonal blocks.
        a : int
            Arrow tip size; ``a = 0`` drops the arrow-only calls of the
            forward routines.
        P : int
            Rank count (``POBTARSSI`` only).

        Raises
        ------
        InfeasibleParameters
            If a loop bound would be negative.
        """
        arrow = a > 0
        if routine == "POBTAF":
            self._need(n >= 1, routine, n)
            return _merge(_pobtaf_counts(n, arrow))
        if routine == "POBTASI":
            self._need(n >= 1, routine, n)
            return _merge(_pobtasi_counts(n))
        if routine == "POBTARSSI":
            self._need(P >= 1, routine, P)
            n_r = 2 * P - 1
            return _merge(_pobtaf_counts(n_r, arrow), _pobtasi_counts(n_r))
        if routine == "PPOBTAF":
            self._need(n >= 3, routine, n)
            return _merge(_forward_steps(n - 2, arrow))
        if routine == "PPOBTASI":
            self._need(n >= 3, routine, n)
            return _merge(_backward_steps(n - 2))
        if routine == "PARTIAL_POBTAF":
            self._need(n >= 2, routine, n)
            return _merge(_forward_steps(n - 1, arrow))
        if routine == "PARTIAL_POBTASI":
            self._need(n >= 2, routine, n)
            return _merge(_backward_steps(n - 1))
        raise InfeasibleParameters(f"unknown routine {routine!r}")

    @staticmethod
    def _need(ok: bool, routine: str, value: int) -> None:
        if not ok:
            raise InfeasibleParameters(f"{routine} is undefined for size {value}")

    def weight(self, kind: str, cls: str, b: float, a: float) -> float:
        """FLOP weight of one call."""
        v = _volume(cls, b, a)
        return v if self.weighting == "volume" else _TEXTBOOK[kind] * v

    def flops(self, counts: dict, b: float, a: float) -> float:
        return float(sum(c * self.weight(k, cls, b, a) for (k, cls), c in counts.items()))

    def table(self, n: int, a: int, P: int) -> list[dict]:
        """Rows ``{routine, kernel, shape_class, calls}`` for the five routines.

        ``PPOBTAF`` and ``PPOBTASI`` use the middle range size ``n // P``.
        """
        if P < 1 or n // P < 3:
            raise InfeasibleParameters(f"n/P must be >= 3, got n={n}, P={P}")
        rows = []
        for routine in ("POBTAF", "POBTASI", "PPOBTAF", "POBTARSSI", "PPOBTASI"):
            size = n // P if routine.startswith("PP") else n
            c = self.counts(routine, size, a, P)
            for kind in KINDS:
                for cls in SHAPE_CLASSES:
                    rows.append({"routine": routine, "kernel": kind, "shape_class": cls, "calls": c.get((kind, cls), 0)})
        return rows


def flop_count(routine: str, n: int, b: int, a: int, P: int = 1, weighting: str = "volume") -> float:
    """Modeled FLOPs of one routine.

    For ``PPOBTAF`` and ``PPOBTASI`` this is the work of one middle rank
    holding ``n / P`` blocks, which must be an integer of at least 3.

    Raises
    ------
    InfeasibleParameters
    """
    if b < 1 or a < 0 or P < 1:
        raise InfeasibleParameters(f"invalid sizes b={b}, a={a}, P={P}")
    model = CostModel(weighting)
    size = n
    if routine in ("PPOBTAF", "PPOBTASI"):
        if n % P:
            raise InfeasibleParameters(f"n={n} is not a multiple of P={P}")
        size = n // P
    return model.flops(model.counts(routine, size, a, P), b, a)


# Per-step costs used for the load-balance ratio. These follow the block
# operations of the unfused algorithms one by one, since the fused kernel
# calls counted by CostModel make a top step and a middle step look alike.
# A Cholesky factorization or explicit triangular inverse of size s costs
# s^3, a triangular solve with m rows costs m s^2, a product costs m n k.


def _listing_costs(b: float, a: float) -> dict:
    def P(s):
        return s**3

    def T(m, s):
        return m * s * s

    def G(m, n, k):
        return m * n * k

    # forward step of the sequential factorization
    tf = P(b) + T(b, b) + T(a, b) + G(b, b, b) + G(a, b, b) + G(a, a, b)
    # forward step of a middle range: the same plus the fill-in solve,
    # the first-block downdate, the fill-in propagation and the
    # arrow-to-first-block downdate
    mf = tf + T(b, b) + G(b, b, b) + G(b, b, b) + G(a, b, b)
    # closing of the sequential factorization: last block, its arrow block,
    # tip downdate and tip factorization
    cF = P(b) + T(a, b) + G(a, a, b) + P(a)
    # backward step of the sequential inversion: sub-diagonal inverse block
    # (two products, one solve), arrow inverse block (two products, one
    # solve), diagonal inverse block (two products, one solve)
    ts = (G(b, b, b) + G(b, b, a) + T(b, b)) + (G(a, b, b) + G(a, a, b) + T(a, b)) + (G(b, b, b) + G(b, b, a) + T(b, b))
    # backward step of a middle range: each of the above gains the products
    # with the fill-in row, plus the transient fill-in inverse block; the
    # diagonal update applies the inverse of the diagonal factor explicitly
    ms = (
        (G(b, b, b) + G(b, b, a) + G(b, b, b) + T(b, b))
        + (G(b, b, b) + G(b, b, b) + G(b, b, a) + T(b, b))
        + (G(a, b, b) + G(a, a, b) + G(a, b, b) + T(a, b))
        + (G(b, b, b) + G(b, b, a) + P(b) + G(b, b, b) + G(b, b, b) + T(b, b))
    )
    # boundary of the sequential inversion: tip inverse, last arrow block
    # and last diagonal block
    bS = (P(a) + G(a, a, a)) + (G(a, a, b) + T(a, b)) + (G(b, b, a) + T(b, b))
    return dict(tf=tf, mf=mf, cF=cF, ts=ts, ms=ms, bS=bS)


@dataclass(frozen=True)
class LoadBalance:
    """Ideal top-to-middle size ratios.

    Attributes
    ----------
    r_ppobtaf, r_ppobtasi : float
        Per-routine ratios of a middle range's work to the block-sequential
        routine's work on the same number of blocks.
    share : float
        Fraction of a middle range's work spent in the forward pass.
    r_lb : float
        ``share * r_ppobtaf + (1 - share) * r_ppobtasi``.
    """

    n: int
    r_ppobtaf: float
    r_ppobtasi: float
    share: float
    r_lb: float


def ideal_load_balance(n: int, b: int, a: int) -> LoadBalance:
    """Top-to-middle size ratio that equalizes modeled work.

    A middle range of ``n`` blocks eliminates ``n - 2`` of them, and each
    of its steps carries the fill-in work. The top range does the same job
    as the block-sequential routines. For each of the forward and backward
    passes the ratio is the middle range's work over the block-sequential
    routine's work on ``n`` blocks. The two ratios are averaged, weighted
    by the share of the middle range's work spent in each pass.

    Raises
    ------
    InfeasibleParameters
        If ``n < 4`` or the block sizes are invalid.
    """
    if n < 4 or b < 1 or a < 0:
        raise InfeasibleParameters(f"load balance needs n >= 4, b >= 1, a >= 0; got n={n}, b={b}, a={a}")
    c = _listing_costs(float(b), float(a))
    r_f = (n - 2) * c["mf"] / ((n - 1) * c["tf"] + c["cF"])
    r_si = (n - 2) * c["ms"] / ((n - 1) * c["ts"] + c["bS"])
    share = c["mf"] / (c["mf"] + c["ms"])
    return LoadBalance(n, r_f, r_si, share, share * r_f + (1 - share) * r_si)


def predicted_rank_counts(n: int, a: int, P: int, r: float, nested: bool = False) -> list[dict]:
    """Kernel calls each rank of :func:`~btaselinv.parallel.run_pipeline` makes.

    In nested mode the reduced system is itself split over ``P // 2`` ranks
    with the same ratio ``r``, and the root solves the inner reduced
    system sequentially.
    """
    try:
        plan = plan_partitions(n, P, r)
    except TooFewBlocks as exc:
        raise InfeasibleParameters(str(exc)) from exc
    model = CostModel()
    out = []
    for rank, size in enumerate(plan.sizes):
        if rank == 0:
            out.append(_merge(model.counts("PARTIAL_POBTAF", size, a), model.counts("PARTIAL_POBTASI", size, a)))
        else:
            out.append(_merge(model.counts("PPOBTAF", size, a), model.counts("PPOBTASI", size, a)))
    if not nested:
        out[0] = _merge(out[0], model.counts("POBTARSSI", 0, a, P))
        return out
    inner = predicted_rank_counts(2 * P - 1, a, P // 2, r, nested=False)
    for rank, c in enumerate(inner):
        out[rank] = _merge(out[rank], c)
    return out


def rank_work(n: int, b: int, a: int, P: int, r: float, weighting: str = "volume") -> list[float]:
    """Modeled FLOPs per rank of the distributed pipeline.

    Rank 0 also carries the sequential reduced-system solve.
    """
    try:
        plan = plan_partitions(n, P, r)
    except TooFewBlocks as exc:
        raise InfeasibleParameters(str(exc)) from exc
    model = CostModel(weighting)
    work = []
    for rank, size in enumerate(plan.sizes):
        if rank == 0:
            c = _merge(model.counts("PARTIAL_POBTAF", size, a), model.counts("PARTIAL_POBTASI", size, a))
            c = _merge(c, model.counts("POBTARSSI", 0, a, P))
        else:
            c = _merge(model.counts("PPOBTAF", size, a), model.counts("PPOBTASI", size, a))
        work.append(model.flops(c, b, a))
    return work


def theoretical_efficiency(n: int, b: int, a: int, P: int, r: float, weighting: str = "volume") -> float:
    """Upper bound on parallel efficiency, ignoring communication.

    ``sequential FLOPs / (P * max rank FLOPs)``.

    Raises
    ------
    InfeasibleParameters
        If no partition plan exists for ``(n, P)``.
    """
    seq = flop_count("POBTAF", n, b, a, weighting=weighting) + flop_count("POBTASI", n, b, a, weighting=weighting)
    work = rank_work(n, b, a, P, r, weighting)
    return seq / (P * max(work))


def efficiency_grid(ns, Ps, b: int, a: int, r: float | None = None) -> list[dict]:
    """Efficiency for every feasible ``(n, P)``.

    With ``r=None`` each row uses the ideal ratio for its ``n``.
    """
    rows = []
    for n in ns:
        ratio = r if r is not None else ideal_load_balance(n, b, a).r_lb
        for P in Ps:
            if n < 3 * P:
                continue
            rows.append({"n": n, "P": P, "ratio": ratio, "efficiency": theoretical_efficiency(n, b, a, P, ratio)})
    return rows


def model_report(n: int, b: int, a: int, P: int, r: float | None = None, ns=None, Ps=None) -> dict:
    """Everything the ``model`` command prints, as a JSON-ready dict."""
    lb = ideal_load_balance(n, b, a) if n >= 4 else None
    ratio = r if r is not None else (lb.r_lb if lb else 1.0)
    flops = {}
    for routine in ("POBTAF", "POBTASI", "POBTARSSI"):
        flops[routine] = flop_count(routine, n, b, a, P)
    if n % P == 0 and n // P >= 3:
        for routine in ("PPOBTAF", "PPOBTASI"):
            flops[routine] = flop_count(routine, n, b, a, P)
    ns = list(ns) if ns is not None else [n]
    Ps = list(Ps) if Ps is not None else [p for p in (1, 2, 4, 8, 16, 32) if p <= max(P, 1) or p <= n // 3]
    return {
        "schema_version": 1,
        "n": n,
        "b": b,
        "a": a,
        "P": P,
        "ratio": ratio,
        "flops": flops,
        "load_balance": asdict(lb) if lb else None,
        "efficiency": efficiency_grid(ns, Ps, b, a, r),
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
