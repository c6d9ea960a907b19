import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btaselinv.analysis import predicted_rank_counts
from btaselinv.bta_core import generate_spd_bta, pattern_max_rel_error, to_dense
from btaselinv.errors import NestedInfeasible, TooFewBlocks
from btaselinv.parallel import (
    assemble_reduced_system,
    partial_pobtaf,
    partition_view,
    plan_partitions,
    pobtarssi,
    ppobtaf,
    pselinv,
    run_pipeline,
)
from btaselinv.sequential import pobtaf, selinv
from btaselinv.transport import InProcessTransport

from conftest import dense_oracle


def rel(x, ref):
    return np.max(np.abs(x - ref)) / np.max(np.abs(ref))


def reduced_system(A, P, r=1.8):
    plan = plan_partitions(A.n, P, r)

    def body(ctx):
        pf, tip = ppobtaf(ctx, A, plan)
        return assemble_reduced_system(ctx, pf, tip)

    return InProcessTransport(P).run(body)[0], plan


def schur_oracle(A, plan):
    """Dense Schur complement of ``A`` onto the partition boundary blocks and the tip."""
    b = A.b
    keep = [plan.ranges[0][1] - 1]
    for s, e in plan.ranges[1:]:
        keep += [s, e - 1]
    idx = np.concatenate([np.arange(k * b, (k + 1) * b) for k in keep] + [np.arange(A.n * b, A.N)])
    rest = np.setdiff1d(np.arange(A.N), idx)
    D = to_dense(A)
    S = D[np.ix_(idx, idx)] - D[np.ix_(idx, rest)] @ np.linalg.solve(D[np.ix_(rest, rest)], D[np.ix_(rest, idx)])
    return S


def checksum(A):
    h = hashlib.sha256()
    for _, _, blk in A.blocks():
        h.update(blk.tobytes())
    return h.hexdigest()


@pytest.mark.parametrize(
    "n, P, r, sizes",
    [(11, 3, 1.0, [4, 4, 3]), (512, 2, 2.25, [354, 158]), (9, 3, 1.8, [3, 3, 3]), (12, 1, 1.8, [12])],
)
def test_plan_examples(n, P, r, sizes):
    assert plan_partitions(n, P, r).sizes == sizes


def test_plan_too_few_blocks():
    with pytest.raises(TooFewBlocks):
        plan_partitions(5, 3)


@given(n=st.integers(3, 400), P=st.integers(1, 16), r=st.floats(0.1, 10.0))
def test_plan_invariants(n, P, r):
    if n < 3 * P:
        with pytest.raises(TooFewBlocks):
            plan_partitions(n, P, r)
        return
    plan = plan_partitions(n, P, r)
    sizes = plan.sizes
    assert sum(sizes) == n and len(sizes) == P
    assert plan.ranges[0][0] == 0 and plan.ranges[-1][1] == n
    assert all(plan.ranges[k][1] == plan.ranges[k + 1][0] for k in range(P - 1))
    assert sizes[0] >= 2 and all(s >= 3 for s in sizes[1:])
    assert max(sizes[1:], default=0) - min(sizes[1:], default=0) <= 1


def test_top_partition_matches_sequential_factor():
    A = generate_spd_bta(2, 12, 3, 2)
    plan = plan_partitions(12, 3, 1.8)
    pf = partial_pobtaf(partition_view(A, plan, 0))
    L = pobtaf(A)
    k = plan.sizes[0] - 1
    assert np.array_equal(pf.factor.diag[:k], L.diag[:k])
    assert np.array_equal(pf.factor.lower[:k], L.lower[:k])
    assert np.array_equal(pf.factor.arrow[:k], L.arrow[:k])


@pytest.mark.parametrize("P, a", [(2, 2), (3, 1), (4, 3), (4, 0)])
def test_reduced_system_is_schur_complement(P, a):
    A = generate_spd_bta(7 + P, 16, 3, a)
    Ar, plan = reduced_system(A, P)
    assert Ar.n == 2 * P - 1
    assert rel(to_dense(Ar), schur_oracle(A, plan)) <= 1e-12


def test_two_rank_tip_sum():
    A = generate_spd_bta(11, 10, 2, 2)
    Ar, plan = reduced_system(A, 2)
    S = schur_oracle(A, plan)
    assert rel(Ar.tip, S[-2:, -2:]) <= 1e-12


def test_nested_reduced_solve_matches_sequential():
    A = generate_spd_bta(5, 32, 3, 2)
    Ar, _ = reduced_system(A, 8)
    Xs = pobtarssi(Ar, "sequential")
    Xn = pobtarssi(Ar, "nested", P=8)
    assert pattern_max_rel_error(Xn, Xs) <= 1e-12


def test_nested_infeasible():
    A = generate_spd_bta(5, 12, 2, 1)
    with pytest.raises(NestedInfeasible):
        pselinv(A, 2, nested=True)
    Ar, _ = reduced_system(A, 2)
    with pytest.raises(NestedInfeasible):
        pobtarssi(Ar, "nested", P=2)


def test_two_ranks_matches_dense():
    A = generate_spd_bta(3, 16, 4, 2)
    assert pattern_max_rel_error(pselinv(A, 2), dense_oracle(A)) <= 1e-9


def test_four_ranks_nested_matches_dense():
    A = generate_spd_bta(3, 24, 4, 2)
    assert pattern_max_rel_error(pselinv(A, 4, nested=True), dense_oracle(A)) <= 1e-9


def test_single_rank_bit_exact():
    A = generate_spd_bta(9, 7, 3, 2)
    assert pselinv(A, 1).equal(selinv(A))


def test_too_few_blocks():
    with pytest.raises(TooFewBlocks):
        pselinv(generate_spd_bta(1, 5, 2, 1), 2)


@pytest.mark.parametrize("P, nested", [(2, False), (3, False), (4, False), (4, True), (8, True)])
def test_matches_sequential(P, nested):
    A = generate_spd_bta(40 + P, 30, 3, 2, 0.5)
    assert pattern_max_rel_error(pselinv(A, P, nested=nested), selinv(A)) <= 1e-12


@given(r=st.floats(0.2, 8.0), P=st.integers(2, 5))
def test_ratio_invariance(r, P):
    A = generate_spd_bta(17, 20, 2, 1)
    assert pattern_max_rel_error(pselinv(A, P, r), selinv(A)) <= 1e-12


@pytest.mark.parametrize("P, nested, r", [(3, False, 1.8), (4, False, 1.0), (4, True, 1.8), (8, True, 2.25)])
def test_per_rank_ledger_matches_model(P, nested, r):
    A = generate_spd_bta(1, 48, 2, 1)
    res = run_pipeline(A, P, r, nested)
    assert [led.counts() for led in res.ledgers] == predicted_rank_counts(48, 1, P, r, nested)


def test_pipeline_does_not_mutate_input():
    A = generate_spd_bta(4, 18, 3, 2)
    before = checksum(A)
    pselinv(A, 3)
    pselinv(A, 4, nested=True)
    assert checksum(A) == before


def test_timings_cover_phases():
    res = run_pipeline(generate_spd_bta(4, 18, 3, 2), 3)
    for tim in res.timings:
        assert set(tim) == {"PPOBTAF", "POBTARSSI", "PPOBTASI"}
        assert all(v >= 0 for v in tim.values())
