import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from btaselinv.analysis import CostModel
from btaselinv.bta_core import (
    BTAFactor,
    BTAMatrix,
    extract_pattern,
    generate_spd_bta,
    identity_bta,
    pattern_max_rel_error,
    to_dense,
)
from btaselinv.errors import NotPositiveDefinite, SingularTriangular
from btaselinv.kernels import KernelLedger
from btaselinv.sequential import pobtaf, pobtasi, selinv

from conftest import dense_oracle


def factor_to_dense(L: BTAFactor) -> np.ndarray:
    """Dense lower-triangular matrix of a factor (lower blocks only)."""
    n, b = L.n, L.b
    D = np.zeros((L.N, L.N))
    for i in range(n):
        s = slice(i * b, (i + 1) * b)
        D[s, s] = L.diag[i]
        D[n * b:, s] = L.arrow[i]
        if i < n - 1:
            D[(i + 1) * b:(i + 2) * b, s] = L.lower[i]
    D[n * b:, n * b:] = L.tip
    return D


def test_identity_factor_and_inverse():
    I = identity_bta(3, 2, 1)
    L = pobtaf(I)
    assert np.array_equal(factor_to_dense(L), np.eye(7))
    assert pobtasi(L).equal(I)
    assert selinv(I).equal(I)


def test_factor_matches_dense_cholesky():
    A = generate_spd_bta(1, 4, 2, 1, 1.0)
    L = factor_to_dense(pobtaf(A))
    ref = np.linalg.cholesky(to_dense(A))
    assert np.max(np.abs(L - ref)) / np.max(np.abs(ref)) <= 1e-12


def test_factor_reproduces_matrix():
    A = generate_spd_bta(5, 6, 3, 2, 0.5)
    L = factor_to_dense(pobtaf(A))
    D = to_dense(A)
    assert np.max(np.abs(L @ L.T - D)) / np.max(np.abs(D)) <= 1e-12


def test_pobtaf_ledger_n4():
    led = KernelLedger()
    with led.active():
        pobtaf(generate_spd_bta(1, 4, 2, 1))
    assert led.count("POTRF", "b3") == 4
    assert led.count("POTRF", "a3") == 1
    assert led.count("TRSM", "ab2") == 4
    assert led.count("GEMM", "b3") == 3


def test_selinv_matches_dense_inverse():
    A = generate_spd_bta(1, 4, 2, 1, 1.0)
    assert pattern_max_rel_error(selinv(A), dense_oracle(A)) <= 1e-9


def test_pobtasi_ledger_n4():
    L = pobtaf(generate_spd_bta(1, 4, 2, 1))
    led = KernelLedger()
    with led.active():
        pobtasi(L)
    assert led.count("GEMM", "a2b") == 3
    assert led.count("TRSM", "b3") == 3
    assert led.count("GEMM", "b3") == 3


def test_scalar_tridiagonal():
    A = generate_spd_bta(4, 3, 1, 0, 1.0)
    D = to_dense(A)
    assert D.shape == (3, 3)
    X = selinv(A)
    assert pattern_max_rel_error(X, extract_pattern(np.linalg.inv(D), 3, 1, 0)) <= 1e-12


def test_zero_arrow_equals_block_tridiagonal_inverse():
    A = generate_spd_bta(6, 7, 3, 0, 1.0)
    X = selinv(A)
    assert X.arrow.shape == (7, 0, 3) and X.tip.shape == (0, 0)
    D = to_dense(A)
    Dinv = scipy.linalg.inv(D)
    for i in range(7):
        assert np.allclose(X.diag[i], Dinv[3 * i:3 * i + 3, 3 * i:3 * i + 3], rtol=0, atol=1e-12)


def test_inputs_preserved():
    A = generate_spd_bta(2, 5, 2, 2)
    before = [blk.copy() for _, _, blk in A.blocks()]
    selinv(A)
    assert all(np.array_equal(x, y) for x, (_, _, y) in zip(before, A.blocks()))


def test_not_positive_definite_reports_block():
    A = generate_spd_bta(3, 4, 2, 1)
    diag = A.diag.copy()
    diag[2] = -np.eye(2)
    B = BTAMatrix(4, 2, 1, diag, A.lower, A.arrow, A.tip)
    with pytest.raises(NotPositiveDefinite) as info:
        pobtaf(B)
    assert info.value.block == 2


def test_singular_factor():
    L = pobtaf(identity_bta(3, 2, 1))
    L.diag[1] = np.zeros((2, 2))
    with pytest.raises(SingularTriangular):
        pobtasi(L)


@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 64),
    b=st.integers(1, 16),
    a=st.integers(0, 8),
    density=st.sampled_from([0.05, 0.5, 1.0]),
)
def test_oracle_equivalence_property(seed, n, b, a, density):
    A = generate_spd_bta(seed, n, b, a, density)
    X = selinv(A)
    assert pattern_max_rel_error(X, dense_oracle(A)) <= 1e-9
    scale = max(np.max(np.abs(X.diag)), np.max(np.abs(X.tip), initial=0.0))
    for blk in list(X.diag) + [X.tip]:
        if blk.size:
            assert np.max(np.abs(blk - blk.T)) <= 1e-10 * scale


@given(n=st.integers(1, 20), b=st.integers(1, 4), a=st.integers(0, 3))
def test_ledger_matches_cost_model(n, b, a):
    A = generate_spd_bta(n * 31 + b, n, b, a)
    led_f, led_s = KernelLedger(), KernelLedger()
    with led_f.active():
        L = pobtaf(A)
    with led_s.active():
        pobtasi(L)
    model = CostModel()
    assert led_f.counts() == model.counts("POBTAF", n, a)
    assert led_s.counts() == model.counts("POBTASI", n, a)
