import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtw import qcore
from qtw.qcore import I2, KET0, KET1, MAX_MIXED, SX, SY, SZ

from conftest import random_bloch, random_hermitian, random_states

PLUS = 0.5 * np.array([[1, 1], [1, 1]], dtype=complex)


def power_eigs(m, iters=3000):
    """Eigenvalues of Hermitian 2x2 stacks: power iteration on ``m + |m|_F I`` (positive
    semi-definite), Rayleigh quotient for the top eigenvalue, trace deflation for the other."""
    A = m + qcore.frob(m)[:, None, None] * I2
    v = np.tile(np.array([1.0, 0.3 + 0.1j]), (m.shape[0], 1))
    for _ in range(iters):
        v = np.einsum("nij,nj->ni", A, v)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam_max = np.real(np.einsum("ni,nij,nj->n", v.conj(), m, v))
    lam_min = np.real(m[:, 0, 0] + m[:, 1, 1]) - lam_max
    return lam_min, lam_max


def test_bloch_to_rho_examples():
    np.testing.assert_allclose(qcore.bloch_to_rho([0, 0, 0]), MAX_MIXED)
    np.testing.assert_allclose(qcore.bloch_to_rho([0, 0, 1]), KET0)
    np.testing.assert_allclose(qcore.bloch_to_rho(qcore.BlochVector(1, 0, 0)), PLUS)


def test_bloch_outside_ball_raises():
    with pytest.raises(qcore.DomainError):
        qcore.bloch_to_rho([0.8, 0.8, 0.0])
    qcore.bloch_to_rho([0, 0, 1 + 5e-10])


def test_rho_to_bloch_examples():
    np.testing.assert_allclose(qcore.rho_to_bloch(MAX_MIXED), [0, 0, 0])
    np.testing.assert_allclose(qcore.rho_to_bloch(KET0), [0, 0, 1])
    np.testing.assert_allclose(qcore.rho_to_bloch(PLUS), [1, 0, 0])


def test_rho_to_bloch_matches_pauli_expectations(rng):
    m = rng.normal(size=(50, 2, 2)) + 1j * rng.normal(size=(50, 2, 2))
    r = qcore.rho_to_bloch(m)
    for k, s in enumerate((SX, SY, SZ)):
        np.testing.assert_allclose(r[:, k], np.real(np.trace(s @ m, axis1=-2, axis2=-1)), atol=1e-13)


def test_bloch_round_trip_10k(rng):
    r = random_bloch(rng, 10_000)
    back = qcore.rho_to_bloch(qcore.bloch_to_rho(r))
    assert np.abs(back - r).max() <= 1e-12
    rho = qcore.bloch_to_rho(r)
    assert np.abs(qcore.bloch_to_rho(qcore.rho_to_bloch(rho)) - rho).max() <= 1e-12


def test_density_matrix_validation():
    qcore.DensityMatrix(KET0)
    with pytest.raises(qcore.StateError):
        qcore.DensityMatrix(np.diag([1.5, 0.0]))
    with pytest.raises(qcore.StateError):
        qcore.DensityMatrix(np.diag([1.2, -0.2]))
    with pytest.raises(qcore.StateError):
        qcore.DensityMatrix(np.array([[0.5, 0.1], [0.0, 0.5]]))
    with pytest.raises(qcore.StateError):
        qcore.DensityMatrix(np.eye(3) / 3)
    qcore.RawPrediction(np.diag([1.2, -0.2]))


def test_fidelity_examples():
    for rho in (KET0, PLUS, MAX_MIXED):
        assert qcore.fidelity_full(rho, rho) == pytest.approx(1.0, abs=1e-14)
    assert qcore.fidelity(KET0, KET1) == 0.0
    assert qcore.fidelity(KET0, KET1, form="full") == 0.0
    assert qcore.fidelity(KET0, MAX_MIXED, form="full") == pytest.approx(0.5)
    assert qcore.fidelity_proxy(MAX_MIXED, MAX_MIXED) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        qcore.fidelity(KET0, KET0, form="other")


def test_full_fidelity_against_sqrtm_oracle(rng):
    def sqrtm(m):
        w, v = np.linalg.eigh(m)
        return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T

    a, b = random_states(rng, 200), random_states(rng, 200)
    ours = qcore.fidelity_full(a, b)
    for i in range(200):
        s = sqrtm(a[i])
        ref = np.real(np.trace(sqrtm(s @ b[i] @ s))) ** 2
        assert ours[i] == pytest.approx(ref, abs=1e-10)


def test_proxy_equals_full_when_one_state_pure(rng):
    pure = qcore.bloch_to_rho(random_bloch(rng, 1000, radius=1.0))
    mixed = random_states(rng, 1000)
    diff = np.abs(qcore.fidelity_proxy(pure, mixed) - qcore.fidelity_full(pure, mixed))
    assert diff.max() <= 1e-12


def test_full_fidelity_determinant_clamp():
    slightly_neg = np.diag([1.0 + 1e-13, -1e-13]).astype(complex)
    qcore.fidelity_full(slightly_neg, MAX_MIXED)
    with pytest.raises(qcore.DomainError):
        qcore.fidelity_full(np.diag([1.2, -0.2]), MAX_MIXED)
    assert np.isfinite(qcore.fidelity_full(np.diag([1.2, -0.2]), MAX_MIXED, strict=False))


def test_bures_examples():
    assert qcore.bures_distance(KET0, KET0) == pytest.approx(0.0, abs=1e-7)
    assert qcore.bures_distance(KET0, KET1) == pytest.approx(np.sqrt(2))
    assert qcore.bures_distance(KET0, MAX_MIXED, form="full") == pytest.approx(0.76537, abs=1e-5)
    assert qcore.bures_from_fidelity(1.3) == 0.0
    assert qcore.bures_from_fidelity(-0.2) == pytest.approx(np.sqrt(2))


def test_physicality_metrics_examples(rng):
    for rho in random_states(rng, 20):
        assert max(qcore.physicality_metrics(rho)) <= 1e-12
    assert qcore.physicality_metrics(np.diag([1.5, 0.0])) == pytest.approx((0.5, 0.0, 0.0))
    v = qcore.physicality_metrics(np.diag([1.2, -0.2]))
    assert v == pytest.approx((0.0, 0.2, 0.0), abs=1e-15)
    m = np.array([[0.5, 0.3], [0.0, 0.5]], dtype=complex)
    assert qcore.physicality_metrics(m)[2] == pytest.approx(0.3 * np.sqrt(2))


def test_eigvals_examples():
    assert qcore.eigvals_hermitian_2x2(MAX_MIXED) == pytest.approx((0.5, 0.5))
    assert qcore.eigvals_hermitian_2x2(SZ) == pytest.approx((-1.0, 1.0))


def test_eigvals_against_power_iteration_10k(rng):
    ms = random_hermitian(rng, 10_000)
    lo, hi = qcore.eigvals_hermitian_2x2(ms)
    a, b = power_eigs(ms)
    # power iteration stalls on near-degenerate pairs; those (plus one synthetic case) go to LAPACK
    converged = (hi - lo) > 1e-3
    assert converged.mean() > 0.99
    assert max(np.abs(a - lo)[converged].max(), np.abs(b - hi)[converged].max()) <= 1e-10
    ref = np.linalg.eigvalsh(np.concatenate([ms[~converged], [0.25 * I2 + 1e-9 * SX]]))
    lo_d, hi_d = qcore.eigvals_hermitian_2x2(np.concatenate([ms[~converged], [0.25 * I2 + 1e-9 * SX]]))
    assert np.abs(ref - np.stack([lo_d, hi_d], -1)).max() <= 1e-10


def test_kraus_completeness_examples():
    Z = np.zeros((2, 2))
    assert qcore.kraus_completeness_error(I2, Z) == 0.0
    assert qcore.kraus_completeness_error((I2 / np.sqrt(2), I2 / np.sqrt(2))) == pytest.approx(0.0, abs=1e-15)
    assert qcore.kraus_completeness_error(I2, I2) == pytest.approx(np.sqrt(2))


def test_mul_matches_matmul(rng):
    a = rng.normal(size=(7, 2, 2)) + 1j * rng.normal(size=(7, 2, 2))
    b = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    np.testing.assert_allclose(qcore.mul(a, b), a @ b, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-1, 1)] * 3), st.tuples(*[st.floats(-1, 1)] * 3))
def test_fidelity_bounds_and_symmetry(ra, rb):
    ra, rb = np.array(ra), np.array(rb)
    ra /= max(1.0, np.linalg.norm(ra))
    rb /= max(1.0, np.linalg.norm(rb))
    a, b = qcore.bloch_to_rho(ra), qcore.bloch_to_rho(rb)
    f = qcore.fidelity_full(a, b)
    assert -1e-12 <= f <= 1 + 1e-12
    assert f == pytest.approx(qcore.fidelity_full(b, a), abs=1e-14)
    assert qcore.fidelity_proxy(a, b) <= f + 1e-12
