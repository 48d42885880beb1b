import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtw import ad, heads
from qtw.ad import NumpyOps, ShapeError, TapeError, TapeOps, grad_check


def central_diff(fun, x, step=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up.flat[i] += step
        dn.flat[i] -= step
        g.flat[i] = (fun(up) - fun(dn)) / (2 * step)
    return g


def test_tanh_and_sigmoid_slopes_at_zero():
    for op, slope in ((ad.tanh, 1.0), (ad.sigmoid, 0.25)):
        F = TapeOps()
        x = F.param("x", 0.0)
        assert F.tape.backward(op(x))[0] == pytest.approx(slope, abs=1e-15)


def test_matmul_adjoint_matches_differences(rng):
    A0, B0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    C = rng.normal(size=(3, 3))
    F = TapeOps()
    A, B = F.param("A", A0), F.param("B", B0)
    g = F.tape.backward(ad.sum_(ad.mul(ad.matmul(A, B), C)))
    num = central_diff(lambda x: np.sum((x[:9].reshape(3, 3) @ x[9:].reshape(3, 3)) * C),
                       np.concatenate([A0.ravel(), B0.ravel()]))
    assert np.abs(g - num).max() / np.abs(num).max() <= 1e-6


def test_constant_loss_gives_zero_gradients():
    F = TapeOps()
    F.param("p", np.ones(4))
    loss = F.const(3.0)
    assert np.array_equal(F.tape.backward(loss), np.zeros(4))


def test_half_square_norm_gradient_is_p(rng):
    p0 = rng.normal(size=7)
    F = TapeOps()
    p = F.param("p", p0)
    g = F.tape.backward(ad.scale(ad.sum_(ad.square(p)), 0.5))
    np.testing.assert_allclose(g, p0, rtol=0, atol=1e-15)


def test_grad_check_quadratic_form(rng):
    M = rng.normal(size=(5, 5))
    def quad(F, x):
        v = F.param("x", x.reshape(1, 5))
        return F.sum(F.mul(F.matmul(v, M), v))

    res = grad_check(quad, rng.normal(size=5))
    assert res.worst <= 1e-9


def test_every_primitive_against_differences(rng):
    x0 = rng.uniform(0.5, 1.5, size=(2, 3))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))

    def f(F, flat):
        x = F.param("x", flat.reshape(2, 3))
        h = F.tanh(F.add(F.matmul(x, w), b))
        s = F.sigmoid(F.sub(F.scale(h, 2.0), 0.1))
        r = F.reciprocal(F.sqrt(F.add(F.square(x), 1.0)))
        c = F.concat([s, F.transpose(F.reshape(r, (3, 2)))], axis=-1)
        part = c[:, 1:5]
        return F.sum(F.mul(part, F.sum(x, axis=1, keepdims=True)))

    assert grad_check(f, x0.ravel()).ok(1e-7, 1e-10)


def test_broadcast_adjoints_reduce_to_operand_shapes(rng):
    F = TapeOps()
    a = F.param("a", rng.normal(size=(4, 1, 3)))
    b = F.param("b", rng.normal(size=(3,)))
    loss = ad.sum_(ad.mul(ad.add(a, b), rng.normal(size=(4, 5, 3))))
    named = F.tape.named_grads(F.tape.backward(loss))
    assert named["a"].shape == (4, 1, 3) and named["b"].shape == (3,)


def test_gradient_linearity(rng):
    p0 = rng.normal(size=(6, 1))
    W = rng.normal(size=(6, 6))

    def grads(a, b):
        F = TapeOps()
        p = F.param("p", p0)
        f = F.sum(F.tanh(F.matmul(W, p)))
        g = F.sum(F.square(F.sigmoid(p)))
        return F.tape.backward(F.add(F.scale(f, a), F.scale(g, b)))

    combo = grads(1.7, -0.4)
    assert np.abs(combo - (1.7 * grads(1, 0) - 0.4 * grads(0, 1))).max() <= 1e-12


def test_backward_twice_is_bit_identical(rng):
    F = TapeOps()
    p = F.param("p", rng.normal(size=(3, 3)))
    loss = F.sum(F.tanh(F.matmul(p, p)))
    assert np.array_equal(F.tape.backward(loss), F.tape.backward(loss))


def test_complex_matmul_pairs_match_complex_arithmetic(rng):
    A = rng.normal(size=(5, 4, 2)) + 1j * rng.normal(size=(5, 4, 2))
    B = rng.normal(size=(5, 2, 3)) + 1j * rng.normal(size=(5, 2, 3))
    re, im = ad.cmatmul(NumpyOps, A.real, A.imag, B.real, B.imag)
    assert np.abs(re + 1j * im - A @ B).max() <= 1e-13
    F = TapeOps()
    vr, vi = ad.cmatmul(F, F.param("ar", A.real), F.param("ai", A.imag), B.real, B.imag)
    assert np.abs(vr.value + 1j * vi.value - A @ B).max() <= 1e-13
    dr, di = ad.cdagger(NumpyOps, A.real, A.imag)
    np.testing.assert_array_equal(dr + 1j * di, np.conj(np.swapaxes(A, -1, -2)))


def test_stop_gradient_blocks_flow():
    F = TapeOps()
    p = F.param("p", 2.0)
    loss = F.add(F.square(p), F.square(F.stop_gradient(p)))
    assert F.tape.backward(loss)[0] == pytest.approx(4.0)


def test_unreachable_params_get_zero():
    F = TapeOps()
    p = F.param("p", 1.0)
    F.param("unused", np.ones(3))
    g = F.tape.backward(F.square(p))
    assert g.tolist() == [2.0, 0.0, 0.0, 0.0]


def test_errors():
    F, G = TapeOps(), TapeOps()
    a = F.param("a", np.ones(3))
    with pytest.raises(ShapeError):
        ad.add(a, np.ones(4))
    with pytest.raises(TapeError):
        ad.add(a, G.param("b", np.ones(3)))
    with pytest.raises(TapeError):
        F.tape.backward(a)
    with pytest.raises(TapeError):
        G.tape.backward(F.sum(a))


def test_single_kraus_update_graph(rng):
    rho = qcore_state(rng)
    h = rng.normal(size=(1, 6))
    target = qcore_state(rng)

    def f(F, flat):
        w = F.param("w", flat[:96].reshape(6, 16))
        b = F.param("b", flat[96:])
        vr, vi = heads.build_V(h, w, b, F)
        qr, qi = heads.thin_qr_pairs(vr, vi, F)
        outr, outi = heads.kraus_update_pairs(rho.real[None], rho.imag[None], qr, qi, F)
        return F.sum(F.add(F.square(F.sub(outr, target.real)), F.square(F.sub(outi, target.imag))))

    assert grad_check(f, rng.normal(size=112) * 0.4).worst <= 1e-6


def qcore_state(rng):
    from qtw import qcore

    r = rng.normal(size=3)
    r *= rng.uniform() / np.linalg.norm(r)
    return qcore.bloch_to_rho(r)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_tape_and_numpy_namespaces_agree(vals):
    x = np.array(vals).reshape(2, 2)

    def f(F, arr):
        v = F.param("x", arr)
        return F.sum(F.mul(F.sigmoid(v), F.tanh(F.matmul(v, F.transpose(v)))))

    F = TapeOps()
    assert float(f(F, x).value) == pytest.approx(float(f(NumpyOps, x)), abs=1e-15)
