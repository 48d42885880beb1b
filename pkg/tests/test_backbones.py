import math

import numpy as np
import pytest

from qtw import backbones
from qtw.ad import TapeOps
from qtw.backbones import ModelConfig
from qtw.model import Model
from qtw.train import layerwise_grad_norms


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def loop_rnn(h, x, p):
    H = len(h)
    return [math.tanh(sum(x[i] * p["w_ih"][i][j] for i in range(len(x)))
                      + sum(h[k] * p["w_hh"][k][j] for k in range(H)) + p["b"][j]) for j in range(H)]


def loop_gru(h, x, p):
    H = len(h)

    def gx(j):
        return sum(x[i] * p["w_ih"][i][j] for i in range(len(x))) + p["b"][j]

    z = [sig(gx(j) + sum(h[k] * p["w_hh_zr"][k][j] for k in range(H))) for j in range(H)]
    r = [sig(gx(H + j) + sum(h[k] * p["w_hh_zr"][k][H + j] for k in range(H))) for j in range(H)]
    n = [math.tanh(gx(2 * H + j) + sum(r[k] * h[k] * p["w_hh_n"][k][j] for k in range(H))) for j in range(H)]
    return [(1 - z[j]) * n[j] + z[j] * h[j] for j in range(H)]


def loop_lstm(h, c, x, p):
    H = len(h)

    def g(j):
        return (sum(x[i] * p["w_ih"][i][j] for i in range(len(x)))
                + sum(h[k] * p["w_hh"][k][j] for k in range(H)) + p["b"][j])

    i_ = [sig(g(j)) for j in range(H)]
    f_ = [sig(g(H + j)) for j in range(H)]
    c_ = [math.tanh(g(2 * H + j)) for j in range(H)]
    o_ = [sig(g(3 * H + j)) for j in range(H)]
    c_new = [f_[j] * c[j] + i_[j] * c_[j] for j in range(H)]
    return [o_[j] * math.tanh(c_new[j]) for j in range(H)], c_new


def random_layer(kind, H, n_in, rng, scale=0.6):
    cfg = ModelConfig(kind=kind, hidden_dim=H, input_dim=n_in)
    return {name[3:]: rng.normal(scale=scale, size=shape) for name, shape in backbones.layer_shapes(cfg, 0)}


def as_lists(p):
    return {k: v.tolist() for k, v in p.items()}


@pytest.mark.parametrize("kind", ["rnn", "gru"])
def test_step_matches_scalar_loop(kind, rng):
    H, n_in = 5, 2
    p = random_layer(kind, H, n_in, rng)
    h, x = rng.normal(size=H), rng.normal(size=n_in)
    step = {"rnn": backbones.rnn_step, "gru": backbones.gru_step}[kind]
    ref = {"rnn": loop_rnn, "gru": loop_gru}[kind](h.tolist(), x.tolist(), as_lists(p))
    out = step(h[None], x[None], p)[0]
    assert np.abs(out - ref).max() <= 1e-13


def test_lstm_step_matches_scalar_loop(rng):
    H, n_in = 4, 3
    p = random_layer("lstm", H, n_in, rng)
    h, c, x = rng.normal(size=H), rng.normal(size=H), rng.normal(size=n_in)
    ref_h, ref_c = loop_lstm(h.tolist(), c.tolist(), x.tolist(), as_lists(p))
    out_h, out_c = backbones.lstm_step((h[None], c[None]), x[None], p)
    assert np.abs(out_h[0] - ref_h).max() <= 1e-13
    assert np.abs(out_c[0] - ref_c).max() <= 1e-13


def test_rnn_zero_and_linear_regimes():
    H = 3
    zero = {"w_ih": np.zeros((1, H)), "w_hh": np.zeros((H, H)), "b": np.zeros(H)}
    assert np.all(backbones.rnn_step(np.ones((1, H)), np.ones((1, 1)), zero) == 0)
    ident = {"w_ih": np.eye(H), "w_hh": np.zeros((H, H)), "b": np.zeros(H)}
    x = np.array([[1e-4, -2e-4, 3e-4]])
    np.testing.assert_allclose(backbones.rnn_step(np.ones((1, H)), x, ident), x, rtol=1e-7)


def test_gru_gate_saturation(rng):
    H = 4
    p = random_layer("gru", H, 1, rng)
    h, x = rng.normal(size=(1, H)), rng.normal(size=(1, 1))
    keep = dict(p, b=p["b"].copy())
    keep["b"][:H] = 30.0
    assert np.abs(backbones.gru_step(h, x, keep) - h).max() <= 1e-9
    reset = dict(p, b=p["b"].copy())
    reset["b"][: 2 * H] = -30.0
    expected = np.tanh(x @ p["w_ih"][:, 2 * H :] + p["b"][2 * H :])
    assert np.abs(backbones.gru_step(h, x, reset) - expected).max() <= 1e-9
    assert np.abs(backbones.gru_step(-h, x, reset) - expected).max() <= 1e-9


def test_lstm_gate_saturation(rng):
    H = 3
    p = random_layer("lstm", H, 1, rng)
    h, c, x = rng.normal(size=(1, H)), rng.normal(size=(1, H)), rng.normal(size=(1, 1))
    mem = dict(p, b=p["b"].copy())
    mem["b"][:H] = -30.0
    mem["b"][H : 2 * H] = 30.0
    _, c_new = backbones.lstm_step((h, c), x, mem)
    assert np.abs(c_new - c).max() <= 1e-9
    rst = dict(p, b=p["b"].copy())
    rst["b"][:H] = 30.0
    rst["b"][H : 2 * H] = -30.0
    rst["b"][3 * H :] = 30.0
    h1, c1 = backbones.lstm_step((h, c), x, rst)
    h2, _ = backbones.lstm_step((h, 3 * c - 1), x, rst)
    # the old cell is forgotten; the candidate still reads h through its recurrent block
    assert np.abs(h1 - h2).max() <= 1e-9
    cand = np.tanh(x @ p["w_ih"][:, 2 * H : 3 * H] + h @ p["w_hh"][:, 2 * H : 3 * H] + p["b"][2 * H : 3 * H])
    assert np.abs(c1 - cand).max() <= 1e-9
    assert np.abs(h1 - np.tanh(cand)).max() <= 1e-9


def test_esn_zero_fixed_point_and_reservoir():
    cfg = ModelConfig(kind="esn", hidden_dim=6, seed=3)
    fixed = backbones.reservoir(cfg)
    assert np.all(backbones.esn_step(np.zeros((1, 6)), np.zeros((1, 1)), fixed) == 0)
    again = backbones.reservoir(ModelConfig(kind="esn", hidden_dim=6, seed=3))
    assert all(np.array_equal(a, b) for a, b in zip(fixed, again))
    assert np.max(np.abs(np.linalg.eigvals(fixed[0]))) == pytest.approx(1.0, abs=1e-12)
    assert backbones.n_params(cfg) == 0


def test_esn_reservoir_receives_no_gradient(rng):
    m = Model(ModelConfig(kind="esn", hidden_dim=6), "kraus")
    assert [n for n, _ in m.layout] == ["head.w", "head.b"]
    target = np.broadcast_to(np.diag([0.5, 0.5]).astype(complex), (2, 7, 2, 2))
    norms = layerwise_grad_norms(m, rng.normal(size=(2, 7)), target)
    assert norms["reservoir.w_res"] == 0.0 and norms["reservoir.w_in"] == 0.0
    assert norms["head.w"] > 0


@pytest.mark.parametrize("kind", backbones.KINDS)
def test_zero_record_zero_params_gives_zero_states(kind):
    cfg = ModelConfig(kind=kind, hidden_dim=4)
    zeros = {n: np.zeros(s) for n, s in backbones.param_shapes(cfg)}
    hs = backbones.encode_sequence(cfg, zeros, np.zeros((2, 9)))
    assert all(np.all(h == 0) for h in hs)


@pytest.mark.parametrize("kind, layers", [(k, l) for k in backbones.KINDS for l in (1, 2) if (k, l) != ("esn", 2)])
def test_encode_causality(kind, layers, rng):
    cfg = ModelConfig(kind=kind, hidden_dim=5, layers=layers, seed=2)
    p = backbones.init_params(cfg)
    rec = rng.normal(size=(3, 15))
    full = backbones.encode_sequence(cfg, p, rec)
    for t in (0, 6, 14):
        part = backbones.encode_sequence(cfg, p, rec[:, : t + 1])
        assert np.array_equal(part[t], full[t])


def test_encode_matches_stacked_scalar_oracle(rng):
    cfg = ModelConfig(kind="gru", hidden_dim=3, layers=2, seed=9)
    p = backbones.init_params(cfg)
    rec = rng.normal(size=(1, 12))
    hs = backbones.encode_sequence(cfg, p, rec)
    l0, l1 = (as_lists(backbones.layer_params(cfg, p, l)) for l in (0, 1))
    h0, h1 = [0.0] * 3, [0.0] * 3
    for t in range(12):
        h0 = loop_gru(h0, [rec[0, t]], l0)
        h1 = loop_gru(h1, h0, l1)
        assert np.abs(hs[t][0] - h1).max() <= 1e-12


def test_param_count_and_init_bounds():
    for kind in backbones.KINDS:
        for layers in ((1,) if kind == "esn" else (1, 2)):
            cfg = ModelConfig(kind=kind, hidden_dim=7, layers=layers)
            shapes = backbones.param_shapes(cfg)
            assert backbones.n_params(cfg) == sum(int(np.prod(s)) for _, s in shapes)
            for arr in backbones.init_params(cfg).values():
                assert np.abs(arr).max() <= 1 / np.sqrt(7)
    assert backbones.n_params(ModelConfig(kind="gru", hidden_dim=32)) == 3 * 32 * (1 + 32 + 1)


def test_tbptt_cuts_gradient_not_values(rng):
    cfg = ModelConfig(kind="rnn", hidden_dim=3, seed=1)
    p0 = backbones.init_params(cfg)
    rec = rng.normal(size=(1, 10))

    def last_grad(window):
        F = TapeOps()
        p = {k: F.param(k, v) for k, v in p0.items()}
        hs = backbones.encode_sequence(cfg, p, rec, F, tbptt=window)
        return hs[-1].value, F.tape.backward(F.sum(hs[-1]))

    v_full, g_full = last_grad(0)
    v_cut, g_cut = last_grad(4)
    assert np.array_equal(v_full, v_cut)
    assert not np.allclose(g_full, g_cut)


def test_divergence_detected():
    cfg = ModelConfig(kind="rnn", hidden_dim=2)
    p = {"l0.w_ih": np.full((1, 2), np.nan), "l0.w_hh": np.zeros((2, 2)), "l0.b": np.zeros(2)}
    with pytest.raises(backbones.DivergenceError):
        backbones.encode_sequence(cfg, p, np.ones((1, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(kind="tcn")
    with pytest.raises(ValueError):
        ModelConfig(kind="esn", layers=2)
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=0)
