import math

import numpy as np
import pytest

from danet import net
from danet.tensorio import FormatError


def tiny(seed=0, **kw):
    cfg = net.NetConfig(**{"n_layers": 1, "hidden": 2, "K": 2, "F": 3, **kw})
    rng = np.random.default_rng(seed)
    params = {k: rng.uniform(-0.8, 0.8, size=v.shape)
              for k, v in net.init_params(cfg, seed, dtype=np.float64).items()}
    return cfg, params


def scalar_lstm(W, U, b, xs):
    """Plain-Python LSTM over a list of input vectors; gate order i, f, o, g."""
    H = len(U)
    h = [0.0] * H
    c = [0.0] * H
    out = []
    for x in xs:
        z = [b[j] + sum(x[i] * W[i][j] for i in range(len(x)))
             + sum(h[i] * U[i][j] for i in range(H)) for j in range(4 * H)]
        sg = lambda q: 1.0 / (1.0 + math.exp(-q))
        ig = [sg(z[j]) for j in range(H)]
        fg = [sg(z[H + j]) for j in range(H)]
        og = [sg(z[2 * H + j]) for j in range(H)]
        gg = [math.tanh(z[3 * H + j]) for j in range(H)]
        c = [fg[j] * c[j] + ig[j] * gg[j] for j in range(H)]
        h = [og[j] * math.tanh(c[j]) for j in range(H)]
        out.append(h)
    return out


def scalar_forward(params, feats, cfg):
    T = feats.shape[1]
    xs = [list(feats[:, t]) for t in range(T)]
    for layer in range(cfg.n_layers):
        p = lambda d, n: params[f"l{layer}.{d}.{n}"].tolist()
        fw = scalar_lstm(p("fw", "W"), p("fw", "U"), p("fw", "b"), xs)
        bw = scalar_lstm(p("bw", "W"), p("bw", "U"), p("bw", "b"), xs[::-1])[::-1]
        xs = [fw[t] + bw[t] for t in range(T)]
    Wo, bo = params["out.W"], params["out.b"]
    rows = []
    for t in range(T):
        e = [math.tanh(bo[j] + sum(xs[t][i] * Wo[i, j] for i in range(len(xs[t]))))
             for j in range(cfg.K * cfg.F)]
        for f in range(cfg.F):
            rows.append(e[f * cfg.K:(f + 1) * cfg.K])
    return np.array(rows)


def test_forward_matches_scalar_oracle():
    cfg, p = tiny(1)
    feats = np.random.default_rng(2).standard_normal((3, 2))
    v, _ = net.forward(p, feats, cfg)
    np.testing.assert_allclose(v, scalar_forward(p, feats, cfg), atol=1e-12)


def test_two_layer_forward_matches_scalar_oracle():
    cfg, p = tiny(3, n_layers=2, hidden=3, F=4)
    feats = np.random.default_rng(4).standard_normal((4, 5))
    v, _ = net.forward(p, feats, cfg)
    np.testing.assert_allclose(v, scalar_forward(p, feats, cfg), atol=1e-12)


def test_shapes():
    cfg = net.NetConfig()
    p = net.init_params(cfg, 0)
    assert p["out.W"].shape == (2 * 64, 20 * 129)
    assert net.NetConfig.full_scale().K * net.NetConfig.full_scale().F == 2580
    big = net.param_shapes(net.NetConfig.full_scale())
    assert big["out.W"] == (1200, 2580)
    v, _ = net.forward(p, np.zeros((129, 1)), cfg)
    assert v.shape == (129, 20)
    vb, _ = net.forward(p, np.zeros((3, 129, 7)), cfg)
    assert vb.shape == (3, 7 * 129, 20)


def test_init_deterministic_and_biases():
    cfg = net.NetConfig(hidden=8, F=10, K=3)
    a = net.init_params(cfg, 5)
    b = net.init_params(cfg, 5)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    bias = a["l0.fw.b"]
    assert np.all(bias[8:16] == 1) and np.all(bias[:8] == 0) and np.all(bias[16:] == 0)
    r = 1 / np.sqrt(10)
    assert np.abs(a["l0.fw.W"]).max() <= r


def test_order_sensitivity():
    cfg, p = tiny(5)
    feats = np.random.default_rng(6).standard_normal((3, 4))
    v1, _ = net.forward(p, feats, cfg)
    v2, _ = net.forward(p, feats[:, ::-1], cfg)
    assert not np.allclose(v1, v2)


def test_batched_equals_single():
    cfg, p = tiny(7, hidden=3, n_layers=2)
    feats = np.random.default_rng(8).standard_normal((4, 3, 5))
    vb, _ = net.forward(p, feats, cfg)
    for i in range(4):
        np.testing.assert_allclose(vb[i], net.forward(p, feats[i], cfg)[0], atol=1e-14)


def test_divergence_detected():
    cfg, p = tiny(0)
    p["out.b"][:] = np.nan
    with pytest.raises(net.NumericalDivergence, match="numerical divergence"):
        net.forward(p, np.zeros((3, 2)), cfg)


def finite_difference_check(cfg, p, feats, G, h=1e-5):
    v, tape = net.forward(p, feats, cfg)
    grads = net.backward(p, tape, G)
    worst = 0.0
    for name, arr in p.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = np.sum(net.forward(p, feats, cfg)[0] * G)
            arr[idx] = old - h
            down = np.sum(net.forward(p, feats, cfg)[0] * G)
            arr[idx] = old
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(grads[name][idx]), 1e-6)
            worst = max(worst, abs(fd - grads[name][idx]) / denom)
    return worst


@pytest.mark.parametrize("activation", ["tanh", "identity"])
def test_backward_finite_differences(activation):
    cfg, p = tiny(9, n_layers=2, hidden=3, F=4, activation=activation)
    rng = np.random.default_rng(10)
    feats = rng.standard_normal((4, 3))
    G = rng.standard_normal((12, 2))
    assert finite_difference_check(cfg, p, feats, G) < 1e-4


def test_backward_linearity_and_zero():
    cfg, p = tiny(11, hidden=3)
    feats = np.random.default_rng(12).standard_normal((3, 4))
    v, tape = net.forward(p, feats, cfg)
    zero = net.backward(p, tape, np.zeros_like(v))
    assert all(not np.any(g) for g in zero.values())
    G = np.random.default_rng(13).standard_normal(v.shape)
    g1 = net.backward(p, tape, G)
    g2 = net.backward(p, tape, 2 * G)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        net.backward(p, tape, np.zeros((5, 2)))


def test_checkpoint_round_trip(tmp_path):
    cfg = net.NetConfig(hidden=8, F=129, K=4)
    p = net.init_params(cfg, 3)
    stats = (np.linspace(-1, 1, 129), np.linspace(1, 2, 129))
    path = tmp_path / "m.bin"
    net.save_checkpoint(path, p, cfg, stats)
    q, cfg2, stats2 = net.load_checkpoint(path)
    assert cfg2 == cfg
    assert all(np.array_equal(p[k], q[k]) for k in p)
    np.testing.assert_array_equal(stats2[0], stats[0].astype(np.float32))
    feats = np.random.default_rng(0).standard_normal((129, 6)).astype(np.float32)
    assert np.array_equal(net.forward(p, feats, cfg)[0], net.forward(q, feats, cfg2)[0])


def test_checkpoint_corruption(tmp_path):
    cfg = net.NetConfig(hidden=4, F=5, K=2)
    path = tmp_path / "m.bin"
    net.save_checkpoint(path, net.init_params(cfg), cfg, (np.zeros(5), np.ones(5)))
    blob = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXXX" + blob[6:])
    with pytest.raises(FormatError, match="DANET1"):
        net.load_checkpoint(bad)
    bad.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated"):
        net.load_checkpoint(bad)
    bad.write_bytes(blob.replace(b'"version": 1', b'"version": 9'))
    with pytest.raises(FormatError, match="version"):
        net.load_checkpoint(bad)
    bad.write_bytes(blob.replace(b'"hidden": 4', b'"hidden": 5'))
    with pytest.raises(FormatError):
        net.load_checkpoint(bad)
