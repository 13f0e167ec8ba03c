
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from danet import attractor as att


def onehot(labels, C):
    return np.eye(C)[labels]


def random_instance(rng, F=2, T=2, C=2, K=2):
    N = F * T
    labels = rng.integers(0, C, N)
    labels[:C] = np.arange(C)  # every source owns a bin
    x = rng.random((F, T)) + 0.2
    s = rng.random((F, T, C)) * x[..., None]
    return x, s, rng.standard_normal((N, K)), onehot(labels, C)


# --- scalar-loop oracles ---------------------------------------------------

def oracle_masks(v, a, head):
    N, C = v.shape[0], a.shape[0]
    out = np.zeros((N, C))
    for i in range(N):
        logits = [sum(v[i, k] * a[c, k] for k in range(v.shape[1])) for c in range(C)]
        if head == "sigmoid":
            out[i] = [1 / (1 + np.exp(-z)) for z in logits]
        else:
            e = [np.exp(z) for z in logits]
            out[i] = [q / sum(e) for q in e]
    return out


def oracle_loss(x, s, m):
    F, T, C = s.shape
    total = 0.0
    for f in range(F):
        for t in range(T):
            for c in range(C):
                total += (s[f, t, c] - x[f, t] * m[f, t, c]) ** 2
    return total / (F * T * C)


def oracle_dc(v, y):
    A = y @ y.T - v @ v.T
    return float(np.sum(A * A))


# --- row convention --------------------------------------------------------

def test_rows_time_major():
    a = np.arange(6).reshape(3, 2)  # F=3, T=2
    rows = att.to_rows(a)
    assert list(rows) == [a[0, 0], a[1, 0], a[2, 0], a[0, 1], a[1, 1], a[2, 1]]
    np.testing.assert_array_equal(att.from_rows(rows, 3, 2), a)


# --- attractors ------------------------------------------------------------

def test_single_source_attractor_is_mean():
    v = np.random.default_rng(0).standard_normal((10, 3))
    a = att.estimate_attractors(v, np.ones((10, 1)))
    np.testing.assert_allclose(a[0], v.mean(axis=0), atol=1e-12)


def test_two_clusters():
    rng = np.random.default_rng(1)
    v = np.vstack([rng.normal([3, 0], 0.1, (20, 2)), rng.normal([-3, 1], 0.1, (30, 2))])
    y = onehot(np.r_[np.zeros(20, int), np.ones(30, int)], 2)
    a = att.estimate_attractors(v, y)
    np.testing.assert_allclose(a[0], v[:20].mean(0), atol=1e-12)
    np.testing.assert_allclose(a[1], v[20:].mean(0), atol=1e-12)


def test_threshold_single_surviving_bin():
    # 10 bins; the loudest bin is the only source-1 bin at the 90th percentile
    logmag = np.arange(10, dtype=float)
    w = att.salience_weights(logmag, 90)
    assert w.sum() == 1 and w[9] == 1
    labels = np.zeros(10, int)
    labels[9] = 1
    labels[3] = 1
    v = np.random.default_rng(2).standard_normal((10, 2))
    y = onehot(labels, 2)
    w[8] = 1  # keep one source-0 bin too
    a = att.estimate_attractors(v, y, w)
    np.testing.assert_allclose(a[1], v[9])
    np.testing.assert_allclose(a[0], v[8])


def test_threshold_zero_keeps_everything():
    assert att.salience_weights(np.random.default_rng(0).random((4, 5)), 0).sum() == 20


def test_empty_source_error():
    v = np.zeros((4, 2))
    y = onehot(np.zeros(4, int), 2)
    with pytest.raises(att.EmptySourceError, match="empty source under threshold"):
        att.estimate_attractors(v, y)


# --- masks -----------------------------------------------------------------

def test_orthogonal_embedding_gives_half():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    v = np.array([[0.0, 0.0]])
    np.testing.assert_allclose(att.masks(v, a, "sigmoid"), 0.5)
    np.testing.assert_allclose(att.masks(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]),
                                         "softmax"), 0.5)


@pytest.mark.parametrize("head", ["sigmoid", "softmax"])
def test_masks_match_oracle(head):
    rng = np.random.default_rng(3)
    v = rng.standard_normal((5, 3))
    a = rng.standard_normal((2, 3))
    np.testing.assert_allclose(att.masks(v, a, head), oracle_masks(v, a, head), atol=1e-12)


def test_mask_reshape_layout():
    rng = np.random.default_rng(4)
    v = rng.standard_normal((6, 2))
    a = rng.standard_normal((2, 2))
    m = att.masks(v, a, "sigmoid", F=3, T=2)
    assert m.shape == (3, 2, 2)
    rows = att.masks(v, a, "sigmoid")
    assert m[2, 1, 0] == rows[1 * 3 + 2, 0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 3))
def test_mask_invariants(seed, C):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((20, 4))
    a = rng.standard_normal((C, 4))
    sm = att.masks(v, a, "softmax")
    assert np.allclose(sm.sum(axis=1), 1, atol=1e-6)
    sg = att.masks(v, a, "sigmoid")
    assert np.all((sg > 0) & (sg < 1))


# --- loss ------------------------------------------------------------------

def test_loss_exact_reconstruction_and_zero_mask():
    rng = np.random.default_rng(5)
    x = rng.random((3, 2)) + 0.1
    m = rng.random((3, 2, 2))
    s = x[..., None] * m
    assert att.loss(x, s, m) == 0.0
    assert att.loss(x, s, np.zeros_like(m)) == pytest.approx(np.mean(s ** 2))
    assert att.loss(x, s, np.zeros_like(m), normalize=False) == pytest.approx(np.sum(s ** 2))


def test_loss_matches_oracle():
    rng = np.random.default_rng(6)
    x = rng.random((3, 2))
    s = rng.random((3, 2, 2))
    m = rng.random((3, 2, 2))
    assert att.loss(x, s, m) == pytest.approx(oracle_loss(x, s, m), rel=1e-12)


def fd_grad(x, s, v, y, w, head, flow, h=1e-5):
    a_fixed = att.estimate_attractors(v, y, w)

    def f(vv):
        a = att.estimate_attractors(vv, y, w) if flow else a_fixed
        return att.loss(x, s, att.masks(vv, a, head, *x.shape))

    g = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        vp, vm = v.copy(), v.copy()
        vp[idx] += h
        vm[idx] -= h
        g[idx] = (f(vp) - f(vm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("head", ["sigmoid", "softmax"])
@pytest.mark.parametrize("flow", [True, False])
def test_loss_backward_finite_differences(head, flow):
    rng = np.random.default_rng(7)
    x, s, v, y = random_instance(rng, F=2, T=2, C=2, K=2)
    _, g = att.loss_backward(x, s, v, y, None, head, flow)
    assert rel_err(g, fd_grad(x, s, v, y, None, head, flow)) < 1e-4


def test_loss_backward_with_threshold_weights():
    rng = np.random.default_rng(8)
    x, s, v, y = random_instance(rng, F=3, T=3, C=3, K=3)
    w = np.ones(9)
    w[[5, 7]] = 0
    _, g = att.loss_backward(x, s, v, y, w, "softmax", True)
    assert rel_err(g, fd_grad(x, s, v, y, w, "softmax", True)) < 1e-4


def test_loss_backward_many_random_instances():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        C = int(rng.integers(2, 4))
        F, T, K = int(rng.integers(C, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x, s, v, y = random_instance(rng, F, T, C, K)
        head = rng.choice(["sigmoid", "softmax"])
        _, g = att.loss_backward(x, s, v, y, None, head, True)
        worst = max(worst, rel_err(g, fd_grad(x, s, v, y, None, head, True)))
    assert worst < 1e-4


def test_saturated_minimum_has_vanishing_gradient():
    labels = np.array([0, 1, 1, 0, 1, 0])
    y = onehot(labels, 2)
    x = np.array([[1.0, 2.0, 0.5], [0.7, 1.5, 3.0]]).T  # F=3, T=2
    s = att.from_rows(att.to_rows(x)[:, None] * y, 3, 2)
    alpha = 5.0
    v = alpha * (2 * y - 1)  # attractors alpha*(1,-1) and alpha*(-1,1); logits +-2*alpha^2
    value, g = att.loss_backward(x, s, v, y, None, "sigmoid", True)
    assert value < 1e-30
    assert np.linalg.norm(g) < 1e-6


def test_fixed_attractor_gradient_is_classification_layer_gradient():
    # with flow disabled the gradient equals that of a dense layer with weights A
    rng = np.random.default_rng(10)
    x, s, v, y = random_instance(rng, F=2, T=3, C=2, K=3)
    a = att.estimate_attractors(v, y)
    _, g = att.loss_backward(x, s, v, y, None, "sigmoid", flow_through_attractor=False)
    xr, sr = att.to_rows(x), att.to_rows(s)
    m = 1 / (1 + np.exp(-(v @ a.T)))
    dm = -2 * xr[:, None] * (sr - xr[:, None] * m) / sr.size
    np.testing.assert_allclose(g, (dm * m * (1 - m)) @ a, atol=1e-14)


def test_attractor_path_gradient_sums_to_zero_per_source_when_tied():
    # When every bin of a source shares one embedding, moving all of that
    # source's bins together moves its attractor identically in both modes:
    # the summed per-source gradients of the attractor path then equal dA.
    rng = np.random.default_rng(11)
    labels = np.array([0, 0, 1, 1, 0, 1])
    y = onehot(labels, 2)
    e = rng.standard_normal((2, 2))
    v = e[labels]
    x = rng.random((3, 2)) + 0.1
    s = rng.random((3, 2, 2))
    _, g_full = att.loss_backward(x, s, v, y, None, "sigmoid", True)
    _, g_fixed = att.loss_backward(x, s, v, y, None, "sigmoid", False)
    # gradient w.r.t. the shared value e_c, by finite differences on the tied parameterization
    def f(ee):
        vv = ee[labels]
        return att.loss(x, s, att.masks(vv, att.estimate_attractors(vv, y), "sigmoid", 3, 2))
    fd = np.zeros_like(e)
    for idx in np.ndindex(e.shape):
        ep, em = e.copy(), e.copy()
        ep[idx] += 1e-6
        em[idx] -= 1e-6
        fd[idx] = (f(ep) - f(em)) / 2e-6
    np.testing.assert_allclose(y.T @ g_full, fd, atol=1e-8)
    assert not np.allclose(y.T @ g_fixed, fd, atol=1e-8)


def test_permutation_equivariance():
    rng = np.random.default_rng(12)
    for _ in range(20):
        x, s, v, y = random_instance(rng, F=3, T=3, C=3, K=2)
        perm = rng.permutation(3)
        a = att.estimate_attractors(v, y)
        ap = att.estimate_attractors(v, y[:, perm])
        np.testing.assert_array_equal(ap, a[perm])
        for head in ("sigmoid", "softmax"):
            m = att.masks(v, a, head, 3, 3)
            mp = att.masks(v, ap, head, 3, 3)
            np.testing.assert_array_equal(mp, m[..., perm])
            assert att.loss(x, s[..., perm], mp) == att.loss(x, s, m)


# --- deep clustering objectives --------------------------------------------

def test_dc_loss_zero_at_v_equals_y():
    y = onehot(np.array([0, 1, 1, 0, 2]), 3)
    assert abs(att.dc_loss(y, y)) <= 1e-12
    assert abs(att.dc_reduced_loss(y, y)) <= 1e-12


def test_dc_loss_matches_materialized_oracle():
    rng = np.random.default_rng(13)
    y = onehot(np.array([0, 1, 0, 1, 1, 0]), 2)
    v = rng.standard_normal((6, 2))
    assert att.dc_loss(v, y) == pytest.approx(oracle_dc(v, y), rel=1e-12)
    assert att.dc_loss(2 * v, y) == pytest.approx(oracle_dc(2 * v, y), rel=1e-12)
    assert att.dc_loss(2 * v, y) != pytest.approx(att.dc_loss(v, y))


def test_dc_gradient():
    rng = np.random.default_rng(14)
    y = onehot(rng.integers(0, 2, 7), 2)
    v = rng.standard_normal((7, 3))
    _, g = att.dc_loss_backward(v, y)
    fd = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        vp, vm = v.copy(), v.copy()
        vp[idx] += 1e-6
        vm[idx] -= 1e-6
        fd[idx] = (oracle_dc(vp, y) - oracle_dc(vm, y)) / 2e-6
    assert rel_err(g, fd) < 1e-6


def test_dc_reduced_matches_oracle():
    rng = np.random.default_rng(15)
    y = onehot(np.array([0, 1, 2, 0, 1, 2, 2]), 3)
    v = rng.standard_normal((7, 2))
    U = np.linalg.inv(y.T @ y)
    D = y.T - U @ y.T @ v @ v.T
    assert att.dc_reduced_loss(v, y) == pytest.approx(float(np.sum(D * D)), rel=1e-12)


def test_centroid_product_equals_attractor_average():
    rng = np.random.default_rng(16)
    for _ in range(100):
        C = int(rng.integers(2, 4))
        labels = rng.integers(0, C, 12)
        labels[:C] = np.arange(C)
        y = onehot(labels, C)
        v = rng.standard_normal((12, 3))
        np.testing.assert_allclose(att.dc_centroids(v, y), att.estimate_attractors(v, y),
                                   atol=1e-12, rtol=0)


def test_dc_reduced_singular():
    y = onehot(np.zeros(4, int), 2)
    with pytest.raises(att.EmptySourceError, match="source with no bins"):
        att.dc_reduced_loss(np.zeros((4, 2)), y)
