import numpy as np
import pytest

from plood import autodiff as ad


def finite_diff(fn, params, eps=1e-5):
    """Independent central-difference gradients for each param tensor."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            v = flat[i]
            flat[i] = v + eps
            f_plus = float(fn().data)
            flat[i] = v - eps
            f_minus = float(fn().data)
            flat[i] = v
            gf[i] = (f_plus - f_minus) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        worst = max(worst, err.max())
    return worst


def test_relu_values():
    out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_uniform():
    out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(scale=5.0, size=(4, 7))
        s = ad.softmax(ad.Tensor(x)).data
        assert (s > 0).all()
        assert np.abs(s.sum(axis=-1) - 1.0).max() <= 1e-12


def test_conv_all_ones_hand_count():
    # 4x4 ones image, 3x3 ones kernel, same padding: corner 4, edge 6, center 9
    x = ad.Tensor(np.ones((1, 1, 4, 4)))
    w = ad.Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w).data[0, 0]
    expected = np.array(
        [
            [4.0, 6.0, 6.0, 4.0],
            [6.0, 9.0, 9.0, 6.0],
            [6.0, 9.0, 9.0, 6.0],
            [4.0, 6.0, 6.0, 4.0],
        ]
    )
    assert np.array_equal(out, expected)


def test_evaluate_deterministic():
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 4, 4))
    w = rng.normal(size=(3, 1, 3, 3))

    def run():
        return ad.maxpool2(ad.relu(ad.conv2d(ad.Tensor(x), ad.Tensor(w)))).data

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_square_gradient():
    x = ad.Tensor(3.0)
    y = x * x
    ad.backward(y, np.asarray(1.0))
    assert y.data == 9.0
    assert x.grad == pytest.approx(6.0, abs=1e-15)


def test_relu_dead_region_gradient():
    x = ad.Tensor(-1.0)
    y = ad.relu(x)
    ad.backward(y, np.asarray(1.0))
    assert x.grad == 0.0


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.normal(size=(4, 5)))
    w1 = ad.Tensor(rng.normal(size=(5, 8)) * 0.5)
    b1 = ad.Tensor(rng.normal(size=(8,)) * 0.1)
    w2 = ad.Tensor(rng.normal(size=(8, 3)) * 0.5)
    b2 = ad.Tensor(rng.normal(size=(3,)) * 0.1)
    params = [w1, b1, w2, b2]

    def fn():
        h = ad.relu(x @ w1 + b1)
        return ad.mean(ad.softmax(h @ w2 + b2) * ad.softmax(h @ w2 + b2))

    out = fn()
    ad.backward(out)
    analytic = [p.grad.copy() for p in params]
    numeric = finite_diff(fn, params)
    assert max_rel_err(analytic, numeric) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.normal(size=(2, 1, 4, 4)))
    w = ad.Tensor(rng.normal(size=(2, 1, 3, 3)) * 0.5)
    a = ad.Tensor(rng.normal(size=(2, 6)))
    b = ad.Tensor(rng.normal(size=(6, 3)))
    c = ad.Tensor(rng.normal(size=(3,)))
    d = ad.Tensor(rng.random((2, 3)) + 0.5)
    coef = rng.normal(size=(2, 11))
    params = [x, w, a, b, c, d]

    def fn():
        conv = ad.maxpool2(ad.relu(ad.conv2d(x, w)))  # (2,2,2,2)
        flat = ad.reshape(conv, (2, 8))
        lin = a @ b + c
        sm = ad.softmax(ad.concat([lin, flat], axis=1))
        lg = ad.log(ad.clamp_min(sm, 1e-12))
        prod = lg * ad.Tensor(coef)
        centered = ad.log(d) - ad.reshape(ad.mean(d, axis=1), (2, 1))
        return ad.mean(prod) + ad.tsum(centered * centered) * ad.Tensor(0.1)

    out = fn()
    ad.backward(out)
    analytic = [p.grad.copy() for p in params]
    numeric = finite_diff(fn, params)
    assert max_rel_err(analytic, numeric) <= 1e-4


def test_gradient_check_linear_exact():
    w = ad.Tensor(2.0)
    err = ad.gradient_check(lambda: w * ad.Tensor(5.0), [w])
    assert err <= 1e-10


def test_gradient_check_softmax_cross_entropy():
    rng = np.random.default_rng(11)
    logits = ad.Tensor(rng.normal(size=(4, 5)))
    onehot = np.zeros((4, 5))
    onehot[np.arange(4), rng.integers(0, 5, 4)] = 1.0

    def fn():
        p = ad.clamp_min(ad.softmax(logits), 1e-12)
        return ad.mean(ad.tsum(ad.log(p) * ad.Tensor(-onehot), axis=1))

    assert ad.gradient_check(fn, [logits]) <= 1e-4


def test_gradient_check_detects_corrupted_gradient():
    # fault injection: +0.1 on the analytic gradient must trip the 1e-2 bar
    w = ad.Tensor(2.0)
    x = 5.0

    def fn():
        return w * ad.Tensor(x)

    out = fn()
    ad.backward(out)
    corrupted = float(w.grad) + 0.1
    eps = 1e-5
    w.data += eps
    f_plus = float(fn().data)
    w.data -= 2 * eps
    f_minus = float(fn().data)
    w.data += eps
    fd = (f_plus - f_minus) / (2 * eps)
    assert abs(corrupted - fd) / max(1.0, abs(fd)) > 1e-2


def test_gradient_check_rejects_nonscalar():
    w = ad.Tensor([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.gradient_check(lambda: w * ad.Tensor([1.0, 1.0]), [w])


def test_shape_mismatch_errors_name_the_node():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(a, b)
    with pytest.raises(ad.ShapeError, match=str(a.node_id)):
        ad.add(a, ad.Tensor(np.ones((7, 7))))


def test_nonfinite_intermediate_raises():
    with pytest.raises(ad.NonFiniteError, match="log"):
        ad.log(ad.Tensor([0.0, 1.0]))


def test_backward_seed_shape_validated():
    x = ad.Tensor([1.0, 2.0])
    y = ad.relu(x)
    with pytest.raises(ad.ShapeError):
        ad.backward(y, np.ones((3,)))


def test_maxpool_routes_to_first_max_on_ties():
    x = ad.Tensor(np.zeros((1, 1, 2, 2)))
    out = ad.maxpool2(x)
    ad.backward(out, np.ones((1, 1, 1, 1)))
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    assert np.array_equal(x.grad, expected)


def test_adam_zero_gradient_is_fixed_point():
    p = ad.Tensor([1.0, -2.0])
    opt = ad.Adam([p], lr=1e-3)
    before = p.data.copy()
    opt.step([np.zeros(2)])
    assert np.array_equal(p.data, before)
    assert opt.t == 1
    # nonzero moments decay geometrically toward 0 under zero gradients
    opt.m[0][:] = 0.5
    opt.v[0][:] = 0.25
    opt.step([np.zeros(2)])
    assert np.allclose(opt.m[0], 0.45) and np.allclose(opt.v[0], 0.25 * 0.999)


def test_adam_first_step_is_minus_lr():
    # hand evaluation: m=0.1, v=0.001, bias-corrected m^=1, v^=1
    # theta <- 0 - lr * 1 / (1 + eps) = -9.9999999e-4
    p = ad.Tensor(0.0)
    opt = ad.Adam([p], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step([np.asarray(1.0)])
    assert float(p.data) == pytest.approx(-1e-3, abs=1e-9)


def test_adam_descends_convex_quadratic():
    # loss = (p - 3)^2, gradient 2(p - 3); two steps must decrease the loss
    p = ad.Tensor(0.0)
    opt = ad.Adam([p], lr=1e-2)
    losses = []
    for _ in range(2):
        losses.append(float((p.data - 3.0) ** 2))
        opt.step([np.asarray(2.0 * (float(p.data) - 3.0))])
    losses.append(float((p.data - 3.0) ** 2))
    assert losses[1] < losses[0] and losses[2] < losses[1]


def test_adam_shape_mismatch():
    p = ad.Tensor([1.0, 2.0])
    opt = ad.Adam([p])
    with pytest.raises(ad.ShapeError):
        opt.step([np.zeros(3)])


def test_adam_rejects_bad_decay():
    with pytest.raises(ValueError):
        ad.Adam([ad.Tensor(0.0)], beta1=1.0)
