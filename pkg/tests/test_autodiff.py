"""Finite-difference checks for every autodiff op the package relies on."""

import numpy as np
import pytest

from blockgen import autodiff as ad


def _check_grads(build, arrays, rtol=1e-6, atol=1e-8, eps=1e-5):
    """Compare backprop gradients of scalar build(*tensors) against FD."""
    tensors = [ad.parameter(a) for a in arrays]
    out = build(*tensors)
    out.backward()
    for i, t in enumerate(tensors):
        num = ad.numeric_gradient(
            lambda arrs: float(build(*[ad.constant(a) for a in arrs]).data), arrays, i, eps=eps
        )
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(got, num, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_add_mul_broadcast(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    _check_grads(lambda x, y: ((x + y) * (x * 2.0 - y)).sum(), [a, b], rtol=1e-5, atol=1e-7)


def test_div_pow(rng):
    a = rng.uniform(0.5, 2.0, size=(5,))
    b = rng.uniform(0.5, 2.0, size=(5,))
    _check_grads(lambda x, y: (x / y + x ** 3).sum(), [a, b], rtol=1e-5, atol=1e-7)


def test_elementwise_unary(rng):
    a = rng.normal(size=(4, 3)) * 0.8
    _check_grads(lambda x: (x.exp() + x.tanh() + x.sigmoid() + x.gelu()).sum(), [a], rtol=1e-5, atol=1e-7)
    b = rng.uniform(0.2, 3.0, size=(6,))
    _check_grads(lambda x: (x.log() + x.sqrt()).sum(), [b], rtol=1e-5, atol=1e-7)


def test_relu_grad_away_from_kink():
    a = np.array([-1.0, -0.3, 0.4, 2.0])
    _check_grads(lambda x: (x.relu() * 3.0).sum(), [a])


def test_matmul_2d(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    _check_grads(lambda x, y: (x @ y).sum(), [a, b], rtol=1e-5, atol=1e-7)


def test_matmul_batched(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 5))
    _check_grads(lambda x, y: ((x @ y) ** 2.0).sum(), [a, b], rtol=1e-5, atol=1e-6)


def test_matmul_broadcast_batch(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    _check_grads(lambda x, y: (x @ y).sum(), [a, b], rtol=1e-5, atol=1e-7)


def test_reshape_transpose_getitem(rng):
    a = rng.normal(size=(2, 3, 4))

    def build(x):
        y = x.reshape(6, 4).transpose(1, 0)
        return (y[1:3, :] * 2.0).sum()

    _check_grads(build, [a], rtol=1e-5, atol=1e-7)


def test_sum_mean_axes(rng):
    a = rng.normal(size=(3, 4, 2))
    _check_grads(lambda x: (x.sum(axis=1).mean(axis=0) ** 2.0).sum(), [a], rtol=1e-5, atol=1e-7)


def test_concatenate(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))
    _check_grads(
        lambda x, y: (ad.concatenate([x, y], axis=1) ** 2.0).sum(), [a, b], rtol=1e-5, atol=1e-7
    )


def test_softmax_rows_sum_to_one(rng):
    x = rng.normal(size=(7, 5)) * 3
    s = ad.softmax(ad.constant(x), axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(7), atol=1e-12)


def test_softmax_grad(rng):
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    _check_grads(lambda x: (ad.softmax(x, axis=-1) * ad.constant(w)).sum(), [a], rtol=1e-5, atol=1e-7)


def test_logsumexp_matches_naive_and_grad(rng):
    a = rng.normal(size=(4, 6))
    naive = np.log(np.exp(a).sum(axis=1))
    got = ad.logsumexp(ad.constant(a), axis=1)
    np.testing.assert_allclose(got.data, naive, rtol=1e-12)
    _check_grads(lambda x: ad.logsumexp(x, axis=1).sum(), [a], rtol=1e-5, atol=1e-7)


def test_softplus_stable_and_grad(rng):
    big = np.array([800.0, -800.0, 0.0])
    out = ad.softplus(ad.constant(big))
    assert np.isfinite(out.data).all()
    assert out.data[2] == pytest.approx(np.log(2.0))
    a = rng.normal(size=(5,)) * 2
    _check_grads(lambda x: ad.softplus(x).sum(), [a], rtol=1e-5, atol=1e-7)


def test_embedding_grad(rng):
    table = rng.normal(size=(7, 3))
    ids = np.array([1, 1, 4, 0])
    w = rng.normal(size=(4, 3))
    _check_grads(
        lambda t: (ad.embedding(t, ids) * ad.constant(w)).sum(), [table], rtol=1e-5, atol=1e-7
    )


def test_conv2d_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b), stride=2, pad=1).data

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh = ow = 3
    ref = np.zeros((2, 4, oh, ow))
    for bi in range(2):
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * 2:i * 2 + 3, j * 2:j * 2 + 3]
                    ref[bi, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_conv2d_grad(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    _check_grads(
        lambda xx, ww, bb: (ad.conv2d(xx, ww, bb, stride=1, pad=1) ** 2.0).sum(),
        [x, w, b], rtol=1e-4, atol=1e-6,
    )


def test_conv2d_shape_errors():
    with pytest.raises(ValueError):
        ad.conv2d(ad.constant(np.zeros((1, 3, 4, 4))), ad.constant(np.zeros((2, 4, 3, 3))))


def test_upsample2x_grad(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    _check_grads(lambda xx: (ad.upsample2x(xx) ** 2.0).sum(), [x], rtol=1e-5, atol=1e-7)


def test_layernorm_grad(rng):
    x = rng.normal(size=(4, 6))
    g = rng.normal(size=(6,))
    b = rng.normal(size=(6,))
    _check_grads(
        lambda xx, gg, bb: (ad.layernorm(xx, gg, bb) ** 2.0).sum(), [x, g, b], rtol=1e-4, atol=1e-6
    )


def test_grad_accumulation_over_reused_node(rng):
    a = ad.parameter(rng.normal(size=(3,)))
    out = (a * a).sum() + a.sum()
    out.backward()
    np.testing.assert_allclose(a.grad, 2 * a.data + 1, rtol=1e-12)


def test_adam_decreases_simple_quadratic():
    p = ad.parameter(np.array([5.0, -3.0]))
    opt = ad.Adam({"p": p}, lr=0.2)
    for _ in range(200):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_adam_state_roundtrip():
    p1 = ad.parameter(np.array([1.0, 2.0]))
    opt1 = ad.Adam({"p": p1}, lr=0.1)
    for _ in range(3):
        opt1.zero_grad()
        ((p1 * p1).sum()).backward()
        opt1.step()
    state = {k: v.copy() for k, v in opt1.state_arrays().items()}

    p2 = ad.parameter(p1.data.copy())
    opt2 = ad.Adam({"p": p2}, lr=0.1)
    opt2.load_state_arrays(state)
    for opt, p in ((opt1, p1), (opt2, p2)):
        opt.zero_grad()
        ((p * p).sum()).backward()
        opt.step()
    np.testing.assert_array_equal(p1.data, p2.data)
