"""Finite-difference checks for every autodiff primitive (float64)."""

import numpy as np
import pytest

from sideseg import autodiff as ad

RNG = np.random.default_rng(7)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f()
        flat[i] = keep - h
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * h)
    return g


def check(build, *shapes, tol=1e-7):
    """build(*tensors) -> scalar Tensor; compares tape grads to central differences."""
    xs = [ad.Tensor(RNG.standard_normal(s), requires_grad=True) for s in shapes]
    ad.backward(build(*xs))
    grads = [x.grad.copy() for x in xs]
    # grad-free tensors sharing the same buffers, so in-place FD nudges are seen
    wrapped = [ad.Tensor(x.data) for x in xs]
    for x, g in zip(xs, grads):
        fd = numeric_grad(lambda: build(*wrapped).data.item(), x.data)
        np.testing.assert_allclose(g, fd, rtol=tol, atol=tol)


def test_add_mul_broadcast():
    check(lambda a, b: ad.tsum(ad.mul(ad.add(a, b), a)), (3, 4), (4,))


def test_sub_div():
    def f(a, b):
        return ad.tsum(ad.div(ad.sub(a, b), ad.add(ad.mul(b, b), 2.0)))
    check(f, (2, 5), (2, 5))


def test_pow_sqrt_exp_log():
    def f(a):
        p = ad.add(ad.mul(a, a), 1.5)  # strictly positive
        return ad.tsum(ad.add(ad.sqrt(p), ad.log(ad.exp(ad.mul(a, 0.3)))))
    check(f, (4, 3))


def test_relu_tanh_sigmoid_gelu():
    check(lambda a: ad.tsum(ad.relu(a)), (5, 5))
    check(lambda a: ad.tsum(ad.tanh(a)), (5, 5))
    check(lambda a: ad.tsum(ad.sigmoid(a)), (5, 5))
    check(lambda a: ad.tsum(ad.gelu(a)), (5, 5))


def test_reshape_transpose_concat():
    def f(a, b):
        c = ad.concat([ad.transpose(a, (1, 0)), b], axis=1)
        return ad.tsum(ad.mul(ad.reshape(c, (-1,)), 0.7))
    check(f, (3, 2), (2, 4))


def test_sum_mean_axes():
    check(lambda a: ad.tsum(ad.tmean(a, axis=(0, 2), keepdims=True)), (2, 3, 4))
    check(lambda a: ad.tsum(ad.tsum(a, axis=1)), (2, 3, 4))


def test_matmul_batched():
    check(lambda a, b: ad.tsum(ad.matmul(a, b)), (2, 3, 4), (2, 4, 5))


def test_softmax():
    def f(a):
        s = ad.softmax(a, axis=-1)
        return ad.tsum(ad.mul(s, s))
    check(f, (3, 6))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 0, 2), (16, 0, 16)])
def test_conv2d(stride, pad, k):
    hw = 16 if k == 16 else 6
    def f(x, w, b):
        return ad.tsum(ad.mul(ad.conv2d(x, w, b, stride=stride, pad=pad), 0.5))
    check(f, (2, 3, hw, hw), (4, 3, k, k), (4,))


def test_conv2d_channel_mismatch():
    x = ad.Tensor(np.zeros((1, 3, 4, 4)))
    w = ad.Tensor(np.zeros((2, 5, 1, 1)))
    with pytest.raises(ValueError, match="channel mismatch"):
        ad.conv2d(x, w)


def test_conv_transpose2x2():
    def f(x, w, b):
        return ad.tsum(ad.mul(ad.conv_transpose2x2(x, w, b), 0.3))
    check(f, (2, 3, 4, 4), (3, 5, 2, 2), (5,))


def test_pools():
    check(lambda x: ad.tsum(ad.mul(ad.avgpool2x2(x), 0.5)), (2, 3, 6, 4))
    check(lambda x: ad.tsum(ad.mul(ad.maxpool2x2(x), 0.5)), (2, 3, 6, 4))


def test_pool_odd_dims_rejected():
    x = ad.Tensor(np.zeros((1, 1, 3, 4)))
    with pytest.raises(ValueError, match="even spatial"):
        ad.avgpool2x2(x)
    with pytest.raises(ValueError, match="even spatial"):
        ad.maxpool2x2(x)


@pytest.mark.parametrize("scale", [2, 4])
def test_upsample_bilinear(scale):
    check(lambda x: ad.tsum(ad.mul(ad.upsample_bilinear(x, scale), 0.25)), (2, 2, 3, 5))


def test_upsample_preserves_constants_exactly():
    for scale in (2, 4, 16):
        x = ad.Tensor(np.full((1, 2, 3, 3), 0.7306, dtype=np.float64))
        y = ad.upsample_bilinear(x, scale)
        assert np.array_equal(y.data, np.full((1, 2, 3 * scale, 3 * scale), 0.7306))


def test_grad_accumulates_when_tensor_reused():
    a = ad.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    loss = ad.tsum(ad.add(ad.mul(a, a), a))
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_frozen_leaf_gets_no_grad():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    b = ad.Tensor(np.ones(3), requires_grad=False)
    loss = ad.tsum(ad.mul(a, b))
    ad.backward(loss)
    assert a.grad is not None and b.grad is None


def test_backward_requires_scalar():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(a, 2.0))
