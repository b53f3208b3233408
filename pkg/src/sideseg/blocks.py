"""Shared layer math: conv blocks, batch/layer norm, parameter initialization.

A "conv block" here is always convolution -> batch norm -> ReLU, the unit the
side modules are assembled from. Parameters live in a ParamStore; application
functions receive a ParamView (`pv`) plus the block's name prefix.
"""

import numpy as np
from scipy.special import ndtr, ndtri

from . import autodiff as ad
from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


def truncated_normal(rng, shape, std, dtype):
    """Normal(0, std) truncated to +/- 2 std, sampled via inverse CDF."""
    lo, hi = ndtr(-2.0), ndtr(2.0)
    u = rng.random(shape)
    return (ndtri(lo + u * (hi - lo)) * std).astype(dtype)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# parameter registration

def add_conv_params(store, prefix, cin, cout, k, rng, dtype, frozen=False):
    """Plain convolution weight + bias (no norm): `<prefix>.weight/.bias`."""
    w = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
    store.add(f"{prefix}.weight", w, frozen=frozen)
    store.add(f"{prefix}.bias", np.zeros(cout, dtype=dtype), frozen=frozen)


def add_bn_params(store, prefix, channels, dtype, frozen=False):
    # beta starts slightly positive: boundary features are identically zero at
    # init, and a zero beta would park the following ReLU exactly on its kink
    # (dead unit, and central differences disagree with any subgradient there)
    store.add(f"{prefix}.gamma", np.ones(channels, dtype=dtype), frozen=frozen)
    store.add(f"{prefix}.beta", np.full(channels, 0.01, dtype=dtype), frozen=frozen)
    store.add(f"{prefix}.running_mean", np.zeros(channels, dtype=dtype), frozen=frozen, buffer=True)
    store.add(f"{prefix}.running_var", np.ones(channels, dtype=dtype), frozen=frozen, buffer=True)


def add_conv_block_params(store, prefix, cin, cout, k, rng, dtype, frozen=False):
    """Conv + batch-norm block: `<prefix>.conv.*` and `<prefix>.bn.*`."""
    add_conv_params(store, f"{prefix}.conv", cin, cout, k, rng, dtype, frozen=frozen)
    add_bn_params(store, f"{prefix}.bn", cout, dtype, frozen=frozen)


def conv_block_param_count(cin, cout, k=1):
    """Learnable parameters of one conv block: weights + bias + bn affine."""
    return cout * cin * k * k + cout + 2 * cout


# ---------------------------------------------------------------------------
# application

def batch_norm(pv, prefix, x, mode, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm over (B, h, w); running stats updated in train mode."""
    gamma = pv(f"{prefix}.gamma")
    beta = pv(f"{prefix}.beta")
    run_mean = pv.buffer(f"{prefix}.running_mean")
    run_var = pv.buffer(f"{prefix}.running_var")
    if mode == "train":
        if x.data.shape[0] < 2:
            raise ShapeError(
                f"batch norm at {prefix!r} needs batch size >= 2 in train mode, got {x.data.shape[0]}"
            )
        mu = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        run_mean *= 1.0 - momentum
        run_mean += momentum * mu.data.reshape(-1)
        run_var *= 1.0 - momentum
        run_var += momentum * var.data.reshape(-1)
        xhat = ad.div(centered, ad.sqrt(ad.add(var, eps)))
    elif mode == "eval":
        mu = run_mean[None, :, None, None]
        scale = 1.0 / np.sqrt(run_var + eps)
        xhat = ad.mul(ad.sub(x, ad.Tensor(mu)), ad.Tensor(scale[None, :, None, None]))
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    g = ad.reshape(gamma, (1, -1, 1, 1))
    b = ad.reshape(beta, (1, -1, 1, 1))
    return ad.add(ad.mul(xhat, g), b)


def conv1x1_block(pv, prefix, x, mode):
    """1x1 convolution, batch normalization, ReLU."""
    out = ad.conv2d(x, pv(f"{prefix}.conv.weight"), pv(f"{prefix}.conv.bias"))
    return ad.relu(batch_norm(pv, f"{prefix}.bn", out, mode))


def conv3x3_block(pv, prefix, x, mode):
    """3x3 convolution (padding 1), batch normalization, ReLU."""
    out = ad.conv2d(x, pv(f"{prefix}.conv.weight"), pv(f"{prefix}.conv.bias"), pad=1)
    return ad.relu(batch_norm(pv, f"{prefix}.bn", out, mode))


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Layer norm over the last axis of token-shaped input (..., C)."""
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
    xhat = ad.div(centered, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(xhat, gamma), beta)
