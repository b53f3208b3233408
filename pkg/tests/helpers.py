"""Shared construction utilities for the test suite."""

import numpy as np

from sideseg.store import ParamStore


def conv_block_arrays(store, prefix):
    """Arrays of one conv block as a plain dict (for the loop oracles)."""
    return {
        "weight": store[f"{prefix}.conv.weight"].array,
        "bias": store[f"{prefix}.conv.bias"].array,
        "gamma": store[f"{prefix}.bn.gamma"].array,
        "beta": store[f"{prefix}.bn.beta"].array,
        "running_mean": store[f"{prefix}.bn.running_mean"].array,
        "running_var": store[f"{prefix}.bn.running_var"].array,
    }


def zero_conv_block(store, prefix):
    """Zero every learnable array of a conv block (running stats untouched)."""
    for name in ("conv.weight", "conv.bias", "bn.gamma", "bn.beta"):
        store[f"{prefix}.{name}"].array[...] = 0.0


def randomize(store, rng, scale=0.5, prefix=""):
    """Overwrite parameters with random values; running stats get sane spreads."""
    for name in store.names(prefix):
        e = store.entries[name]
        if name.endswith("running_var"):
            e.array[...] = rng.uniform(0.5, 1.5, e.array.shape)
        elif name.endswith("running_mean"):
            e.array[...] = rng.normal(0.0, 0.2, e.array.shape)
        else:
            e.array[...] = rng.normal(0.0, scale, e.array.shape)


def bytes_equal(a, b):
    return np.asarray(a).tobytes() == np.asarray(b).tobytes()


def fresh_store():
    return ParamStore()
