"""Dense linear algebra helpers shared by every layer.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Training and
inference run in float32; gradient checks switch to float64.
"""

import numpy as np

from .errors import DimensionError, ParameterError

DEFAULT_DTYPE = np.float32

# scaled tanh constants: g2(x) = A * tanh(B * x)
SCALED_TANH_A = 1.7159
SCALED_TANH_B = 2.0 / 3.0

RNG_ALGORITHM = "PCG64"


def make_rng(seed):
    """Seeded generator. PCG64 streams are identical across platforms."""
    if seed < 0 or seed >= 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def linear(W, x, b=None):
    """Return ``W @ x (+ b)`` for a matrix ``W`` (m, n) and vector ``x`` (n,)."""
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot apply W{W.shape} to x{x.shape}")
    y = W @ x
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"bias{b.shape} does not match W{W.shape}")
        y = y + b
    return y


def sigmoid(x):
    # tanh form: identical in exact arithmetic, never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def tanh_g1(x):
    return np.tanh(x)


def scaled_tanh_g2(x):
    return SCALED_TANH_A * np.tanh(SCALED_TANH_B * np.asarray(x))


def scaled_tanh_grad(x):
    """Derivative of ``scaled_tanh_g2`` at pre-activation ``x``."""
    t = np.tanh(SCALED_TANH_B * np.asarray(x))
    return SCALED_TANH_A * SCALED_TANH_B * (1.0 - t * t)


def softmax(logits, axis=-1):
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("softmax of an empty tensor")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def init_uniform(shape, half_range, rng, dtype=DEFAULT_DTYPE):
    if not half_range > 0:
        raise ParameterError(f"half_range must be positive, got {half_range}")
    return rng.uniform(-half_range, half_range, size=shape).astype(dtype)
