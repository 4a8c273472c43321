"""Central finite differences against the tape, in double precision."""
import numpy as np

from memseg import tensor as T


def numerical_grad(fn, t, eps=1e-6):
    g = np.zeros_like(t.data)
    for idx in np.ndindex(t.data.shape):
        old = t.data[idx]
        t.data[idx] = old + eps
        hi = float(fn().data)
        t.data[idx] = old - eps
        lo = float(fn().data)
        t.data[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    """Largest absolute deviation scaled by the largest gradient entry."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def gradcheck(fn, tensors, eps=1e-6):
    """Max relative error over ``tensors`` of d fn() / d t, analytic vs numeric."""
    for t in tensors:
        t.grad = None
    T.backward(fn())
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "tensor received no gradient"
        worst = max(worst, rel_error(t.grad, numerical_grad(fn, t, eps)))
    return worst


def weighted_sum(x, seed=0):
    """Scalar probe sum(x * r) with fixed random r, so every output entry matters."""
    r = np.random.default_rng(seed).normal(size=x.shape)
    return T.tsum(T.mul(x, r))


def jitter_params(module, seed=0, scale=0.1):
    """Move biases off zero: with zero biases a fully dead previous layer puts
    pre-activations exactly on the ReLU kink, where differences are one-sided."""
    r = np.random.default_rng(seed)
    for p in module.parameters():
        p.data = p.data + scale * r.normal(size=p.shape)
