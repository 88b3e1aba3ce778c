"""Pure numpy implementations of the hot elementwise kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Both write into caller-provided buffers so the training loop allocates
nothing per batch.
"""

import numpy as np

LINEAR = 0
RELU = 1
SCALED_SIGMOID2 = 2


def bias_activation(z, bias, act, out):
    """out = act(z + bias), row-broadcasting ``bias``. ``z`` is overwritten with z + bias."""
    np.add(z, bias, out=z)
    if act == LINEAR:
        out[...] = z
    elif act == RELU:
        np.maximum(z, 0.0, out=out)
    elif act == SCALED_SIGMOID2:
        # 2 / (1 + exp(-z)); exp overflow to inf gives 0, which is the right limit
        with np.errstate(over="ignore"):
            np.negative(z, out=out)
            np.exp(out, out=out)
        out += 1.0
        np.divide(2.0, out, out=out)
    else:
        raise ValueError(f"unknown activation code {act}")
    return out


def activation_backward(z, a, dout, act, dz):
    """dz = dout * act'(z), using the cached activation ``a`` where cheaper."""
    if act == LINEAR:
        dz[...] = dout
    elif act == RELU:
        np.multiply(dout, z > 0.0, out=dz)
    elif act == SCALED_SIGMOID2:
        # d/dz 2*sigmoid(z) = a * (1 - a/2)
        np.multiply(a, 0.5, out=dz)
        np.subtract(1.0, dz, out=dz)
        dz *= a
        dz *= dout
    else:
        raise ValueError(f"unknown activation code {act}")
    return dz


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place bias-corrected Adam update on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def signed_rank_counts(n):
    """Number of sign patterns giving each positive-rank sum W+ = 0..n(n+1)/2.

    Returned as float64; exact while the total 2**n stays below 2**53.
    """
    total = n * (n + 1) // 2
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    top = 0
    for k in range(1, n + 1):
        top += k
        # right-hand side is materialized before assignment
        counts[k : top + 1] = counts[k : top + 1] + counts[0 : top + 1 - k]
    return counts
