"""Central finite differences in float64.

``relative_error`` is the max-norm relative error of a whole gradient,
``max|a - b| / max(max|a|, max|b|)``, so near-zero entries are judged
against the scale of the tensor they belong to.
"""

import numpy as np

STEP = 1e-3


def numeric_grad(f, x, step=STEP):
    """d f / d x for scalar ``f`` taking a float64 array; ``x`` is restored."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * step)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)
