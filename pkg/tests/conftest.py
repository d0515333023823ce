import math

import numpy as np


def central_difference(f, x, step=1e-6):
    """Central finite-difference gradient of scalar f over the array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = x.copy()
        bumped[idx] += step
        hi = f(bumped)
        bumped[idx] -= 2 * step
        lo = f(bumped)
        grad[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def erf_inv_bisect(p, tol=1e-13):
    """Independent oracle: invert math.erf by bisection."""
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if math.erf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return (lo + hi) / 2
