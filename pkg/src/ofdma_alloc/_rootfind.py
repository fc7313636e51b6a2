"""Vectorised bisection; scipy's scalar bisect handles the one-dimensional cases."""
import numpy as np


def bisect_increasing(fn, lo, hi, target, iters: int = 80):
    """Elementwise root of an increasing ``fn`` on [lo, hi].

    Returns the final (lo, hi) brackets with fn(lo) < target <= fn(hi),
    assuming the bracket was valid on entry.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    target = np.broadcast_to(np.asarray(target, dtype=float), lo.shape)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.all((mid == lo) | (mid == hi)):
            break
        below = fn(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return lo, hi
