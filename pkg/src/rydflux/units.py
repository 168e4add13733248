"""Unit conventions.

Time is in microseconds, length in micrometres and every frequency or energy is
an angular frequency in rad/us.  Experimental numbers are usually quoted as
"2pi x MHz"; :func:`mhz` converts such a number once at the boundary.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * np.pi


def mhz(value):
    """Convert a "2pi x MHz" number (scalar or array) to rad/us."""
    if np.ndim(value):
        return TWO_PI * np.asarray(value, dtype=float)
    return TWO_PI * float(value)


def _inverse(v):
    # v / 2pi can land one ulp away from the number that produced v.  Among
    # the nearby doubles that map back onto v, prefer the shortest decimal.
    y = v / TWO_PI
    if not math.isfinite(y) or y == 0.0:
        return y
    cands = [y]
    lo = hi = y
    for _ in range(2):
        lo = math.nextafter(lo, -math.inf)
        hi = math.nextafter(hi, math.inf)
        cands += [lo, hi]
    ok = [z for z in cands if TWO_PI * z == v]
    if not ok:
        return y
    return min(ok, key=lambda z: (len(repr(z)), abs(z - y)))


def to_mhz(value):
    """Inverse of :func:`mhz`.

    Exact for every value whose image under :func:`mhz` is not shared with a
    neighbouring double; otherwise within one ulp.
    """
    if np.iscomplexobj(value):
        return np.asarray(value) / TWO_PI
    if np.ndim(value):
        arr = np.asarray(value, dtype=float)
        return np.array([_inverse(float(v)) for v in arr.ravel()]).reshape(arr.shape)
    return _inverse(float(value))


def khz(value):
    """Convert a "2pi x kHz" number to rad/us."""
    return mhz(np.asarray(value, dtype=float) * 1e-3) if np.ndim(value) else mhz(float(value) * 1e-3)
