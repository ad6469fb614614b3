"""Digamma and trigamma for positive real arguments (vectorised).

Both use upward recurrence until the argument reaches ``_LIFT`` and then an
asymptotic Bernoulli-number expansion.
"""

from __future__ import annotations

import numpy as np

from tmur.evidential import DomainError

# truncation error of both series at x >= 10 is below 1e-12
_LIFT = 10.0


def _prepare(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("digamma/trigamma are only defined here for finite x > 0")
    return x


def digamma(x):
    """psi(x) = d/dx log Gamma(x)."""
    x = _prepare(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    acc = np.zeros_like(x)
    low = x < _LIFT
    while np.any(low):
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
        low = x < _LIFT
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132))))
    out = acc + np.log(x) - 0.5 * inv - series
    return float(out[0]) if scalar else out


def trigamma(x):
    """psi'(x), the derivative of digamma."""
    x = _prepare(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    acc = np.zeros_like(x)
    low = x < _LIFT
    while np.any(low):
        acc[low] += 1.0 / (x[low] * x[low])
        x[low] += 1.0
        low = x < _LIFT
    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv2 * inv * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * 5.0 / 66))))
    out = acc + inv + 0.5 * inv2 + tail
    return float(out[0]) if scalar else out
