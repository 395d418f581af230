"""Digamma, trigamma and log-gamma for positive reals.

Each shifts its argument up with the recurrence until it reaches
``ASYMPTOTIC_FROM`` and then applies the asymptotic (Bernoulli) series.
Works elementwise on scalars or numpy arrays.
"""

from __future__ import annotations

import numpy as np

ASYMPTOTIC_FROM = 6.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

# psi(x) ~ ln x - 1/(2x) - sum_n B_2n / (2n x^2n)
_DIGAMMA_COEF = (
    1.0 / 12,
    -1.0 / 120,
    1.0 / 252,
    -1.0 / 240,
    1.0 / 132,
    -691.0 / 32760,
    1.0 / 12,
    -3617.0 / 8160,
)
# psi'(x) ~ 1/x + 1/(2x^2) + sum_n B_2n / x^(2n+1)
_TRIGAMMA_COEF = (
    1.0 / 6,
    -1.0 / 30,
    1.0 / 42,
    -1.0 / 30,
    5.0 / 66,
    -691.0 / 2730,
    7.0 / 6,
    -3617.0 / 510,
)
# ln Gamma(x) ~ (x - 1/2) ln x - x + ln(2 pi)/2 + sum_n B_2n / (2n (2n-1) x^(2n-1))
_LGAMMA_COEF = (
    1.0 / 12,
    -1.0 / 360,
    1.0 / 1260,
    -1.0 / 1680,
    1.0 / 1188,
    -691.0 / 360360,
    1.0 / 156,
    -3617.0 / 122400,
)


def _prepare(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(x > 0) or not np.all(np.isfinite(x)):
        raise ValueError("argument must be positive and finite")
    return x


def _shift(x, step):
    """Shift x up to >= ASYMPTOTIC_FROM, accumulating step(x) for each shift."""
    acc = np.zeros_like(x)
    shifts = np.zeros_like(x)
    for i in range(max(0, int(np.ceil(ASYMPTOTIC_FROM - x.min())))):
        t = x + i
        low = t < ASYMPTOTIC_FROM
        acc += np.where(low, step(t), 0.0)
        shifts += low
    return x + shifts, acc


def _series(coef, inv_sq):
    # Horner in 1/x^2, highest order first
    out = np.zeros_like(inv_sq)
    for c in reversed(coef):
        out = out * inv_sq + c
    return out


def _wrap(x_in, out):
    return float(out) if np.ndim(x_in) == 0 else out


def digamma(x):
    x0 = x
    x, acc = _shift(_prepare(x), lambda t: -1.0 / t)
    inv_sq = 1.0 / (x * x)
    out = np.log(x) - 0.5 / x - inv_sq * _series(_DIGAMMA_COEF, inv_sq) + acc
    return _wrap(x0, out)


def trigamma(x):
    x0 = x
    x, acc = _shift(_prepare(x), lambda t: 1.0 / (t * t))
    inv = 1.0 / x
    inv_sq = inv * inv
    out = inv + 0.5 * inv_sq + inv * inv_sq * _series(_TRIGAMMA_COEF, inv_sq) + acc
    return _wrap(x0, out)


def lgamma(x):
    x0 = x
    x, acc = _shift(_prepare(x), lambda t: -np.log(t))
    inv = 1.0 / x
    out = (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + inv * _series(_LGAMMA_COEF, inv * inv) + acc
    return _wrap(x0, out)
