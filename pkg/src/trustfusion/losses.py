"""Evidential losses with analytic gradients w.r.t. the Dirichlet parameters.

All losses accept a single parameter vector of shape (K,) or a batch of shape
(B, K).  ``value`` then has shape () or (B,), ``grad_alpha`` matches alpha.
Since alpha = evidence + 1, ``grad_alpha`` is also the gradient w.r.t. the
evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .special import digamma, lgamma, trigamma

ANNEALING_EPOCHS = 10


@dataclass(frozen=True)
class LossValueWithGrad:
    value: np.ndarray | float
    grad_alpha: np.ndarray


@dataclass(frozen=True)
class SmoothedTarget:
    probs: np.ndarray


def _alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(~(a > 0)) or not np.all(np.isfinite(a)):
        raise ValueError("Dirichlet parameters must be positive and finite")
    return a


def _one_hot(y, shape) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != shape:
        raise ValueError(f"target shape {y.shape} does not match alpha {shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("target must be one-hot")
    return y


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(k)[labels]


def ace_loss(alpha, y) -> LossValueWithGrad:
    """Bayes risk of cross-entropy under Dir(alpha): psi(S) - psi(alpha_g)."""
    a = _alpha(alpha)
    y = _one_hot(y, a.shape)
    s = a.sum(axis=-1)
    value = digamma(s) - (y * digamma(a)).sum(axis=-1)
    grad = np.expand_dims(trigamma(s), -1) - y * trigamma(a)
    return LossValueWithGrad(_scalar(value), grad)


def kl_uniform(alpha_tilde) -> LossValueWithGrad:
    """KL( Dir(alpha_tilde) || Dir(1) )."""
    a = _alpha(alpha_tilde)
    k = a.shape[-1]
    s = a.sum(axis=-1)
    dig_s = np.expand_dims(digamma(s), -1)
    value = (
        lgamma(s)
        - lgamma(float(k))
        - lgamma(a).sum(axis=-1)
        + ((a - 1.0) * (digamma(a) - dig_s)).sum(axis=-1)
    )
    grad = (a - 1.0) * trigamma(a) - np.expand_dims((s - k) * trigamma(s), -1)
    return LossValueWithGrad(_scalar(value), grad)


def adjusted_alpha(alpha, y) -> np.ndarray:
    """Replace the target coordinate with 1, keep the rest."""
    a = np.asarray(alpha, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return y + (1.0 - y) * a


def annealing(epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(1.0, epoch / ANNEALING_EPOCHS)


def overall_loss(alpha, y, epoch: int) -> LossValueWithGrad:
    """ACE loss plus annealed KL of the misleading-evidence-removed parameters.

    The target coordinate of the adjusted parameters is the constant 1, so the
    KL gradient is masked there.
    """
    a = _alpha(alpha)
    y = _one_hot(y, a.shape)
    ace = ace_loss(a, y)
    lam = annealing(epoch)
    if lam == 0.0:
        return ace
    kl = kl_uniform(adjusted_alpha(a, y))
    value = np.asarray(ace.value) + lam * np.asarray(kl.value)
    grad = ace.grad_alpha + lam * (1.0 - y) * kl.grad_alpha
    return LossValueWithGrad(_scalar(value), grad)


def correctness_target(pred_label, true_label):
    """1 where the functional prediction is right, else 0 (elementwise)."""
    out = (np.asarray(pred_label) == np.asarray(true_label)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def smooth_label(z, eta: float) -> SmoothedTarget:
    """Smoothed (trust, distrust) target for correctness z.

    ``z = 1`` maps to the one-hot (1, 0) before smoothing.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"smoothing factor {eta!r} outside (0, 1]")
    z = np.asarray(z, dtype=np.float64)
    hard = np.stack([z, 1.0 - z], axis=-1)
    return SmoothedTarget(hard * eta + (1.0 - eta) / 2.0)


def warmup_loss(beta_alpha, target: SmoothedTarget) -> LossValueWithGrad:
    """Smoothed-target Bayes risk for the referral Beta parameters (no KL)."""
    a = _alpha(beta_alpha)
    z = np.asarray(target.probs if isinstance(target, SmoothedTarget) else target, dtype=np.float64)
    if z.shape != a.shape:
        raise ValueError(f"target shape {z.shape} does not match alpha {a.shape}")
    s = a.sum(axis=-1)
    zsum = z.sum(axis=-1)
    value = (z * (np.expand_dims(digamma(s), -1) - digamma(a))).sum(axis=-1)
    grad = np.expand_dims(zsum * trigamma(s), -1) - z * trigamma(a)
    return LossValueWithGrad(_scalar(value), grad)
