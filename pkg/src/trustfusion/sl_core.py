"""Subjective-logic opinion algebra.

Opinions, Dirichlet evidence, Belief Constraint Fusion (BCF) and
probability-sensitive trust discounting, each in opinion form and in the
equivalent evidence form.  Everything here is pure and works on float64.

The ``*_batch`` helpers at the bottom are the vectorised evidence-form
versions used during training; each comes with its vector-Jacobian product so
losses can be back-propagated through discounting and fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

ADDITIVITY_TOL = 1e-9
RENORMALIZE_TOL = 1e-6
CONFLICT_EPS = 1e-12


class OpinionError(ValueError):
    """Invalid opinion, evidence or trust value."""


class ConflictError(ArithmeticError):
    """BCF normalisation factor reached 1 (total conflict)."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MultinomialOpinion:
    """Opinion ``[b, u, a]`` over K classes.

    Inputs within 1e-6 of ``sum(b) + u == 1`` are renormalised (table values
    are printed at two decimals); anything further off is rejected.
    """

    belief: np.ndarray
    uncertainty: float
    base_rate: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        b = np.array(self.belief, dtype=np.float64).ravel()
        u = float(self.uncertainty)
        if b.size < 1:
            raise OpinionError("opinion needs at least one class")
        if not (np.all(np.isfinite(b)) and np.isfinite(u)):
            raise OpinionError("non-finite opinion component")
        if np.any(b < 0) or u < 0:
            raise OpinionError(f"negative mass in opinion b={b}, u={u}")
        total = b.sum() + u
        if abs(total - 1.0) > RENORMALIZE_TOL:
            raise OpinionError(f"sum(belief) + uncertainty = {total!r}, expected 1")
        if total != 1.0:
            b = b / total
            u = u / total
        if self.base_rate is None:
            a = np.full(b.size, 1.0 / b.size)
        else:
            a = np.array(self.base_rate, dtype=np.float64).ravel()
            if a.size != b.size or np.any(a < 0) or abs(a.sum() - 1.0) > ADDITIVITY_TOL:
                raise OpinionError(f"invalid base rate {a}")
        object.__setattr__(self, "belief", _frozen(b))
        object.__setattr__(self, "uncertainty", u)
        object.__setattr__(self, "base_rate", _frozen(a))

    @property
    def k(self) -> int:
        return self.belief.size

    @classmethod
    def vacuous(cls, k: int) -> "MultinomialOpinion":
        return cls(np.zeros(k), 1.0)

    def as_vector(self) -> np.ndarray:
        """The K+1 vector ``[b; u]``."""
        return np.append(self.belief, self.uncertainty)


@dataclass(frozen=True)
class DirichletEvidence:
    evidence: np.ndarray

    def __post_init__(self):
        e = np.array(self.evidence, dtype=np.float64).ravel()
        if e.size < 1:
            raise OpinionError("evidence needs at least one class")
        if not np.all(np.isfinite(e)):
            raise OpinionError("non-finite evidence")
        if np.any(e < 0):
            raise OpinionError(f"negative evidence {e}")
        object.__setattr__(self, "evidence", _frozen(e))

    @property
    def k(self) -> int:
        return self.evidence.size

    @property
    def alpha(self) -> np.ndarray:
        return self.evidence + 1.0

    @property
    def strength(self) -> float:
        return float(self.evidence.sum() + self.k)


@dataclass(frozen=True)
class ReferralOpinion:
    """Binomial trust/distrust opinion about one view's functional opinion."""

    belief_trust: float
    belief_distrust: float
    uncertainty: float
    base_rate_trust: float = 0.5

    def __post_init__(self):
        parts = (self.belief_trust, self.belief_distrust, self.uncertainty)
        if any(p < 0 for p in parts) or not 0.0 <= self.base_rate_trust <= 1.0:
            raise OpinionError(f"invalid referral opinion {self}")
        if abs(sum(parts) - 1.0) > ADDITIVITY_TOL:
            raise OpinionError(f"referral masses sum to {sum(parts)!r}")

    @classmethod
    def from_evidence(cls, trust: float, distrust: float) -> "ReferralOpinion":
        """Beta form: evidence for trust and distrust, alpha = e + 1."""
        if trust < 0 or distrust < 0:
            raise OpinionError("negative referral evidence")
        s = trust + distrust + 2.0
        return cls(trust / s, distrust / s, 2.0 / s)


def evidence_to_opinion(ev: DirichletEvidence) -> MultinomialOpinion:
    s = ev.strength
    return MultinomialOpinion(ev.evidence / s, ev.k / s)


def opinion_to_evidence(op: MultinomialOpinion) -> DirichletEvidence:
    if op.uncertainty <= 0.0:
        raise OpinionError("dogmatic opinion (u = 0) corresponds to infinite evidence")
    s = op.k / op.uncertainty
    return DirichletEvidence(op.belief * s)


def bcf_pair(a: MultinomialOpinion, b: MultinomialOpinion) -> MultinomialOpinion:
    """Belief Constraint Fusion of two opinions."""
    if a.k != b.k:
        raise OpinionError(f"class count mismatch: {a.k} vs {b.k}")
    b1, b2 = a.belief, b.belief
    u1, u2 = a.uncertainty, b.uncertainty
    # sum_{i != j} b1_i b2_j
    conflict = b1.sum() * b2.sum() - float(np.dot(b1, b2))
    norm = 1.0 - conflict
    if norm < CONFLICT_EPS:
        raise ConflictError(f"total conflict between opinions (C = {conflict!r})")
    belief = (b1 * b2 + b1 * u2 + b2 * u1) / norm
    return MultinomialOpinion(belief, u1 * u2 / norm, a.base_rate)


def bcf_fuse_all(ops: Sequence[MultinomialOpinion]) -> MultinomialOpinion:
    ops = list(ops)
    if not ops:
        raise OpinionError("nothing to fuse")
    return reduce(bcf_pair, ops)


def bcf_evidence(e1: DirichletEvidence, e2: DirichletEvidence) -> DirichletEvidence:
    """BCF in evidence form: ``e1 + e2 + e1*e2/K``."""
    if e1.k != e2.k:
        raise OpinionError(f"class count mismatch: {e1.k} vs {e2.k}")
    x, y = e1.evidence, e2.evidence
    return DirichletEvidence(x + y + x * y / e1.k)


def degree_of_trust(r: ReferralOpinion) -> float:
    return r.belief_trust + r.base_rate_trust * r.uncertainty


def _check_trust(p_t: float) -> float:
    p_t = float(p_t)
    if not 0.0 <= p_t <= 1.0:
        raise OpinionError(f"degree of trust {p_t!r} outside [0, 1]")
    return p_t


def trust_discount(func: MultinomialOpinion, p_t: float) -> MultinomialOpinion:
    p_t = _check_trust(p_t)
    belief = p_t * func.belief
    return MultinomialOpinion(belief, 1.0 - p_t * func.belief.sum(), func.base_rate)


def discount_factor(p_t, u):
    """Evidence multiplier ``p*u / (1 - p + p*u)`` of trust discounting."""
    return p_t * u / (1.0 - p_t + p_t * u)


def trust_discount_evidence(func_ev: DirichletEvidence, p_t: float) -> DirichletEvidence:
    p_t = _check_trust(p_t)
    u = func_ev.k / func_ev.strength
    return DirichletEvidence(discount_factor(p_t, u) * func_ev.evidence)


def discounted_fuse(
    funcs: Sequence[MultinomialOpinion], trusts: Sequence[float]
) -> MultinomialOpinion:
    funcs, trusts = list(funcs), list(trusts)
    if len(funcs) != len(trusts):
        raise OpinionError(f"{len(funcs)} opinions but {len(trusts)} trust values")
    return bcf_fuse_all([trust_discount(f, p) for f, p in zip(funcs, trusts)])


def projected_probability(op: MultinomialOpinion) -> np.ndarray:
    return op.belief + op.base_rate * op.uncertainty


# ---------------------------------------------------------------------------
# Batched evidence-form ops (rows are instances) with their VJPs.
# ---------------------------------------------------------------------------


def opinion_batch(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Belief (B, K) and uncertainty (B,) from evidence (B, K)."""
    k = e.shape[-1]
    s = e.sum(axis=-1) + k
    return e / s[:, None], k / s


def opinion_batch_vjp(e, g_belief, g_unc):
    """Gradient w.r.t. evidence of ``<g_belief, b> + <g_unc, u>``."""
    k = e.shape[-1]
    s = e.sum(axis=-1) + k
    b = e / s[:, None]
    # db_i/de_j = (delta_ij - b_i)/S ; du/de_j = -K/S^2
    inner = (g_belief * b).sum(axis=-1)
    return (g_belief - inner[:, None]) / s[:, None] - (g_unc * k / s**2)[:, None]


def trust_from_referral_batch(r: np.ndarray) -> np.ndarray:
    """Degree of trust alpha_trust / S from referral evidence (B, 2); col 0 = trust."""
    return (r[:, 0] + 1.0) / (r.sum(axis=-1) + 2.0)


def trust_from_referral_vjp(r, g_p):
    s = r.sum(axis=-1) + 2.0
    out = np.empty_like(r)
    out[:, 0] = g_p * (r[:, 1] + 1.0) / s**2
    out[:, 1] = -g_p * (r[:, 0] + 1.0) / s**2
    return out


def discount_batch(e: np.ndarray, p: np.ndarray) -> np.ndarray:
    k = e.shape[-1]
    u = k / (e.sum(axis=-1) + k)
    return discount_factor(p, u)[:, None] * e


def discount_batch_vjp(e, p, g):
    """Returns (grad_e, grad_p) for ``discount_batch(e, p)`` with upstream g."""
    k = e.shape[-1]
    u = k / (e.sum(axis=-1) + k)
    den = 1.0 - p + p * u
    f = p * u / den
    ge = (g * e).sum(axis=-1)
    df_du = p * (1.0 - p) / den**2
    du_de = -(u**2) / k
    grad_e = f[:, None] * g + (ge * df_du * du_de)[:, None]
    grad_p = ge * u / den**2
    return grad_e, grad_p


def fuse_pair_batch(e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    return e1 + e2 + e1 * e2 / e1.shape[-1]


def fuse_pair_batch_vjp(e1, e2, g):
    k = e1.shape[-1]
    return g * (1.0 + e2 / k), g * (1.0 + e1 / k)
