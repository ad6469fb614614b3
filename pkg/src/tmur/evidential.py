"""Dirichlet / subjective-logic opinion algebra.

Evidence ``e`` (non-negative, one entry per class) induces Dirichlet
parameters ``alpha = e + 1``, strength ``S = sum(alpha)``, belief masses
``b = e / S``, uncertainty ``u = K / S`` and expected probabilities
``p = alpha / S``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


def _check_evidence(e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.ndim < 1 or e.shape[-1] < 2:
        raise DomainError(f"evidence needs at least two classes, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise DomainError("evidence must be finite")
    if np.any(e < 0):
        raise DomainError("evidence must be non-negative")
    return e


@dataclass(frozen=True)
class DirichletOpinion:
    belief: np.ndarray
    uncertainty: float
    strength: float
    probabilities: np.ndarray
    alpha: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[0]


def evidence_to_opinion(e) -> DirichletOpinion:
    """Map one evidence vector to its opinion form.

    >>> op = evidence_to_opinion([2.0, 1.0, 1.0])
    >>> op.strength, op.uncertainty
    (7.0, 0.42857142857142855)
    """
    e = _check_evidence(e)
    if e.ndim != 1:
        raise DomainError("evidence_to_opinion expects a single vector; use batch_opinions")
    alpha = e + 1.0
    s = float(alpha.sum())
    k = e.shape[0]
    return DirichletOpinion(
        belief=e / s,
        uncertainty=k / s,
        strength=s,
        probabilities=alpha / s,
        alpha=alpha,
    )


def batch_opinions(evidence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise ``(belief, uncertainty, probabilities)`` for an ``N x K`` evidence matrix."""
    e = _check_evidence(evidence)
    if e.ndim != 2:
        raise DomainError(f"expected an N x K matrix, got shape {e.shape}")
    alpha = e + 1.0
    s = alpha.sum(axis=1, keepdims=True)
    return e / s, (e.shape[1] / s)[:, 0], alpha / s


@dataclass(frozen=True)
class ScaleFamily:
    """Evidence family ``e(t) = t * pattern`` sharing one support direction."""

    pattern: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.pattern, dtype=np.float64)
        if r.ndim != 1 or r.shape[0] < 2:
            raise DomainError("pattern must be a vector over at least two classes")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise DomainError("pattern entries must be finite and non-negative")
        if r.sum() <= 0:
            raise DomainError("pattern must have positive total")
        object.__setattr__(self, "pattern", r)

    @property
    def total(self) -> float:
        return float(self.pattern.sum())

    @property
    def num_classes(self) -> int:
        return self.pattern.shape[0]

    def evidence(self, t: float) -> np.ndarray:
        return t * self.pattern


def _check_scale(t: float) -> float:
    if not (t > 0 and math.isfinite(t)):
        raise DomainError(f"scale t must be positive and finite, got {t}")
    return float(t)


def family_uncertainty(f: ScaleFamily, t: float) -> float:
    t = _check_scale(t)
    k = f.num_classes
    return k / (k + t * f.total)


def family_uncertainty_derivative(f: ScaleFamily, t: float) -> float:
    t = _check_scale(t)
    k, r = f.num_classes, f.total
    return -k * r / (k + t * r) ** 2


def family_true_class_probability(f: ScaleFamily, y: int, t: float) -> float:
    t = _check_scale(t)
    _check_class(f, y)
    return (1.0 + t * f.pattern[y]) / (f.num_classes + t * f.total)


def true_class_probability_derivative(f: ScaleFamily, y: int, t: float) -> float:
    """``d p_y / dt``; positive exactly when ``pattern[y] > total / K``."""
    t = _check_scale(t)
    _check_class(f, y)
    k, r = f.num_classes, f.total
    return (k * f.pattern[y] - r) / (k + t * r) ** 2


def _check_class(f: ScaleFamily, y: int) -> None:
    if not (0 <= int(y) < f.num_classes) or int(y) != y:
        raise DomainError(f"class index {y} out of range for K={f.num_classes}")
