"""Training objective: fused evidential loss plus expert, balance and diversity terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tmur import engine as E
from tmur.engine import Tensor
from tmur.evidential import DomainError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.3
    beta: float = 0.05
    gamma: float = 0.05
    rho: float = 1.5

    def __post_init__(self):
        if min(self.lam, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.rho > 1:
            raise ConfigError(f"rho must exceed 1, got {self.rho}")


@dataclass(frozen=True)
class LossBreakdown:
    fused: float
    view: float
    bal: float
    div: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"fused": self.fused, "view": self.view, "bal": self.bal, "div": self.div, "total": self.total}


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _labels(labels, rows: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (rows,):
        raise DomainError(f"expected {rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise DomainError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    return y


def digamma_loss(alpha, labels) -> Tensor:
    """Batch mean of ``psi(S) - psi(alpha_y)``."""
    alpha = _tensor(alpha)
    y = _labels(labels, alpha.shape[0], alpha.shape[1])
    if np.any(alpha.data < 1):
        raise DomainError("Dirichlet parameters must be >= 1")
    per_sample = E.sub(E.digamma(E.row_sum(alpha)), E.take_columns(E.digamma(alpha), y))
    return E.mean_all(per_sample)


def auxiliary_expert_loss(alphas: Sequence, labels) -> Tensor:
    """Same evidential loss applied to every expert, averaged over experts."""
    total = None
    for a in alphas:
        term = digamma_loss(a, labels)
        total = term if total is None else E.add(total, term)
    return E.scale(total, 1.0 / len(alphas))


def load_balance_loss(pi, rho: float) -> Tensor:
    """Hinge on the concentration of batch-mean routing weights.

    Zero (with zero gradient) while ``sum(mean_pi**2) <= rho / n_experts``.
    """
    if not rho > 1:
        raise ConfigError(f"rho must exceed 1, got {rho}")
    pi = _tensor(pi)
    conc = E.sum_all(E.square(E.col_mean(pi)))
    return E.relu(E.sub(conc, rho / pi.shape[1]))


def diversity_loss(zhat: Sequence) -> Tensor:
    """Mean over private-expert pairs of the batch-mean squared cosine."""
    zhat = [_tensor(z) for z in zhat]
    n = len(zhat)
    if n < 2:
        return Tensor(0.0)
    total = None
    for i in range(n):
        for j in range(i + 1, n):
            term = E.mean_all(E.square(E.row_dot(zhat[i], zhat[j])))
            total = term if total is None else E.add(total, term)
    return E.scale(total, 2.0 / (n * (n - 1)))


def combine(fused: Tensor, view: Tensor, bal: Tensor, div: Tensor, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    total = fused
    for w, term in ((weights.lam, view), (weights.beta, bal), (weights.gamma, div)):
        if w != 0:
            total = E.add(total, E.scale(term, w))
    parts = [t.item() for t in (fused, view, bal, div)]
    # breakdown total recomputed from the reported parts so it is their exact weighted sum
    exact = parts[0] + weights.lam * parts[1] + weights.beta * parts[2] + weights.gamma * parts[3]
    return total, LossBreakdown(*parts, total=exact)


def total_loss(out, labels, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective for one forward pass (a ``ForwardOutput``)."""
    fused = digamma_loss(out.fused_alpha, labels)
    view = auxiliary_expert_loss(out.expert_alphas(), labels)
    bal = load_balance_loss(out.pi, weights.rho)
    div = diversity_loss(out.zhat)
    return combine(fused, view, bal, div, weights)
