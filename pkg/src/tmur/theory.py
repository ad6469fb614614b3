"""Executable checks of the scale-bias and routing-information-gap results.

The scale-bias check evaluates the closed forms of the evidence family
``e(t) = t r`` against finite differences and the opinion algebra.  The
information-gap check works on finite, exactly enumerable routing problems
with quadratic per-sample losses ``(mu / 2) * ||w - w*(x)||^2``, for which the
excess risk of the best statistic-measurable rule equals the conditional
variance bound.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from tmur.datasets import SyntheticSpec, generate_synthetic
from tmur.evidential import (
    ScaleFamily,
    evidence_to_opinion,
    family_true_class_probability,
    family_uncertainty,
    family_uncertainty_derivative,
    true_class_probability_derivative,
)


class CheckFailure(AssertionError):
    def __init__(self, check: str, detail: str):
        super().__init__(f"{check}: {detail}")
        self.check = check


# ---------------------------------------------------------------- scale bias


@dataclass
class Theorem1Report:
    pattern: list[float]
    grid_points: int
    uncertainty_strictly_decreasing: bool
    max_derivative_rel_error: float
    probability_direction_ok: bool
    max_direction_deviation: float
    derivative_tol: float
    direction_tol: float

    @property
    def passed(self) -> bool:
        return (
            self.uncertainty_strictly_decreasing
            and self.max_derivative_rel_error <= self.derivative_tol
            and self.probability_direction_ok
            and self.max_direction_deviation <= self.direction_tol
        )

    def lines(self) -> list[str]:
        return [
            f"pattern={self.pattern}",
            f"grid_points={self.grid_points}",
            f"uncertainty_strictly_decreasing={self.uncertainty_strictly_decreasing}",
            f"max_derivative_rel_error={self.max_derivative_rel_error!r}",
            f"probability_direction_ok={self.probability_direction_ok}",
            f"max_direction_deviation={self.max_direction_deviation!r}",
            f"status={'PASS' if self.passed else 'FAIL'}",
        ]


def log_grid(lo: float = 1e-2, hi: float = 1e2, points: int = 50) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), points)


def check_theorem1(
    f: ScaleFamily,
    t_grid=None,
    h: float = 1e-5,
    derivative_tol: float = 1e-6,
    direction_tol: float = 1e-10,
    strict: bool = True,
) -> Theorem1Report:
    """Verify the four scale-bias properties on ``t_grid``.

    Raises :class:`CheckFailure` naming the first failed property when
    ``strict`` is set.
    """
    t_grid = log_grid() if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid <= 0) or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be positive and increasing")
    k, r_total = f.num_classes, f.total

    u = np.array([family_uncertainty(f, t) for t in t_grid])
    decreasing = bool(np.all(np.diff(u) < 0))

    rel_errors = []
    for t in t_grid:
        step = min(h, t / 2)
        fd = (family_uncertainty(f, t + step) - family_uncertainty(f, t - step)) / (2 * step)
        analytic = family_uncertainty_derivative(f, t)
        rel_errors.append(abs(fd - analytic) / abs(analytic))
    max_rel = float(max(rel_errors))

    direction_ok = True
    for y in range(k):
        p = np.array([family_true_class_probability(f, y, t) for t in t_grid])
        dp = np.array([true_class_probability_derivative(f, y, t) for t in t_grid])
        margin = k * f.pattern[y] - r_total
        if margin > 0:
            ok = np.all(np.diff(p) > 0) and np.all(dp > 0)
        elif margin < 0:
            ok = np.all(np.diff(p) < 0) and np.all(dp < 0)
        else:
            ok = np.all(np.abs(p - 1.0 / k) <= 1e-12) and np.all(dp == 0)
        direction_ok = direction_ok and bool(ok)

    ref = evidence_to_opinion(f.evidence(t_grid[0])).belief
    ref = ref / np.linalg.norm(ref)
    max_dev = 0.0
    for t in t_grid[1:]:
        b = evidence_to_opinion(f.evidence(t)).belief
        max_dev = max(max_dev, float(np.max(np.abs(b / np.linalg.norm(b) - ref))))

    report = Theorem1Report(
        [float(x) for x in f.pattern], len(t_grid), decreasing, max_rel, direction_ok, max_dev,
        derivative_tol, direction_tol,
    )
    if strict:
        if not decreasing:
            raise CheckFailure("uncertainty-monotone", "u(t) not strictly decreasing on grid")
        if max_rel > derivative_tol:
            raise CheckFailure("derivative", f"relative error {max_rel:.3g} > {derivative_tol}")
        if not direction_ok:
            raise CheckFailure("probability-direction", "p_y monotonicity does not follow sign of K r_y - R")
        if max_dev > direction_tol:
            raise CheckFailure("belief-direction", f"deviation {max_dev:.3g} > {direction_tol}")
    return report


# ---------------------------------------------------------------- information gap


@dataclass(frozen=True)
class RoutingGapInstance:
    """Finite context set with oracle simplex weights and a local statistic."""

    probabilities: np.ndarray
    oracle_weights: np.ndarray
    statistics: tuple[Hashable, ...]
    mu: float

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        w = np.asarray(self.oracle_weights, dtype=np.float64)
        if p.ndim != 1 or w.ndim != 2 or w.shape[0] != p.shape[0] or len(self.statistics) != p.shape[0]:
            raise ValueError("one probability, oracle weight row and statistic per context")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("context probabilities must form a distribution")
        if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("oracle weights must lie on the simplex")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "oracle_weights", w)
        object.__setattr__(self, "statistics", tuple(self.statistics))

    @property
    def num_experts(self) -> int:
        return self.oracle_weights.shape[1]

    def loss(self, context: int, w: np.ndarray) -> float:
        d = np.asarray(w) - self.oracle_weights[context]
        return 0.5 * self.mu * float(d @ d)

    def groups(self) -> dict[Hashable, list[int]]:
        out: dict[Hashable, list[int]] = {}
        for i, s in enumerate(self.statistics):
            out.setdefault(s, []).append(i)
        return out


def xor_instance(mu: float = 2.0) -> RoutingGapInstance:
    """Contexts ``(a, b)`` uniform on {0,1}^2, statistic ``a``, oracle picks expert ``a xor b``."""
    contexts = list(itertools.product((0, 1), repeat=2))
    weights = [(1.0, 0.0) if a ^ b == 0 else (0.0, 1.0) for a, b in contexts]
    return RoutingGapInstance(np.full(4, 0.25), np.array(weights), tuple(a for a, _ in contexts), mu)


def best_local_rule(inst: RoutingGapInstance) -> dict[Hashable, np.ndarray]:
    """Conditional mean of the oracle weights for each statistic value."""
    rule = {}
    for s, idx in inst.groups().items():
        p = inst.probabilities[idx]
        rule[s] = (p[:, None] * inst.oracle_weights[idx]).sum(axis=0) / p.sum()
    return rule


def simplex_grid(num_experts: int, resolution: float = 1e-3) -> np.ndarray:
    """All simplex points whose coordinates are multiples of ``resolution``."""
    steps = int(round(1.0 / resolution))
    if num_experts == 1:
        return np.ones((1, 1))
    if num_experts == 2:
        a = np.arange(steps + 1) / steps
        return np.stack([a, 1.0 - a], axis=1)
    if num_experts == 3:
        i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
        keep = i + j <= steps
        i, j = i[keep], j[keep]
        return np.stack([i, j, steps - i - j], axis=1) / steps
    raise ValueError("grid search is limited to at most three experts")


@dataclass
class GapReport:
    oracle_risk: float
    best_local_risk: float
    lower_bound: float
    grid_best_local_risk: float
    equality_tol: float
    grid_tol: float

    @property
    def excess(self) -> float:
        return self.best_local_risk - self.oracle_risk

    @property
    def passed(self) -> bool:
        return (
            self.best_local_risk >= self.oracle_risk
            and abs(self.excess - self.lower_bound) <= self.equality_tol
            and abs(self.grid_best_local_risk - self.best_local_risk) <= self.grid_tol
            and self.grid_best_local_risk >= self.best_local_risk - self.equality_tol
        )

    def lines(self) -> list[str]:
        return [
            f"oracle_risk={self.oracle_risk!r}",
            f"best_local_risk={self.best_local_risk!r}",
            f"excess_risk={self.excess!r}",
            f"lower_bound={self.lower_bound!r}",
            f"grid_best_local_risk={self.grid_best_local_risk!r}",
            f"status={'PASS' if self.passed else 'FAIL'}",
        ]


def conditional_variance_bound(inst: RoutingGapInstance) -> float:
    """``(mu/2) E[Var(w* | s)]`` with Var the trace of the conditional covariance."""
    total = 0.0
    for idx in inst.groups().values():
        p = inst.probabilities[idx]
        mass = p.sum()
        if mass == 0:
            continue
        w = inst.oracle_weights[idx]
        second = (p[:, None] * w * w).sum(axis=0) / mass
        first = (p[:, None] * w).sum(axis=0) / mass
        total += mass * float((second - first * first).sum())
    return float(0.5 * inst.mu * total)


def check_theorem2(
    inst: RoutingGapInstance,
    resolution: float = 1e-3,
    equality_tol: float = 1e-12,
    grid_tol: float = 1e-4,
    strict: bool = True,
) -> GapReport:
    p = inst.probabilities
    oracle = float(sum(p[i] * inst.loss(i, inst.oracle_weights[i]) for i in range(len(p))))
    rule = best_local_rule(inst)
    local = float(sum(p[i] * inst.loss(i, rule[s]) for i, s in enumerate(inst.statistics)))
    bound = conditional_variance_bound(inst)

    grid = simplex_grid(inst.num_experts, resolution)
    grid_risk = 0.0
    for idx in inst.groups().values():
        diffs = grid[:, None, :] - inst.oracle_weights[idx][None, :, :]
        risks = 0.5 * inst.mu * ((diffs * diffs).sum(axis=2) @ p[idx])
        grid_risk += float(risks.min())

    report = GapReport(oracle, local, bound, grid_risk, equality_tol, grid_tol)
    if strict and not report.passed:
        raise CheckFailure(
            "information-gap",
            f"excess {report.excess!r} vs bound {bound!r}, grid {grid_risk!r}",
        )
    return report


# ---------------------------------------------------------------- learning demo


@dataclass
class GapDemoReport:
    seeds: list[int]
    full_accuracy: list[float]
    local_accuracy: list[float]
    min_margin: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def margins(self) -> list[float]:
        return [f - l for f, l in zip(self.full_accuracy, self.local_accuracy)]

    @property
    def passed(self) -> bool:
        return all(m >= self.min_margin for m in self.margins)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return list(zip(self.seeds, self.full_accuracy, self.local_accuracy, self.margins))


XOR_DEMO_SPEC = SyntheticSpec(
    num_samples=1000, num_classes=2, view_dims=(8, 8), informative=1.0, noise=1.0,
    mode="sample-dependent", seed=0, name="xor-reliability",
)


def routing_gap_learning_demo(
    spec: SyntheticSpec = XOR_DEMO_SPEC,
    seeds: Sequence[int] = (3407, 7, 601, 101, 503),
    aligned_dim: int = 32,
    hidden: int = 64,
    epochs: int = 50,
    min_margin: float = -0.01,
    weights=None,
) -> GapDemoReport:
    """Train the full router and a local-statistics router per seed.

    Each seed regenerates the dataset with that seed and drives split,
    initialisation and shuffling, so the seeds are independent replicates.
    """
    from tmur.model import ModelConfig, TMURModel
    from tmur.objectives import LossWeights
    from tmur.training import TrainConfig, fit

    weights = weights or LossWeights()
    full, local = [], []
    for seed in seeds:
        ds = generate_synthetic(replace(spec, seed=seed))
        for router_input, sink in (("context", full), ("local", local)):
            cfg = ModelConfig(ds.view_dims, ds.num_classes, aligned_dim=aligned_dim,
                              expert_hidden_dims=(hidden,), router_input=router_input)
            model = TMURModel(cfg, seed=seed)
            report = fit(model, ds, TrainConfig(epochs=epochs, seed=seed, weights=weights, track_test=False))
            sink.append(report.final.accuracy)
    return GapDemoReport(list(seeds), full, local, min_margin)
