"""Neuron allocation across subdomains and shape-parameter selection."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

OMEGA = (math.sqrt(5.0) - 1.0) / 2.0


class AllocationError(ValueError):
    pass


class SearchError(RuntimeError):
    """A residual evaluation returned a non-finite value; ``trace`` has the history."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class AllocationPlan:
    counts: tuple[int, ...]
    radii: tuple[float, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def K(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class ShapePlan:
    gammas: tuple[float, ...]
    strategy: str  # "optimized" | "formula"
    C: float | None = None
    anchor: tuple[int, float] | None = None


@dataclass
class SearchTrace:
    """One entry per residual evaluation: bracket at the time, probe, residual."""

    iterations: list = field(default_factory=list)
    final: float | None = None

    def record(self, a, b, probe, res):
        self.iterations.append({"bracket": [float(a), float(b)], "probe": float(probe), "residual": float(res)})

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "final": self.final}


def allocate_neurons(M: int, radii: Sequence[float]) -> AllocationPlan:
    """Split ``M`` neurons proportionally to the cover radii (largest remainder)."""
    radii = tuple(float(r) for r in radii)
    K = len(radii)
    if K == 0 or any(r <= 0 for r in radii):
        raise AllocationError("radii must be positive")
    if M < K:
        raise AllocationError(f"cannot give {K} subdomains at least one neuron each from M={M}")
    # exact rational quotas so that equal remainders really tie (index order wins)
    exact = [M * Fraction(r) / sum(Fraction(q) for q in radii) for r in radii]
    counts = np.array([math.floor(q) for q in exact], dtype=int)
    quota = np.array([float(q) for q in exact])
    rem = [q - int(c) for q, c in zip(exact, counts)]
    order = sorted(range(K), key=lambda k: (-rem[k], k))
    for k in order[: M - counts.sum()]:
        counts[k] += 1
    # every subdomain keeps at least one neuron; take from the most over-served
    while (counts == 0).any():
        k0 = int(np.flatnonzero(counts == 0)[0])
        donor = int(np.argmax(np.where(counts > 1, counts - quota, -np.inf)))
        counts[donor] -= 1
        counts[k0] = 1
    return AllocationPlan(tuple(int(c) for c in counts), radii)


def equal_allocation(M: int, K: int, radii: Sequence[float] | None = None) -> AllocationPlan:
    plan = allocate_neurons(M, [1.0] * K)
    return AllocationPlan(plan.counts, tuple(radii) if radii is not None else plan.radii)


def golden_section(eta: Callable[[float], float], interval, iterations: int = 7):
    """Golden-section search for the shape parameter, following the classical
    two-probe scheme: shrink towards the probe with the smaller residual
    (ties keep the left probe) and finally return the better of the two probes.

    Returns ``(gamma_opt, trace)``; ``eta`` is called exactly ``iterations + 2`` times.
    """
    a, b = float(interval[0]), float(interval[1])
    if not b > a >= 0:
        raise ValueError("search interval must satisfy b > a >= 0")
    if iterations < 1:
        raise ValueError("need at least one iteration")
    trace = SearchTrace()

    def ev(g):
        v = float(eta(g))
        trace.record(a, b, g, v)
        if not math.isfinite(v):
            raise SearchError(f"residual at gamma={g!r} is {v}", trace)
        return v

    g1 = b - OMEGA * (b - a)
    g2 = a + OMEGA * (b - a)
    r1 = ev(g1)
    r2 = ev(g2)
    for _ in range(iterations):
        if r1 <= r2:
            b = g2
            g2, r2 = g1, r1
            g1 = b - OMEGA * (b - a)
            r1 = ev(g1)
        else:
            a = g1
            g1, r1 = g2, r2
            g2 = a + OMEGA * (b - a)
            r2 = ev(g2)
    trace.final = g1 if r1 <= r2 else g2
    return trace.final, trace


def fit_constant(gamma_opt: float, M0: int, R: float, d: int) -> float:
    return gamma_opt * R / M0 ** (1.0 / d)


def predict_shape(C: float, M: int, R: float, d: int) -> float:
    return C * M ** (1.0 / d) / R


def formula_shapes(C: float, plan: AllocationPlan, d: int) -> ShapePlan:
    gammas = tuple(predict_shape(C, m, r, d) for m, r in zip(plan.counts, plan.radii))
    return ShapePlan(gammas, "formula", C=C)


def link_shapes(gamma_anchor: float, anchor_index: int, plan: AllocationPlan, d: int) -> ShapePlan:
    """Shapes of all subdomains sharing one empirical constant with the anchor."""
    k0 = anchor_index
    if not 0 <= k0 < plan.K:
        raise IndexError(f"anchor index {k0} out of range")
    Rk0, Mk0 = plan.radii[k0], plan.counts[k0]
    gammas = tuple(
        gamma_anchor * (Rk0 / R) * (M / Mk0) ** (1.0 / d) for M, R in zip(plan.counts, plan.radii)
    )
    C = fit_constant(gamma_anchor, Mk0, Rk0, d)
    return ShapePlan(gammas, "optimized", C=C, anchor=(k0, float(gamma_anchor)))


def optimize_multinet_shape(
    eta: Callable[[tuple[float, ...]], float],
    interval,
    iterations: int,
    plan: AllocationPlan,
    d: int,
    anchor_index: int = 0,
):
    """Golden-section search over the anchor shape with the others linked to it.

    ``eta`` receives the full tuple of subdomain shapes.
    Returns ``(ShapePlan, SearchTrace)``.
    """
    linked = lambda g: eta(link_shapes(g, anchor_index, plan, d).gammas)  # noqa: E731
    g_opt, trace = golden_section(linked, interval, iterations)
    return link_shapes(g_opt, anchor_index, plan, d), trace
