import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from multitransnet.shapes import (
    OMEGA,
    AllocationError,
    AllocationPlan,
    SearchError,
    allocate_neurons,
    equal_allocation,
    fit_constant,
    formula_shapes,
    golden_section,
    link_shapes,
    optimize_multinet_shape,
    predict_shape,
)


def largest_remainder_oracle(M, radii):
    """Exact-rational Hamilton apportionment, index order on ties."""
    fr = [Fraction(r) for r in radii]
    quota = [M * r / sum(fr) for r in fr]
    counts = [math.floor(q) for q in quota]
    order = sorted(range(len(radii)), key=lambda k: (-(quota[k] - counts[k]), k))
    for k in order[: M - sum(counts)]:
        counts[k] += 1
    return tuple(counts)


class TestAllocation:
    def test_two_balls(self):
        assert allocate_neurons(60000, (0.5, 1.0)).counts == (20000, 40000)

    def test_exact_proportion(self):
        assert allocate_neurons(1200, (1.0, 1.5)).counts == (480, 720)

    def test_tie_break_by_index(self):
        plan = allocate_neurons(10, (1, 1, 1))
        assert plan.counts == (4, 3, 3) and plan.total == 10

    def test_infeasible(self):
        with pytest.raises(AllocationError):
            allocate_neurons(2, (1.0, 1.0, 1.0))
        with pytest.raises(AllocationError):
            allocate_neurons(5, (1.0, -1.0))

    def test_equal_allocation_keeps_radii(self):
        plan = equal_allocation(9, 3, (0.5, 1.0, 2.0))
        assert plan.counts == (3, 3, 3) and plan.radii == (0.5, 1.0, 2.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.05, 10.0), min_size=1, max_size=6), st.integers(1, 100000))
    def test_invariants(self, radii, M):
        assume(M >= len(radii))
        plan = allocate_neurons(M, radii)
        assert plan.total == M and min(plan.counts) >= 1
        share = [M * r / sum(radii) for r in radii]
        assert all(abs(c - s) <= 1 + 1e-9 for c, s in zip(plan.counts, share))
        dens = M / sum(radii)
        assert max(abs(c / r - dens) for c, r in zip(plan.counts, radii)) <= 1 / min(radii) + 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=5), st.integers(5, 5000))
    def test_matches_rational_oracle(self, radii, M):
        # eighths make exact remainder ties common
        radii = [r / 8 for r in radii]
        plan = allocate_neurons(M, radii)
        if min(largest_remainder_oracle(M, radii)) >= 1:
            assert plan.counts == largest_remainder_oracle(M, radii)


class TestGoldenSection:
    def test_quadratic(self):
        calls = []

        def eta(g):
            calls.append(g)
            return (g - 2.0) ** 2

        g, trace = golden_section(eta, (0.0, 5.0), 7)
        assert len(calls) == 9 and len(trace.iterations) == 9
        assert abs(g - 2.0) <= 5 * OMEGA**7
        assert trace.final == g

    def test_bracket_lengths_geometric(self):
        _, trace = golden_section(lambda g: (g - 3.3) ** 2, (0.0, 5.0), 7)
        lengths = [e["bracket"][1] - e["bracket"][0] for e in trace.iterations]
        assert lengths[0] == 5.0
        for i, L in enumerate(lengths[1:]):
            assert abs(L - 5.0 * OMEGA**i) <= 1e-12

    def test_constant_residual_keeps_left_probe(self):
        _, trace = golden_section(lambda g: 1.0, (0.0, 5.0), 3)
        # ties shrink from the right: every bracket keeps a=0
        assert all(e["bracket"][0] == 0.0 for e in trace.iterations)
        assert 0.0 < trace.final < 5.0
        assert trace.final in [e["probe"] for e in trace.iterations]

    def test_minimum_at_left_endpoint(self):
        g, trace = golden_section(lambda g: abs(g - 0.0), (0.0, 5.0), 7)
        assert trace.iterations[-1]["bracket"][0] == 0.0
        assert g <= 5.0 * OMEGA**7

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 10.0), st.floats(0.5, 10.0), st.integers(1, 20), st.floats(0.0, 1.0))
    def test_unimodal_minimizer_in_final_bracket(self, a, width, itr, frac):
        b = a + width
        target = a + frac * width
        g, trace = golden_section(lambda x: (x - target) ** 2, (a, b), itr)
        lo, hi = trace.iterations[-1]["bracket"]
        tol = 1e-9 * (1 + b)
        assert lo - tol <= target <= hi + tol
        assert lo - tol <= g <= hi + tol

    def test_non_finite_aborts_with_trace(self):
        with pytest.raises(SearchError) as info:
            golden_section(lambda g: float("nan") if g > 2.5 else g, (0.0, 5.0), 7)
        assert len(info.value.trace.iterations) == 2

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            golden_section(lambda g: g, (1.0, 1.0))
        with pytest.raises(ValueError):
            golden_section(lambda g: g, (0.0, 1.0), 0)


class TestEmpiricalFormula:
    def test_fit_constant_example(self):
        assert fit_constant(0.7993, 200, 1.5, 2) == pytest.approx(8.4779e-2, rel=1e-4)

    def test_round_trip(self):
        C = fit_constant(1.234, 300, 0.8, 3)
        assert predict_shape(C, 300, 0.8, 3) == pytest.approx(1.234, rel=1e-15)
        assert fit_constant(2.5, 1, 1.0, 1) == 2.5

    def test_predict_examples(self):
        # the quoted 1.7874 is rounded from 1.78730
        assert predict_shape(8.4779e-2, 1000, 1.5, 2) == pytest.approx(1.7874, rel=1e-4)
        assert predict_shape(4.4180e-2, 2000, 0.75, 3) == pytest.approx(0.7421, abs=1e-4)

    def test_homogeneity(self):
        assert predict_shape(0.1, 800, 1.0, 2) / predict_shape(0.1, 400, 1.0, 2) == pytest.approx(math.sqrt(2))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-3, 1.0), st.lists(st.floats(0.1, 5.0), min_size=1, max_size=5), st.integers(1, 3))
    def test_formula_constant_across_subdomains(self, C, radii, d):
        plan = allocate_neurons(1000, radii)
        sp = formula_shapes(C, plan, d)
        for g, m, r in zip(sp.gammas, plan.counts, plan.radii):
            assert g * r / m ** (1 / d) == pytest.approx(C, rel=1e-13)


class TestLinking:
    def test_equal_counts(self):
        sp = link_shapes(3.0, 0, AllocationPlan((100, 100), (1.0, 2.0)), 2)
        assert sp.gammas == pytest.approx((3.0, 1.5))

    def test_uniform_allocation(self):
        plan = allocate_neurons(500, (1.0, 4.0))
        sp = link_shapes(3.0, 0, plan, 2)
        assert sp.gammas[1] == pytest.approx(1.5, rel=1e-14)

    def test_single_subdomain(self):
        sp = link_shapes(0.9, 0, AllocationPlan((10,), (1.0,)), 2)
        assert sp.gammas == (0.9,) and sp.anchor == (0, 0.9)

    def test_bad_anchor(self):
        with pytest.raises(IndexError):
            link_shapes(1.0, 2, AllocationPlan((1, 1), (1.0, 1.0)), 2)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 5.0), st.lists(st.floats(0.1, 5.0), min_size=1, max_size=4), st.integers(1, 3))
    def test_linked_shapes_share_constant(self, g, radii, d):
        plan = allocate_neurons(400, radii)
        k0 = len(radii) - 1
        sp = link_shapes(g, k0, plan, d)
        for gk, m, r in zip(sp.gammas, plan.counts, plan.radii):
            assert fit_constant(gk, m, r, d) == pytest.approx(sp.C, rel=1e-12)


class TestOptimizeMultinet:
    def test_single_net_matches_golden_section(self):
        plan = AllocationPlan((50,), (1.0,))
        sp, trace = optimize_multinet_shape(lambda gs: (gs[0] - 1.1) ** 2, (0, 5), 7, plan, 2)
        g, _ = golden_section(lambda x: (x - 1.1) ** 2, (0, 5), 7)
        assert sp.gammas == (g,) and trace.final == g

    def test_linked_search(self):
        plan = allocate_neurons(600, (0.5, 1.5))
        seen = []

        def eta(gs):
            seen.append(gs)
            return (gs[1] - 1.0) ** 2

        sp, trace = optimize_multinet_shape(eta, (0, 5), 10, plan, 2)
        assert len(seen) == 12
        for gs in seen:
            C = fit_constant(gs[0], plan.counts[0], 0.5, 2)
            assert fit_constant(gs[1], plan.counts[1], 1.5, 2) == pytest.approx(C, rel=1e-12)
        assert sp.gammas[1] == pytest.approx(1.0, abs=0.05)
        assert sp.strategy == "optimized"

    def test_constant_residual(self):
        plan = allocate_neurons(60, (1.0, 2.0))
        sp, trace = optimize_multinet_shape(lambda gs: 0.0, (0, 5), 4, plan, 2)
        assert 0 < sp.anchor[1] < 5
        np.testing.assert_allclose(sp.gammas, link_shapes(sp.anchor[1], 0, plan, 2).gammas)
