import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from multitransnet.geometry import BallCover
from multitransnet.neuronbank import (
    CounterStream,
    NeuronBank,
    basis_derivative,
    basis_eval,
    density,
    generate_bank,
    read_bank,
    write_bank,
    write_bank_csv,
)


def single_neuron(a, r, center):
    a = np.atleast_2d(np.asarray(a, float))
    return NeuronBank(a, np.array([float(r)]), BallCover(center, 1.0), seed=0)


class TestGenerateBank:
    def test_deterministic(self):
        ball = BallCover([0.5, -0.2, 1.0], 1.3)
        a, b = generate_bank(ball, 500, seed=11), generate_bank(ball, 500, seed=11)
        assert a.directions.tobytes() == b.directions.tobytes()
        assert a.offsets.tobytes() == b.offsets.tobytes()

    def test_streams_differ(self):
        ball = BallCover([0.0, 0.0], 1.0)
        a, b = generate_bank(ball, 50, 3, stream=0), generate_bank(ball, 50, 3, stream=1)
        assert not np.allclose(a.offsets, b.offsets)

    def test_single_neuron(self):
        bank = generate_bank(BallCover([0.0, 0.0], 2.5), 1, seed=4)
        assert bank.M == 1
        assert abs(np.linalg.norm(bank.directions[0]) - 1.0) <= 1e-12
        assert 0.0 <= bank.offsets[0] <= 2.5

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(1, 3),
        st.integers(1, 400),
        st.floats(0.1, 5.0),
        st.integers(0, 2**63),
    )
    def test_invariants(self, d, M, R, seed):
        bank = generate_bank(BallCover(np.zeros(d), R), M, seed)
        assert bank.directions.shape == (M, d)
        np.testing.assert_allclose(np.linalg.norm(bank.directions, axis=1), 1.0, atol=1e-12)
        assert np.all((bank.offsets >= 0) & (bank.offsets <= R))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            generate_bank(BallCover([0.0], 1.0), 0, seed=0)

    def test_uniforms_in_unit_interval(self):
        u = CounterStream(9, 2).uniform(10000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 5 * math.sqrt(1 / 12 / 10000)

    def test_normals_moments(self):
        z = CounterStream(1).normal(40001)
        assert z.shape == (40001,)
        assert abs(z.mean()) < 5 / math.sqrt(z.size)
        assert abs(z.var() - 1.0) < 5 * math.sqrt(2 / z.size)

    def test_directions_isotropic_in_2d(self):
        bank = generate_bank(BallCover([0.0, 0.0], 1.0), 20000, seed=5)
        ang = np.arctan2(bank.directions[:, 1], bank.directions[:, 0])
        hist, _ = np.histogram(ang, bins=8, range=(-np.pi, np.pi))
        # chi-square with 7 dof; 99.9% quantile is about 24.3
        expected = 20000 / 8
        assert np.sum((hist - expected) ** 2 / expected) < 24.3


class TestDensity:
    def test_unit_ball(self):
        bank = generate_bank(BallCover([0.0, 0.0], 1.0), 30000, seed=0)
        assert abs(density(bank, [0.0, 0.0], 0.1) - 0.1) <= 0.01

    def test_scaled_ball_halves_density(self):
        bank = generate_bank(BallCover([0.0, 0.0], 2.0), 30000, seed=0)
        assert abs(density(bank, [0.0, 0.0], 0.1) - 0.05) <= 0.01

    def test_vanishing_tau(self):
        bank = generate_bank(BallCover([0.0, 0.0], 1.0), 5000, seed=2)
        assert density(bank, [0.3, 0.1], 1e-300) == 0.0

    def test_tau_must_be_below_radius(self):
        bank = generate_bank(BallCover([0.0, 0.0], 1.0), 10, seed=2)
        with pytest.raises(ValueError):
            density(bank, [0.0, 0.0], 1.0)

    def test_vectorized(self):
        bank = generate_bank(BallCover([0.0, 0.0], 1.0), 100, seed=2)
        pts = np.array([[0.0, 0.0], [0.2, 0.3]])
        vals = density(bank, pts, 0.2)
        assert vals.shape == (2,)
        assert vals[1] == density(bank, pts[1], 0.2)

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(-64, 64),
        st.integers(-64, 64),
        st.integers(-64, 64),
        st.integers(-64, 64),
        st.integers(0, 1000),
    )
    def test_translation_equivariance(self, px, py, tx, ty, seed):
        # dyadic coordinates keep x - x_c exact under the shift
        x = np.array([px, py]) / 128.0
        t = np.array([tx, ty]) / 8.0
        c = np.array([0.25, -0.5])
        b0 = generate_bank(BallCover(c, 1.0), 300, seed)
        b1 = generate_bank(BallCover(c + t, 1.0), 300, seed)
        assert density(b0, x, 0.1) == density(b1, x + t, 0.1)
        assert density(b0, x, 0.1) == density(b0.translated(t), x + t, 0.1)


class TestBasisEval:
    def test_tanh_at_origin(self):
        bank = single_neuron([1.0, 0.0], 0.0, [0.3, 0.7])
        ev = basis_eval(bank, 1.0, [[0.3, 0.7]], order=2)
        assert ev.values[0, 0] == 1.0 and ev.values[0, 1] == 0.0
        assert ev.gradients[0, 1, 0] == 1.0 and ev.gradients[0, 1, 1] == 0.0
        assert ev.hessians[0, 1, 0, 0] == 0.0

    def test_constant_column(self):
        bank = generate_bank(BallCover([0.0, 0.0], 1.0), 20, seed=1)
        pts = np.random.default_rng(0).uniform(-1, 1, (30, 2))
        ev = basis_eval(bank, 2.0, pts, order=2)
        assert np.all(ev.values[:, 0] == 1.0)
        assert not ev.gradients[:, 0].any() and not ev.hessians[:, 0].any()

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_gradients_match_finite_differences(self, d):
        rng = np.random.default_rng(d)
        bank = generate_bank(BallCover(np.zeros(d), 1.0), 40, seed=d)
        gamma, h = 1.7, 1e-5
        pts = rng.uniform(-1, 1, (100, d))
        ev = basis_eval(bank, gamma, pts, order=1)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            fd = (basis_eval(bank, gamma, pts + e).values - basis_eval(bank, gamma, pts - e).values) / (2 * h)
            ref = ev.gradients[:, 1:, i]
            scale = np.maximum(np.abs(ref), 1e-3)
            assert np.max(np.abs(fd[:, 1:] - ref) / scale) <= 1e-6

    def test_laplacian_identity_against_sympy(self):
        xs = sp.symbols("x0 x1 x2", real=True)
        bank = generate_bank(BallCover([0.1, -0.2, 0.3], 1.0), 5, seed=8)
        gamma = 2.3
        pts = np.random.default_rng(1).uniform(-1, 1, (20, 3))
        ev = basis_eval(bank, gamma, pts, order=2)
        lap = np.trace(ev.hessians, axis1=2, axis2=3)
        for m in range(bank.M):
            a = [sp.Float(v, 30) for v in bank.directions[m]]
            arg = sum(a[i] * (xs[i] - sp.Float(bank.ball.center[i], 30)) for i in range(3)) + sp.Float(bank.offsets[m], 30)
            phi = sp.tanh(sp.Float(gamma, 30) * arg)
            f = sp.lambdify(xs, sum(sp.diff(phi, v, 2) for v in xs), "numpy")
            np.testing.assert_allclose(lap[:, m + 1], f(*pts.T), rtol=1e-10, atol=1e-12)
        phi = ev.values[:, 1:]
        np.testing.assert_allclose(lap[:, 1:], -2 * gamma**2 * phi * (1 - phi**2), rtol=1e-12, atol=1e-14)

    def test_hessians_symmetric(self):
        bank = generate_bank(BallCover(np.zeros(3), 1.0), 30, seed=3)
        pts = np.random.default_rng(2).uniform(-1, 1, (25, 3))
        H = basis_eval(bank, 1.1, pts, order=2).hessians
        assert np.array_equal(H, np.swapaxes(H, 2, 3))

    def test_rejects_bad_arguments(self):
        bank = generate_bank(BallCover([0.0], 1.0), 3, seed=0)
        with pytest.raises(ValueError):
            basis_eval(bank, 0.0, [[0.0]])
        with pytest.raises(ValueError):
            basis_eval(bank, 1.0, [[0.0]], order=3)
        with pytest.raises(ValueError):
            basis_derivative(bank, 1.0, [[0.0]], (3,))


def test_basis_derivative_agrees_with_basis_eval():
    bank = generate_bank(BallCover([0.0, 0.0], 1.0), 25, seed=6)
    pts = np.random.default_rng(4).uniform(-1, 1, (40, 2))
    ev = basis_eval(bank, 1.4, pts, order=2)
    cache = {}
    np.testing.assert_allclose(basis_derivative(bank, 1.4, pts, (0, 0), _cache=cache), ev.values)
    np.testing.assert_allclose(basis_derivative(bank, 1.4, pts, (1, 0), _cache=cache), ev.gradients[..., 0])
    np.testing.assert_allclose(basis_derivative(bank, 1.4, pts, (0, 1), _cache=cache), ev.gradients[..., 1])
    np.testing.assert_allclose(basis_derivative(bank, 1.4, pts, (1, 1), _cache=cache), ev.hessians[..., 0, 1])
    np.testing.assert_allclose(basis_derivative(bank, 1.4, pts, (0, 2), _cache=cache), ev.hessians[..., 1, 1])


def test_bank_roundtrip(tmp_path):
    bank = generate_bank(BallCover([0.5, 0.25, -1.0], 0.75), 64, seed=2**40 + 3, stream=2)
    write_bank(bank, tmp_path / "b.bin")
    back = read_bank(tmp_path / "b.bin")
    assert back.seed == bank.seed and back.stream == 2
    assert back.directions.tobytes() == bank.directions.tobytes()
    assert back.offsets.tobytes() == bank.offsets.tobytes()
    assert back.ball.radius == 0.75
    np.testing.assert_array_equal(back.ball.center, bank.ball.center)
    write_bank_csv(bank, tmp_path / "b.csv")
    data = np.loadtxt(tmp_path / "b.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, :3], bank.directions)
    (tmp_path / "junk.bin").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValueError):
        read_bank(tmp_path / "junk.bin")
