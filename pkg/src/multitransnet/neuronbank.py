"""Pre-determined hidden-layer neurons and the tanh neural basis.

Neuron ``m`` of a bank is the hyperplane ``a_m . (x - x_c) + r_m = 0`` with a
unit normal ``a_m`` and an offset ``r_m`` in ``[0, R]``.  For a shape parameter
``gamma`` the basis function is ``tanh(gamma * (a_m . (x - x_c) + r_m))`` and
column 0 of every evaluation is the constant function.

Random numbers come from NumPy's counter-based Philox4x64 generator keyed by
``(seed, stream)``.  The pipeline uses the subdomain index as the stream, so a
subdomain's bank does not depend on how many other banks were drawn before it.
Uniforms are built from the raw 64-bit words (top 53 bits) and normals from
Box-Muller, which keeps the draws independent of NumPy's sampler internals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import BallCover

Array = np.ndarray

_TWO_POW_53 = 2.0**-53


class CounterStream:
    """Uniform and Gaussian draws from Philox keyed by ``(seed, stream)``."""

    def __init__(self, seed: int, stream: int = 0):
        key = np.array([seed % 2**64, stream % 2**64], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def uniform(self, n: int) -> Array:
        """``n`` doubles in [0, 1)."""
        raw = self._bitgen.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * _TWO_POW_53

    def normal(self, n: int) -> Array:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        rad = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u is in (0, 1]
        ang = 2.0 * np.pi * u[:, 1]
        z = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)]).ravel()
        return z[:n]


@dataclass(frozen=True)
class NeuronBank:
    directions: Array  # (M, d) unit vectors
    offsets: Array  # (M,) in [0, R]
    ball: BallCover
    seed: int
    stream: int = 0

    @property
    def M(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def translated(self, shift) -> "NeuronBank":
        ball = BallCover(self.ball.center + np.asarray(shift, float), self.ball.radius)
        return NeuronBank(self.directions, self.offsets, ball, self.seed, self.stream)


def generate_bank(ball: BallCover, M: int, seed: int, stream: int = 0) -> NeuronBank:
    """Draw ``M`` neurons uniformly distributed with respect to ``ball``."""
    if M < 1:
        raise ValueError("a bank needs at least one neuron")
    d = ball.dim
    rng = CounterStream(seed, stream)
    g = rng.normal(M * d).reshape(M, d)
    norms = np.linalg.norm(g, axis=1)
    while np.any(norms == 0.0):
        bad = np.flatnonzero(norms == 0.0)
        g[bad] = rng.normal(bad.size * d).reshape(bad.size, d)
        norms = np.linalg.norm(g, axis=1)
    directions = g / norms[:, None]
    offsets = ball.radius * rng.uniform(M)
    return NeuronBank(directions, offsets, ball, int(seed), int(stream))


def hyperplane_distance(bank: NeuronBank, x: Array) -> Array:
    """(N, M) distances from points to every partition hyperplane."""
    x = np.atleast_2d(np.asarray(x, float))
    return np.abs((x - bank.ball.center) @ bank.directions.T + bank.offsets)


def density(bank: NeuronBank, x, tau: float):
    """Fraction of hyperplanes closer than ``tau`` to ``x`` (scalar or per point)."""
    if not tau < bank.ball.radius:
        raise ValueError("tau must be smaller than the cover radius")
    x = np.asarray(x, float)
    vals = (hyperplane_distance(bank, x) < tau).mean(axis=1)
    return float(vals[0]) if x.ndim == 1 else vals


@dataclass(frozen=True)
class Activation:
    """An activation with closed-form first and second derivatives.

    ``d1`` and ``d2`` receive the activation *value* as well as the argument,
    since for tanh both derivatives are cheapest in terms of the value.
    """

    name: str
    value: Callable[[Array], Array]
    d1: Callable[[Array, Array], Array]
    d2: Callable[[Array, Array], Array]


TANH = Activation(
    "tanh",
    np.tanh,
    lambda s, t: 1.0 - t * t,
    lambda s, t: -2.0 * t * (1.0 - t * t),
)


@dataclass(frozen=True)
class BasisEvaluation:
    """Basis values and derivatives at N points.

    ``values`` is (N, M+1); ``gradients`` (N, M+1, d) and ``hessians``
    (N, M+1, d, d) keep the constant column (all zeros) so that column indices
    line up with ``values``.
    """

    values: Array
    gradients: Array | None = None
    hessians: Array | None = None


def _preactivation(bank: NeuronBank, gamma: float, points: Array) -> Array:
    points = np.atleast_2d(np.asarray(points, float))
    return gamma * ((points - bank.ball.center) @ bank.directions.T + bank.offsets)


def basis_eval(
    bank: NeuronBank, gamma: float, points: Array, order: int = 0, activation: Activation = TANH
) -> BasisEvaluation:
    if not gamma > 0:
        raise ValueError("shape parameter must be positive")
    if order not in (0, 1, 2):
        raise ValueError("basis derivatives are available up to order 2")
    s = _preactivation(bank, gamma, points)
    t = activation.value(s)
    n, m = t.shape
    values = np.empty((n, m + 1))
    values[:, 0] = 1.0
    values[:, 1:] = t
    grads = hess = None
    a = bank.directions
    if order >= 1:
        grads = np.zeros((n, m + 1, bank.dim))
        grads[:, 1:, :] = (gamma * activation.d1(s, t))[:, :, None] * a[None, :, :]
    if order == 2:
        hess = np.zeros((n, m + 1, bank.dim, bank.dim))
        aa = a[:, :, None] * a[:, None, :]
        hess[:, 1:] = (gamma**2 * activation.d2(s, t))[:, :, None, None] * aa[None]
    return BasisEvaluation(values, grads, hess)


def basis_derivative(
    bank: NeuronBank,
    gamma: float,
    points: Array,
    multi_index,
    activation: Activation = TANH,
    _cache: dict | None = None,
) -> Array:
    """(N, M+1) mixed partial derivative of every basis function.

    ``D^alpha tanh(gamma (a.x + r)) = gamma^|alpha| prod(a_i^alpha_i) tanh^(|alpha|)``.
    ``_cache`` may hold activation derivatives already computed for these points.
    """
    alpha = tuple(int(v) for v in multi_index)
    order = sum(alpha)
    if order > 2:
        raise ValueError("basis derivatives are available up to order 2")
    cache = {} if _cache is None else _cache
    if "s" not in cache:
        cache["s"] = _preactivation(bank, gamma, points)
        cache["t"] = activation.value(cache["s"])
    s, t = cache["s"], cache["t"]
    if order not in cache:
        cache[order] = t if order == 0 else (activation.d1(s, t) if order == 1 else activation.d2(s, t))
    sig = cache[order]
    out = np.empty((sig.shape[0], sig.shape[1] + 1))
    out[:, 0] = 1.0 if order == 0 else 0.0
    if order == 0:
        out[:, 1:] = sig
    else:
        w = gamma**order * np.prod(bank.directions ** np.array(alpha), axis=1)
        out[:, 1:] = sig * w
    return out


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

_BANK_MAGIC = b"MTNBANK1"


def write_bank(bank: NeuronBank, path) -> None:
    """Little-endian sidecar: magic, seed, stream, d, M, center, R, a (row-major), r."""
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<QQII", bank.seed % 2**64, bank.stream % 2**64, bank.dim, bank.M))
        fh.write(np.asarray(bank.ball.center, "<f8").tobytes())
        fh.write(struct.pack("<d", bank.ball.radius))
        fh.write(np.ascontiguousarray(bank.directions, "<f8").tobytes())
        fh.write(np.asarray(bank.offsets, "<f8").tobytes())


def read_bank(path) -> NeuronBank:
    with open(path, "rb") as fh:
        if fh.read(8) != _BANK_MAGIC:
            raise ValueError("not a neuron bank file")
        seed, stream, d, M = struct.unpack("<QQII", fh.read(24))
        center = np.frombuffer(fh.read(8 * d), "<f8").astype(float)
        (radius,) = struct.unpack("<d", fh.read(8))
        a = np.frombuffer(fh.read(8 * M * d), "<f8").reshape(M, d).astype(float)
        r = np.frombuffer(fh.read(8 * M), "<f8").astype(float)
    return NeuronBank(a, r, BallCover(center, radius), int(seed), int(stream))


def write_bank_csv(bank: NeuronBank, path) -> None:
    cols = [f"a{i}" for i in range(bank.dim)] + ["r"]
    data = np.column_stack([bank.directions, bank.offsets])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
