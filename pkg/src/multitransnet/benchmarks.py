"""Benchmark interface problems with manufactured exact solutions.

Every problem stores its exact solution symbolically (sympy).  Right-hand
sides, boundary data and jump data are produced by applying the very same
:class:`~multitransnet.assembly.OperatorRowSpec` lists that build the
least-squares rows to the exact derivatives, so there is one source of truth
per problem and a sign error in a normal or a jump orientation cannot hide.

Problem ids: ``P1`` 1D two-phase diffusion, ``P2`` Poisson on a square,
``P3`` circular interface, ``P4`` two-phase Stokes, ``P5`` three nested
interfaces, ``P6`` 3D elasticity with an ellipsoid, ``P7`` 3D convoluted
interface in a spherical shell.  Subdomain indices are 0-based.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np
import sympy as sp

from .assembly import Condition, OperatorRowSpec, SolutionModel, Term, evaluate
from .geometry import (
    BallCover,
    BoundaryFacet,
    DomainPartition,
    InterfaceSpec,
    LevelSetRegion,
    ParamAxis,
    PointCloud,
    box_facets,
    box_membership,
    classify_many,
    latin_hypercube_test_points,
    sample_boundary,
    sample_interface,
    sample_interior,
    sphere_param,
)

Array = np.ndarray

PROBLEM_IDS = ("P1", "P2", "P3", "P4", "P5", "P6", "P7")


class UnknownProblemError(KeyError):
    pass


class MetricUndefinedError(ArithmeticError):
    pass


def multi_indices(d: int, max_order: int = 2) -> list[tuple[int, ...]]:
    out = []
    for order in range(max_order + 1):
        for combo in combinations_with_replacement(range(d), order):
            out.append(tuple(combo.count(i) for i in range(d)))
    return out


def _unit(d: int, *axes: int) -> tuple[int, ...]:
    out = [0] * d
    for a in axes:
        out[a] += 1
    return tuple(out)


class ExactSolution:
    """Piecewise symbolic solution; ``exprs[k][f]`` is field ``f`` on subdomain ``k``."""

    def __init__(self, exprs: Sequence[Sequence[sp.Expr]], symbols: Sequence[sp.Symbol]):
        self.exprs = [list(map(sp.sympify, row)) for row in exprs]
        self.symbols = tuple(symbols)
        self._fns: dict = {}

    @property
    def dim(self) -> int:
        return len(self.symbols)

    def _fn(self, k: int, f: int, alpha: tuple[int, ...]):
        key = (k, f, alpha)
        if key not in self._fns:
            e = self.exprs[k][f]
            for sym, n in zip(self.symbols, alpha):
                if n:
                    e = sp.diff(e, sym, n)
            self._fns[key] = sp.lambdify(self.symbols, e, "numpy")
        return self._fns[key]

    def derivative(self, k: int, f: int, alpha, x: Array) -> Array:
        x = np.atleast_2d(np.asarray(x, float))
        alpha = tuple(int(a) for a in alpha)
        val = self._fn(k, f, alpha)(*x.T)
        return np.broadcast_to(np.asarray(val, float), (x.shape[0],)).copy()


@dataclass(frozen=True)
class Sampling:
    spacing: float
    boundary_counts: object
    interface_counts: tuple


@dataclass(frozen=True)
class ConditionTemplate:
    tag: str
    kind: str
    equations: tuple[OperatorRowSpec, ...]
    source: tuple  # ("interior", k) | ("boundary",) | ("interface", i) | ("gauge",)


@dataclass
class BenchmarkProblem:
    id: str
    partition: DomainPartition
    fields: tuple[str, ...]
    templates: tuple[ConditionTemplate, ...]
    exact: ExactSolution
    coefficients: dict
    covers: tuple[BallCover, ...]
    sampling: Sampling
    single_cover: BallCover | None = None
    gauge_point: Array | None = None
    notes: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.partition.dim

    @property
    def K(self) -> int:
        return self.partition.K


@dataclass
class TrainingSet:
    interior: list[PointCloud]
    boundary: PointCloud
    interfaces: list[PointCloud]
    gauge: PointCloud | None = None

    @property
    def n_points(self) -> int:
        n = sum(len(c) for c in self.interior) + len(self.boundary) + sum(len(c) for c in self.interfaces)
        return n + (len(self.gauge) if self.gauge is not None else 0)

    @property
    def n_collocation(self) -> int:
        """Interior, boundary and interface points (gauge excluded)."""
        return self.n_points - (len(self.gauge) if self.gauge is not None else 0)


# --------------------------------------------------------------------------
# Operator builders
# --------------------------------------------------------------------------


def _const(values: Sequence[float], scale: float = 1.0) -> Callable:
    vals = tuple(float(v) for v in values)
    return lambda x, n, k: np.full(x.shape[0], scale * vals[k])


def _normal_times(values: Sequence[float], i: int, scale: float = 1.0) -> Callable:
    vals = tuple(float(v) for v in values)
    return lambda x, n, k: scale * vals[k] * n[:, i]


def value_row(fld: int, d: int, name: str = "") -> OperatorRowSpec:
    return OperatorRowSpec((Term(fld, (0,) * d, 1.0),), name)


def diffusion_rows(d: int, beta, grad_beta=None, sign: float = -1.0):
    """``sign * div(beta grad u)`` with ``beta`` a per-subdomain constant or callback."""
    terms = []
    for i in range(d):
        terms.append(Term(0, _unit(d, i, i), _scale_coef(beta, sign)))
        if grad_beta is not None:
            terms.append(Term(0, _unit(d, i), _scale_coef(grad_beta[i], sign)))
    return OperatorRowSpec(tuple(terms), "diffusion")


def flux_row(d: int, beta) -> OperatorRowSpec:
    """``beta grad u . n``."""
    terms = []
    for i in range(d):
        b = _scale_coef(beta, 1.0)
        terms.append(Term(0, _unit(d, i), lambda x, n, k, i=i, b=b: b(x, n, k) * n[:, i]))
    return OperatorRowSpec(tuple(terms), "flux")


def _scale_coef(c, s: float) -> Callable:
    if callable(c):
        return lambda x, n, k: s * np.asarray(c(x, n, k), float)
    return _const(c, s)


# --------------------------------------------------------------------------
# Geometry pieces
# --------------------------------------------------------------------------


def _point_facet(x0: float, normal: float, owner: int, name: str) -> BoundaryFacet:
    return BoundaryFacet(
        lambda t: (np.array([[x0]]), np.array([[normal]])), (), owner, name
    )


def _point_interface(x0: float, pair, name: str) -> InterfaceSpec:
    return InterfaceSpec(lambda t: (np.array([[x0]]), np.array([[1.0]])), (), tuple(pair), name)


def _sphere_facet(center, radius, owner, name) -> BoundaryFacet:
    param, axes = sphere_param(center, radius)
    return BoundaryFacet(param, axes, owner, name)


def _polar_theta(x: Array) -> Array:
    return np.arctan2(x[:, 1], x[:, 0])


def _flower_radius(th):
    return 0.5 - 0.1 * np.cos(5 * th)


def flower_interface() -> InterfaceSpec:
    """``r = 0.5 - 0.1 cos(5 theta)``; normals from the level set ``|x| - r(theta)``."""

    def param(t):
        th = np.atleast_2d(t)[:, 0]
        r = _flower_radius(th)
        dr = 0.5 * np.sin(5 * th)
        pts = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        # grad(|x| - r(theta)) = e_r - (r'/|x|) e_theta
        er = np.stack([np.cos(th), np.sin(th)], axis=1)
        et = np.stack([-np.sin(th), np.cos(th)], axis=1)
        g = er - (dr / r)[:, None] * et
        return pts, g / np.linalg.norm(g, axis=1, keepdims=True)

    return InterfaceSpec(param, (ParamAxis(0.0, 2 * np.pi, "periodic"),), (1, 2), "flower")


# P7 interface constants
P7_R0 = 0.483
P7_A = (0.1, -0.1, 0.15)
P7_N = (3, 4, 7)
P7_TH = (0.5, 1.8, 0.0)
P7_RIN, P7_ROUT = 0.151, 0.911


def _p7_levelset_sym():
    x, y, z = sp.symbols("x y z", real=True)
    rho2 = x**2 + y**2
    r = sp.sqrt(rho2 + z**2)
    az = sp.atan2(y, x)
    s = sum(a * sp.cos(n * (az - th)) for a, n, th in zip(P7_A, P7_N, P7_TH))
    phi = r - P7_R0 * (1 + (rho2 / (rho2 + z**2)) ** 2 * s)
    return (x, y, z), phi


def _p7_levelset():
    syms, phi = _p7_levelset_sym()
    f = sp.lambdify(syms, phi, "numpy")
    g = sp.lambdify(syms, [sp.diff(phi, s) for s in syms], "numpy")
    return (lambda X: f(*X.T)), (lambda X: np.stack(np.broadcast_arrays(*g(*X.T)), axis=1))


def p7_radius(az, inc):
    s = sum(a * np.cos(n * (az - th)) for a, n, th in zip(P7_A, P7_N, P7_TH))
    return P7_R0 * (1 + np.sin(inc) ** 4 * s)


# --------------------------------------------------------------------------
# Problem factory
# --------------------------------------------------------------------------


def _diffusion_templates(d, K, interfaces, beta, grad_beta=None, sign=-1.0):
    temps = []
    for k in range(K):
        temps.append(ConditionTemplate(f"interior[{k}]", "interior", (diffusion_rows(d, beta, grad_beta, sign),), ("interior", k)))
    temps.append(ConditionTemplate("boundary", "boundary", (value_row(0, d, "dirichlet"),), ("boundary",)))
    for i, spec in enumerate(interfaces):
        temps.append(ConditionTemplate(f"jump_value[{spec.name}]", "jump", (value_row(0, d, "jump"),), ("interface", i)))
        temps.append(ConditionTemplate(f"jump_flux[{spec.name}]", "jump", (flux_row(d, beta),), ("interface", i)))
    return tuple(temps)


def _check_positive(vals, what):
    vals = tuple(float(v) for v in vals)
    if any(not (v > 0 and math.isfinite(v)) for v in vals):
        raise ValueError(f"{what} must be positive, got {vals}")
    return vals


P2_SETTINGS = {
    "I": ((0.0, 0.0), 2.5),
    "II": ((0.0, 0.0), 3.0),
    "III": ((1.0, 1.0), 1.0),
    "IV": ((1.0, 1.0), 1.5),
}


def make_problem(pid: str, contrast: Sequence[float] | None = None, **options) -> BenchmarkProblem:
    """Build benchmark ``pid`` with its default covers and sampling.

    ``contrast`` is the tuple of material coefficients: ``beta`` for the
    diffusion problems, ``mu`` for Stokes and ``lambda = mu`` for elasticity.
    For ``P7`` the default (``None``) is the spatially varying coefficient;
    a 2-tuple selects piecewise constants.  ``P2`` takes ``setting`` in I..IV.
    """
    pid = pid.upper()
    builders = {"P1": _p1, "P2": _p2, "P3": _p3, "P4": _p4, "P5": _p5, "P6": _p6, "P7": _p7}
    if pid not in builders:
        raise UnknownProblemError(f"unknown problem id {pid!r}; expected one of {PROBLEM_IDS}")
    return builders[pid](contrast, **options)


def _p1(contrast, **_):
    beta = _check_positive(contrast or (1.0, 10.0), "beta")
    x = sp.Symbol("x", real=True)
    syms = (x,)
    exact = ExactSolution([[sp.sin(2 * sp.pi * x)], [sp.cos(2 * sp.pi * x)]], syms)
    regions = (
        LevelSetRegion(lambda X: np.maximum(-X[:, 0], X[:, 0] - 0.25), [0.0], [1.0], "left"),
        LevelSetRegion(lambda X: np.maximum(0.25 - X[:, 0], X[:, 0] - 1.0), [0.0], [1.0], "right"),
    )
    gamma = (_point_interface(0.25, (0, 1), "x=0.25"),)
    bnd = (_point_facet(0.0, -1.0, 0, "x=0"), _point_facet(1.0, 1.0, 1, "x=1"))
    part = DomainPartition(regions, gamma, bnd)
    return BenchmarkProblem(
        "P1", part, ("u",), _diffusion_templates(1, 2, gamma, beta), exact, {"beta": beta},
        (BallCover([0.125], 0.15), BallCover([0.625], 0.45)),
        Sampling(0.01, 1, (1,)),
        single_cover=BallCover([0.5], 0.6),
    )


def _p2(contrast, setting: str = "IV", **_):
    x, y = syms = sp.symbols("x y", real=True)
    exact = ExactSolution([[sp.sin(x) * sp.sin(y)]], syms)
    lo, hi = np.zeros(2), np.full(2, 2.0)
    part = DomainPartition((LevelSetRegion(box_membership(lo, hi), lo, hi, "square"),), (), box_facets(lo, hi, 0))
    center, R = P2_SETTINGS[str(setting).upper()]
    temps = _diffusion_templates(2, 1, (), (1.0,), sign=1.0)
    return BenchmarkProblem(
        "P2", part, ("u",), temps, exact, {"setting": str(setting).upper()},
        (BallCover(center, R),), Sampling(0.04, 51, ()),
    )


def _p3(contrast, **_):
    beta = _check_positive(contrast or (1.0, 10.0), "beta")
    x, y = syms = sp.symbols("x y", real=True)
    exact = ExactSolution([[sp.sin(x) * sp.sin(y)], [sp.cos(x) * sp.cos(y)]], syms)
    lo, hi = np.zeros(2), np.full(2, 2.0)
    c = np.array([1.0, 1.0])
    r2 = 0.5
    box = box_membership(lo, hi)
    regions = (
        LevelSetRegion(lambda X: np.sum((X - c) ** 2, axis=1) - r2, lo, hi, "disk"),
        LevelSetRegion(lambda X: np.maximum(box(X), r2 - np.sum((X - c) ** 2, axis=1)), lo, hi, "outside"),
    )
    param, axes = sphere_param(c, math.sqrt(r2))
    gamma = (InterfaceSpec(param, axes, (0, 1), "circle"),)
    part = DomainPartition(regions, gamma, box_facets(lo, hi, 1))
    return BenchmarkProblem(
        "P3", part, ("u",), _diffusion_templates(2, 2, gamma, beta), exact, {"beta": beta},
        (BallCover(c, 1.0), BallCover(c, 1.5)), Sampling(0.04, 51, (120,)),
        single_cover=BallCover(c, 1.5),
    )


def _p4(contrast, gauge: bool = True, **_):
    mu = _check_positive(contrast or (1.0, 10.0), "mu")
    x, y = syms = sp.symbols("x y", real=True)
    r = sp.sqrt(x**2 + y**2)
    exact = ExactSolution(
        [
            [y / 4 * (x**2 + y**2), -x * y**2 / 4, sp.Float(5.0)],
            [y / r - 3 * y / 4, -x / r + x / 4 * (3 + x**2), (-sp.Rational(3, 4) * x**3 + sp.Rational(3, 8) * x) * y],
        ],
        syms,
    )
    lo, hi = np.full(2, -2.0), np.full(2, 2.0)
    box = box_membership(lo, hi)
    regions = (
        LevelSetRegion(lambda X: np.sum(X**2, axis=1) - 1.0, lo, hi, "disk"),
        LevelSetRegion(lambda X: np.maximum(box(X), 1.0 - np.sum(X**2, axis=1)), lo, hi, "outside"),
    )
    param, axes = sphere_param([0.0, 0.0], 1.0)
    gamma = (InterfaceSpec(param, axes, (0, 1), "circle"),)
    part = DomainPartition(regions, gamma, box_facets(lo, hi, 1))
    d = 2
    neg_mu = _const(mu, -1.0)
    momentum = (
        OperatorRowSpec((Term(0, (2, 0), neg_mu), Term(0, (0, 2), neg_mu), Term(2, (1, 0), 1.0)), "momentum_x"),
        OperatorRowSpec((Term(1, (2, 0), neg_mu), Term(1, (0, 2), neg_mu), Term(2, (0, 1), 1.0)), "momentum_y"),
    )
    divergence = (OperatorRowSpec((Term(0, (1, 0), 1.0), Term(1, (0, 1), 1.0)), "divergence"),)
    stress = (
        OperatorRowSpec(
            (
                Term(2, (0, 0), lambda X, n, k: -n[:, 0]),
                Term(0, (1, 0), _normal_times(mu, 0, 2.0)),
                Term(0, (0, 1), _normal_times(mu, 1)),
                Term(1, (1, 0), _normal_times(mu, 1)),
            ),
            "traction_x",
        ),
        OperatorRowSpec(
            (
                Term(2, (0, 0), lambda X, n, k: -n[:, 1]),
                Term(0, (0, 1), _normal_times(mu, 0)),
                Term(1, (1, 0), _normal_times(mu, 0)),
                Term(1, (0, 1), _normal_times(mu, 1, 2.0)),
            ),
            "traction_y",
        ),
    )
    temps = []
    for k in range(2):
        temps.append(ConditionTemplate(f"interior[{k}]", "interior", momentum, ("interior", k)))
        temps.append(ConditionTemplate(f"divergence[{k}]", "interior", divergence, ("interior", k)))
    temps.append(ConditionTemplate("boundary", "boundary", (value_row(0, d), value_row(1, d)), ("boundary",)))
    temps.append(ConditionTemplate("jump_value[circle]", "jump", (value_row(0, d), value_row(1, d)), ("interface", 0)))
    temps.append(ConditionTemplate("jump_flux[circle]", "jump", stress, ("interface", 0)))
    if gauge:
        temps.append(ConditionTemplate("gauge", "gauge", (value_row(2, d, "pressure"),), ("gauge",)))
    return BenchmarkProblem(
        "P4", part, ("u", "v", "p"), tuple(temps), exact, {"mu": mu},
        (BallCover([0.0, 0.0], 1.25), BallCover([0.0, 0.0], 3.0)),
        Sampling(4.0 / 150.0, 301, (1000,)),
        gauge_point=np.array([[0.0, 0.0]]) if gauge else None,
    )


def _p5(contrast, **_):
    beta = _check_positive(contrast or (1.0, 10.0, 100.0, 1000.0), "beta")
    if len(beta) != 4:
        raise ValueError("P5 needs four diffusion coefficients")
    x, y = syms = sp.symbols("x y", real=True)
    exact = ExactSolution(
        [[sp.cos(y) + 1.8], [sp.exp(x) + 1.3], [sp.sin(x) + 0.5], [-x + sp.log(y + 2)]], syms
    )
    lo, hi = np.full(2, -1.0), np.full(2, 1.0)
    box = box_membership(lo, hi)
    rad = lambda X: np.sqrt(np.sum(X**2, axis=1))  # noqa: E731
    flower = lambda X: _flower_radius(_polar_theta(X))  # noqa: E731
    regions = (
        LevelSetRegion(lambda X: rad(X) - 0.2, lo, hi, "inner"),
        LevelSetRegion(lambda X: np.maximum(0.2 - rad(X), rad(X) - flower(X)), lo, hi, "petal"),
        LevelSetRegion(lambda X: np.maximum(flower(X) - rad(X), rad(X) - 0.8), lo, hi, "ring"),
        LevelSetRegion(lambda X: np.maximum(box(X), 0.8 - rad(X)), lo, hi, "outer"),
    )
    p1, a1 = sphere_param([0.0, 0.0], 0.2)
    p3, a3 = sphere_param([0.0, 0.0], 0.8)
    gammas = (
        InterfaceSpec(p1, a1, (0, 1), "r=0.2"),
        flower_interface(),
        InterfaceSpec(p3, a3, (2, 3), "r=0.8"),
    )
    part = DomainPartition(regions, gammas, box_facets(lo, hi, 3))
    covers = tuple(BallCover([0.0, 0.0], r) for r in (0.35, 0.75, 1.0, 1.6))
    return BenchmarkProblem(
        "P5", part, ("u",), _diffusion_templates(2, 4, gammas, beta), exact, {"beta": beta},
        covers, Sampling(2.0 / 56.0, 125, (500, 500, 500)),
    )


P6_AXES = (0.15, 0.2, 0.25)


def _p6(contrast, lam=None, mu=None, **_):
    c = _check_positive(contrast or (1.0, 10.0), "contrast")
    lam = _check_positive(lam if lam is not None else c, "lambda")
    mu = _check_positive(mu if mu is not None else c, "mu")
    x, y, z = syms = sp.symbols("x y z", real=True)
    pi = sp.pi
    exact = ExactSolution(
        [
            [
                -sp.cos(x**2) * sp.exp(-(y**2)) * sp.sin(2 * pi * z),
                -sp.cos(y**2) * sp.exp(-(x**2)) * sp.sin(2 * pi * z),
                sp.cos(y**2) * sp.exp(-(z**2)) * sp.sin(2 * pi * x),
            ],
            [
                -sp.sin(x**2) * sp.exp(y**2) * sp.cos(2 * pi * z),
                -sp.sin(y**2) * sp.exp(x**2) * sp.cos(2 * pi * z),
                sp.sin(y**2) * sp.exp(z**2) * sp.cos(2 * pi * x),
            ],
        ],
        syms,
    )
    lo, hi = np.zeros(3), np.ones(3)
    ctr = np.full(3, 0.5)
    ax = np.array(P6_AXES)
    box = box_membership(lo, hi)
    ell = lambda X: np.sum(((X - ctr) / ax) ** 2, axis=1) - 1.0  # noqa: E731
    regions = (
        LevelSetRegion(ell, lo, hi, "ellipsoid"),
        LevelSetRegion(lambda X: np.maximum(box(X), -ell(X)), lo, hi, "outside"),
    )

    def param(t):
        t = np.atleast_2d(t)
        az, inc = t[:, 0], t[:, 1]
        u = np.stack([np.sin(inc) * np.cos(az), np.sin(inc) * np.sin(az), np.cos(inc)], axis=1)
        g = u / ax
        return ctr + ax * u, g / np.linalg.norm(g, axis=1, keepdims=True)

    gamma = (InterfaceSpec(param, (ParamAxis(0.0, 2 * np.pi, "periodic"), ParamAxis(0.0, np.pi, "open")), (0, 1), "ellipsoid"),)
    part = DomainPartition(regions, gamma, box_facets(lo, hi, 1))
    d = 3
    interior, traction = [], []
    for i in range(d):
        terms = [Term(i, _unit(d, j, j), _const(mu, -1.0)) for j in range(d)]
        terms += [Term(j, _unit(d, i, j), lambda X, n, k: -np.full(X.shape[0], lam[k] + mu[k])) for j in range(d)]
        interior.append(OperatorRowSpec(tuple(terms), f"navier_{i}"))
        tt = [Term(j, _unit(d, j), _normal_times(lam, i)) for j in range(d)]
        tt += [Term(i, _unit(d, j), _normal_times(mu, j)) for j in range(d)]
        tt += [Term(j, _unit(d, i), _normal_times(mu, j)) for j in range(d)]
        traction.append(OperatorRowSpec(tuple(tt), f"traction_{i}"))
    values = tuple(value_row(i, d) for i in range(d))
    temps = [ConditionTemplate(f"interior[{k}]", "interior", tuple(interior), ("interior", k)) for k in range(2)]
    temps.append(ConditionTemplate("boundary", "boundary", values, ("boundary",)))
    temps.append(ConditionTemplate("jump_value[ellipsoid]", "jump", values, ("interface", 0)))
    temps.append(ConditionTemplate("jump_flux[ellipsoid]", "jump", tuple(traction), ("interface", 0)))
    return BenchmarkProblem(
        "P6", part, ("u", "v", "w"), tuple(temps), exact, {"lambda": lam, "mu": mu},
        (BallCover(ctr, 0.35), BallCover(ctr, 1.0)),
        Sampling(1.0 / 30.0, 31, ((60, 30),)),
    )


P7_SPACING = 0.064


def _p7(contrast, **_):
    x, y, z = syms = sp.symbols("x y z", real=True)
    t = (y - x) / 3
    exact = ExactSolution(
        [
            [sp.sin(2 * x) * sp.cos(2 * y) * sp.exp(z)],
            [(16 * t**5 - 20 * t**3 + 5 * t) * sp.log(x + y + 3) * sp.cos(z)],
        ],
        syms,
    )
    if contrast is None:
        b1 = 10 * (1 + sp.Rational(1, 5) * sp.cos(2 * sp.pi * (x + y)) * sp.sin(2 * sp.pi * (x - y)) * sp.cos(z))
        bexprs = [b1, sp.Integer(1)]
        bval = [sp.lambdify(syms, b, "numpy") for b in bexprs]
        bgrad = [[sp.lambdify(syms, sp.diff(b, s), "numpy") for s in syms] for b in bexprs]

        def beta(X, n, k):
            return np.broadcast_to(np.asarray(bval[k](*X.T), float), (X.shape[0],))

        grad_beta = [
            (lambda X, n, k, i=i: np.broadcast_to(np.asarray(bgrad[k][i](*X.T), float), (X.shape[0],)))
            for i in range(3)
        ]
        coeffs = {"beta": "varying"}
    else:
        beta = _check_positive(contrast, "beta")
        grad_beta = None
        coeffs = {"beta": beta}
    lset, lgrad = _p7_levelset()
    rad = lambda X: np.sqrt(np.sum(X**2, axis=1))  # noqa: E731
    lo, hi = np.full(3, -P7_ROUT), np.full(3, P7_ROUT)
    regions = (
        LevelSetRegion(lambda X: np.maximum(P7_RIN - rad(X), lset(X)), lo, hi, "inside"),
        LevelSetRegion(lambda X: np.maximum(-lset(X), rad(X) - P7_ROUT), lo, hi, "outside"),
    )

    def param(tt):
        tt = np.atleast_2d(tt)
        az, inc = tt[:, 0], tt[:, 1]
        u = np.stack([np.sin(inc) * np.cos(az), np.sin(inc) * np.sin(az), np.cos(inc)], axis=1)
        pts = p7_radius(az, inc)[:, None] * u
        g = lgrad(pts)
        return pts, g / np.linalg.norm(g, axis=1, keepdims=True)

    gamma = (InterfaceSpec(param, (ParamAxis(0.0, 2 * np.pi, "periodic"), ParamAxis(0.0, np.pi, "open")), (0, 1), "convoluted"),)
    bnd = (
        _sphere_facet([0.0, 0.0, 0.0], P7_RIN, 0, "inner sphere"),
        _sphere_facet([0.0, 0.0, 0.0], P7_ROUT, 1, "outer sphere"),
    )
    part = DomainPartition(regions, gamma, bnd)
    return BenchmarkProblem(
        "P7", part, ("u",), _diffusion_templates(3, 2, gamma, beta, grad_beta), exact, coeffs,
        (BallCover(np.zeros(3), 0.75), BallCover(np.zeros(3), 1.0)),
        Sampling(P7_SPACING, ((20, 10), (60, 30)), ((30, 25),)),
    )


# --------------------------------------------------------------------------
# Sampling, data and exact values
# --------------------------------------------------------------------------


def training_set(
    problem: BenchmarkProblem,
    spacing: float | None = None,
    boundary_counts=None,
    interface_counts=None,
) -> TrainingSet:
    s = problem.sampling
    spacing = s.spacing if spacing is None else spacing
    bc = s.boundary_counts if boundary_counts is None else boundary_counts
    ic = s.interface_counts if interface_counts is None else interface_counts
    if isinstance(ic, (int, np.integer)):
        ic = (ic,) * len(problem.partition.interfaces)
    interior = [sample_interior(r, spacing, label=k) for k, r in enumerate(problem.partition.regions)]
    boundary = sample_boundary(problem.partition, bc)
    interfaces = [sample_interface(spec, c) for spec, c in zip(problem.partition.interfaces, ic)]
    gauge = None
    if problem.gauge_point is not None:
        pts = np.atleast_2d(problem.gauge_point)
        gauge = PointCloud(pts, "interior", classify_many(problem.partition, pts))
    return TrainingSet(interior, boundary, interfaces, gauge)


def _apply_exact(problem: BenchmarkProblem, eq: OperatorRowSpec, x, normals, k) -> Array:
    return eq.apply(lambda f, a: problem.exact.derivative(k, f, a, x), x, normals, k)


def condition_data(problem: BenchmarkProblem, template: ConditionTemplate, cloud: PointCloud) -> Array:
    """(N, n_eq) data obtained by applying the template's operators to the exact solution."""
    out = np.zeros((len(cloud), len(template.equations)))
    x, nrm = cloud.points, cloud.normals
    for e, eq in enumerate(template.equations):
        if template.kind == "jump":
            i, j = cloud.pair
            out[:, e] = _apply_exact(problem, eq, x, nrm, i) - _apply_exact(problem, eq, x, nrm, j)
        else:
            for k in np.unique(cloud.labels):
                idx = cloud.labels == k
                out[idx, e] = _apply_exact(problem, eq, x[idx], None if nrm is None else nrm[idx], int(k))
    return out


def build_conditions(problem: BenchmarkProblem, training: TrainingSet) -> list[Condition]:
    conds = []
    for t in problem.templates:
        kind = t.source[0]
        if kind == "interior":
            cloud = training.interior[t.source[1]]
        elif kind == "boundary":
            cloud = training.boundary
        elif kind == "interface":
            cloud = training.interfaces[t.source[1]]
        elif kind == "gauge":
            cloud = training.gauge
        else:  # pragma: no cover
            raise ValueError(kind)
        if cloud is None or len(cloud) == 0:
            continue
        conds.append(Condition(t.tag, t.kind, t.equations, cloud, condition_data(problem, t, cloud)))
    return conds


def exact_values(problem: BenchmarkProblem, points: Array, labels: Array | None = None, gradients: bool = False):
    """Piecewise exact fields ``(N, F)`` and optionally gradients ``(N, F, d)``."""
    points = np.atleast_2d(np.asarray(points, float))
    if labels is None:
        labels = classify_many(problem.partition, points)
    labels = np.asarray(labels, int)
    N, d = points.shape
    F = len(problem.fields)
    vals = np.zeros((N, F))
    grads = np.zeros((N, F, d)) if gradients else None
    for k in np.unique(labels):
        idx = labels == k
        for f in range(F):
            vals[idx, f] = problem.exact.derivative(int(k), f, (0,) * d, points[idx])
            if gradients:
                for i in range(d):
                    grads[idx, f, i] = problem.exact.derivative(int(k), f, _unit(d, i), points[idx])
    return (vals, grads) if gradients else vals


def test_points(problem: BenchmarkProblem, seed: int, n: int | None = None, training: TrainingSet | None = None):
    """Latin-hypercube test points; by default ``2^d`` times the training count."""
    if n is None:
        training = training or training_set(problem)
        n = 2**problem.dim * training.n_collocation
    return latin_hypercube_test_points(problem.partition, n, seed)


test_points.__test__ = False  # not a pytest test


# --------------------------------------------------------------------------
# Error metrics and reports
# --------------------------------------------------------------------------


def relative_errors(approx: Array, exact: Array) -> tuple[float, float]:
    approx, exact = np.asarray(approx, float).ravel(), np.asarray(exact, float).ravel()
    n2, ninf = np.linalg.norm(exact), np.max(np.abs(exact)) if exact.size else 0.0
    if not (n2 > 0 and ninf > 0):
        raise MetricUndefinedError("exact solution has zero norm; relative error undefined")
    diff = approx - exact
    return float(np.linalg.norm(diff) / n2), float(np.max(np.abs(diff)) / ninf)


@dataclass
class ErrorReport:
    problem: str
    fields: tuple[str, ...]
    rl2: dict
    rlinf: dict
    rl2_grad: float | None = None
    rlinf_grad: float | None = None
    rl2_grad_fields: dict = field(default_factory=dict)
    M: int | None = None
    contrast: tuple | None = None
    seed: int | None = None
    seed_policy: str = "fixed"
    strategy: str = ""
    weight_mode: str = ""
    timings: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def assembly_s(self) -> float:
        return float(self.timings.get("assembly_s", float("nan")))

    @property
    def solve_s(self) -> float:
        return float(self.timings.get("solve_s", float("nan")))

    def to_dict(self, timings: bool = True) -> dict:
        out = {
            "problem": self.problem,
            "fields": list(self.fields),
            "rl2": self.rl2,
            "rlinf": self.rlinf,
            "rl2_grad": self.rl2_grad,
            "rlinf_grad": self.rlinf_grad,
            "rl2_grad_fields": self.rl2_grad_fields,
            "M": self.M,
            "contrast": list(self.contrast) if self.contrast is not None else None,
            "seed": self.seed,
            "seed_policy": self.seed_policy,
            "strategy": self.strategy,
            "weight_mode": self.weight_mode,
            "details": self.details,
        }
        if timings:
            out["timings"] = self.timings
        return out

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(_jsonable(self.to_dict(timings)), indent=2, sort_keys=True)

    def csv_columns(self) -> list[str]:
        return csv_columns(self.fields)

    def csv_row(self) -> dict:
        row = {
            "problem": self.problem,
            "M": self.M,
            "contrast": _contrast_str(self.contrast),
            "seed_policy": self.seed_policy,
            "strategy": self.strategy,
            "weight_mode": self.weight_mode,
            "rl2_grad": self.rl2_grad,
            "assembly_s": self.timings.get("assembly_s"),
            "solve_s": self.timings.get("solve_s"),
        }
        for f in self.fields:
            row[f"rl2_{f}"] = self.rl2[f]
            row[f"rlinf_{f}"] = self.rlinf[f]
        return {c: row[c] for c in self.csv_columns()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.csv_columns())
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


def csv_columns(fields: Sequence[str]) -> list[str]:
    cols = ["problem", "M", "contrast", "seed_policy", "strategy", "weight_mode"]
    cols += [f"rl2_{f}" for f in fields] + [f"rlinf_{f}" for f in fields]
    return cols + ["rl2_grad", "assembly_s", "solve_s"]


def _contrast_str(c) -> str:
    if c is None:
        return ""
    if isinstance(c, str):
        return c
    return ";".join(f"{float(v):g}" for v in c)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def error_metrics(
    model: SolutionModel,
    problem: BenchmarkProblem,
    points: Array,
    labels: Array | None = None,
    gradients: bool = True,
) -> ErrorReport:
    """RL2 and RLinf per field, plus gradient errors over all fields."""
    if labels is None:
        labels = classify_many(problem.partition, points)
    if gradients:
        uh, gh = evaluate(model, points, labels, gradients=True)
        ue, ge = exact_values(problem, points, labels, gradients=True)
    else:
        uh = evaluate(model, points, labels)
        ue = exact_values(problem, points, labels)
    rl2, rlinf, rl2g = {}, {}, {}
    for f, name in enumerate(problem.fields):
        rl2[name], rlinf[name] = relative_errors(uh[:, f], ue[:, f])
        if gradients:
            rl2g[name] = relative_errors(gh[:, f], ge[:, f])[0]
    rep = ErrorReport(problem.id, problem.fields, rl2, rlinf, rl2_grad_fields=rl2g)
    if gradients:
        rep.rl2_grad, rep.rlinf_grad = _grad_errors(gh, ge)
    return rep


def _grad_errors(gh: Array, ge: Array) -> tuple[float, float]:
    """Relative errors of the gradient field, using the pointwise Euclidean norm."""
    diff = np.linalg.norm((gh - ge).reshape(gh.shape[0], -1), axis=1)
    ref = np.linalg.norm(ge.reshape(ge.shape[0], -1), axis=1)
    if not (np.linalg.norm(ref) > 0):
        raise MetricUndefinedError("exact gradient has zero norm")
    return float(np.linalg.norm(diff) / np.linalg.norm(ref)), float(diff.max() / ref.max())
