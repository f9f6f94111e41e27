"""Domains, level-set partitions and collocation/test point clouds.

Subdomains are described by level-set membership functions that are negative
strictly inside.  Boundaries and interfaces are described by parametrizations
that return points together with analytic unit normals.  Subdomain indices are
0-based throughout the package.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

Array = np.ndarray

#: membership values within this tolerance of zero count as "on the region"
CLASSIFY_TOL = 1e-12


class OutOfDomainError(ValueError):
    """Raised when a point lies outside every subdomain."""


class DegenerateSamplingError(RuntimeError):
    """Raised when rejection sampling cannot find enough in-domain points."""


@dataclass(frozen=True)
class BallCover:
    center: Array
    radius: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", center)
        if not self.radius > 0:
            raise ValueError(f"cover radius must be positive, got {self.radius}")

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass(frozen=True)
class LevelSetRegion:
    """A subdomain given by ``membership(x) < 0`` inside an axis-aligned box.

    ``membership`` maps an (N, d) array to an (N,) array.  The box only has to
    contain the region; benchmark regions share the domain box so that interior
    grids line up across subdomains.
    """

    membership: Callable[[Array], Array]
    bbox_lo: Array
    bbox_hi: Array
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bbox_lo", np.atleast_1d(np.asarray(self.bbox_lo, float)))
        object.__setattr__(self, "bbox_hi", np.atleast_1d(np.asarray(self.bbox_hi, float)))

    @property
    def dim(self) -> int:
        return self.bbox_lo.shape[0]

    def __call__(self, x: Array) -> Array:
        return np.asarray(self.membership(np.atleast_2d(x)), dtype=float)


@dataclass(frozen=True)
class ParamAxis:
    """One parameter direction of a parametrized boundary or interface.

    ``mode`` decides where ``n`` grid nodes go: ``closed`` includes both
    endpoints, ``periodic`` drops the upper endpoint, ``open`` uses cell
    centres (handy for inclination angles, where the poles would repeat).
    """

    lo: float
    hi: float
    mode: str = "closed"

    def nodes(self, n: int) -> Array:
        if n < 1:
            raise ValueError("parametric counts must be >= 1")
        if n == 1:
            return np.array([self.lo if self.mode != "open" else 0.5 * (self.lo + self.hi)])
        if self.mode == "closed":
            return np.linspace(self.lo, self.hi, n)
        if self.mode == "periodic":
            return self.lo + (self.hi - self.lo) * np.arange(n) / n
        if self.mode == "open":
            return self.lo + (self.hi - self.lo) * (np.arange(n) + 0.5) / n
        raise ValueError(f"unknown axis mode {self.mode!r}")


def _param_grid(axes: Sequence[ParamAxis], counts: Sequence[int]) -> Array:
    if len(counts) != len(axes):
        raise ValueError(f"expected {len(axes)} counts, got {len(counts)}")
    if not axes:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*[ax.nodes(int(c)) for ax, c in zip(axes, counts)], indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class InterfaceSpec:
    """Interface between subdomains ``pair[0]`` and ``pair[1]``.

    ``param`` maps an (N, p) parameter array to ``(points, normals)``; normals
    point from ``pair[0]`` into ``pair[1]``.
    """

    param: Callable[[Array], tuple[Array, Array]]
    axes: tuple[ParamAxis, ...]
    pair: tuple[int, int]
    name: str = ""


@dataclass(frozen=True)
class BoundaryFacet:
    """A piece of the outer boundary, owned by the subdomain it touches."""

    param: Callable[[Array], tuple[Array, Array]]
    axes: tuple[ParamAxis, ...]
    owner: int
    name: str = ""


@dataclass(frozen=True)
class DomainPartition:
    regions: tuple[LevelSetRegion, ...]
    interfaces: tuple[InterfaceSpec, ...] = ()
    boundary: tuple[BoundaryFacet, ...] = ()

    def __post_init__(self):
        if len(self.regions) < 1:
            raise ValueError("a partition needs at least one region")

    @property
    def K(self) -> int:
        return len(self.regions)

    @property
    def dim(self) -> int:
        return self.regions[0].dim

    @property
    def bbox(self) -> tuple[Array, Array]:
        lo = np.min([r.bbox_lo for r in self.regions], axis=0)
        hi = np.max([r.bbox_hi for r in self.regions], axis=0)
        return lo, hi

    def memberships(self, points: Array) -> Array:
        """(K, N) array of membership values."""
        points = np.atleast_2d(points)
        return np.stack([r(points) for r in self.regions])


@dataclass(frozen=True)
class PointCloud:
    """Collocation points of one role.

    ``labels`` holds the owning subdomain per point (for interfaces: the first
    subdomain of ``pair``).  ``normals`` is set exactly for interface clouds.
    """

    points: Array
    role: str
    labels: Array
    pair: tuple[int, int] | None = None
    normals: Array | None = None
    spacing: float | None = None

    def __post_init__(self):
        if self.role not in ("interior", "boundary", "interface"):
            raise ValueError(f"unknown role {self.role!r}")
        if (self.role == "interface") != (self.normals is not None):
            raise ValueError("normals must be present exactly for interface clouds")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def sample_interior(region: LevelSetRegion, spacing: float, label: int = 0) -> PointCloud:
    """Uniform grid of pitch ``spacing`` anchored at the box corner, strictly inside."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    lo, hi = region.bbox_lo, region.bbox_hi
    counts = np.floor((hi - lo) / spacing + 1e-9).astype(int) + 1
    axes = [lo[i] + spacing * np.arange(counts[i]) for i in range(lo.shape[0])]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    inside = region(grid) < 0
    pts = grid[inside]
    return PointCloud(pts, "interior", np.full(len(pts), label, dtype=int), spacing=spacing)


def sample_boundary(partition: DomainPartition, counts: Sequence) -> PointCloud:
    """Parametric grid on every boundary facet; ``counts[f]`` is per-facet.

    A single int (or tuple) is broadcast to all facets.
    """
    facets = partition.boundary
    if not facets:
        raise ValueError("partition has no outer boundary")
    if isinstance(counts, (int, np.integer)) or (
        len(counts) != len(facets) and all(isinstance(c, (int, np.integer)) for c in counts)
    ):
        counts = [counts] * len(facets)
    pts, owners = [], []
    for facet, c in zip(facets, counts):
        c = (c,) * len(facet.axes) if isinstance(c, (int, np.integer)) else tuple(c)
        if any(int(n) < 1 for n in c):
            raise ValueError("boundary counts must be >= 1")
        p, _ = facet.param(_param_grid(facet.axes, c))
        pts.append(np.atleast_2d(p))
        owners.append(np.full(len(pts[-1]), facet.owner, dtype=int))
    return PointCloud(np.concatenate(pts), "boundary", np.concatenate(owners))


def sample_interface(spec: InterfaceSpec, counts) -> PointCloud:
    """Uniform parametric grid on an interface, with normals attached."""
    if isinstance(counts, (int, np.integer)):
        counts = (counts,) * len(spec.axes)
    points, normals = spec.param(_param_grid(spec.axes, counts))
    points, normals = np.atleast_2d(points), np.atleast_2d(normals)
    labels = np.full(len(points), spec.pair[0], dtype=int)
    return PointCloud(points, "interface", labels, pair=spec.pair, normals=normals)


def classify_many(partition: DomainPartition, points: Array, strict: bool = True) -> Array:
    """Vectorized :func:`classify`; with ``strict=False`` outside points get -1."""
    m = partition.memberships(points)
    hit = m <= CLASSIFY_TOL
    labels = np.where(hit.any(axis=0), hit.argmax(axis=0), -1)
    if strict and (labels < 0).any():
        bad = np.atleast_2d(points)[labels < 0][0]
        raise OutOfDomainError(f"point {bad} lies outside every subdomain")
    return labels


def classify(partition: DomainPartition, point) -> int:
    """Index of the subdomain containing ``point``; ties go to the lower index."""
    return int(classify_many(partition, np.atleast_2d(np.asarray(point, float)))[0])


def latin_hypercube_test_points(
    partition: DomainPartition, n: int, seed: int, max_rounds: int = 1000
) -> tuple[Array, Array]:
    """``n`` Latin-hypercube points in the partition's box, rejected to the domain.

    Returns ``(points, labels)``.  Each round draws a fresh stratified batch of
    size ``n``; accepted points are kept in draw order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = partition.bbox
    sampler = qmc.LatinHypercube(d=partition.dim, rng=np.random.default_rng(seed))
    kept, labels = [], []
    total = 0
    for rnd in range(max_rounds):
        batch = qmc.scale(sampler.random(n), lo, hi)
        lab = classify_many(partition, batch, strict=False)
        ok = lab >= 0
        if rnd == 0 and ok.mean() < 1e-6:
            raise DegenerateSamplingError("domain occupies less than 1e-6 of its bounding box")
        kept.append(batch[ok])
        labels.append(lab[ok])
        total += int(ok.sum())
        if total >= n:
            return np.concatenate(kept)[:n], np.concatenate(labels)[:n]
    raise DegenerateSamplingError(f"only {total} of {n} points found after {max_rounds} rounds")


def write_cloud_csv(cloud: PointCloud, path) -> None:
    """Write ``x[,y[,z]],role,k[,nx,ny,nz]`` rows."""
    axes = "xyz"[: cloud.dim]
    header = list(axes) + ["role", "k"]
    if cloud.normals is not None:
        header += ["n" + a for a in axes]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, p in enumerate(cloud.points):
            k = f"{cloud.pair[0]}-{cloud.pair[1]}" if cloud.pair else str(int(cloud.labels[i]))
            row = [repr(float(v)) for v in p] + [cloud.role, k]
            if cloud.normals is not None:
                row += [repr(float(v)) for v in cloud.normals[i]]
            w.writerow(row)


# --------------------------------------------------------------------------
# Shape helpers used by the benchmark problems
# --------------------------------------------------------------------------


def box_membership(lo, hi) -> Callable[[Array], Array]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)

    def f(x):
        return np.max(np.maximum(lo - x, x - hi), axis=1)

    return f


def box_facets(lo, hi, owner: int = 0) -> tuple[BoundaryFacet, ...]:
    """Edges (2D), faces (3D) or end points (1D) of an axis-aligned box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    d = lo.shape[0]
    facets = []
    for axis in range(d):
        for side, val in ((-1, lo[axis]), (1, hi[axis])):
            free = [i for i in range(d) if i != axis]

            def param(t, axis=axis, val=val, free=free, side=side):
                t = np.atleast_2d(t)
                pts = np.empty((t.shape[0], d))
                pts[:, axis] = val
                for c, i in enumerate(free):
                    pts[:, i] = lo[i] + t[:, c] * (hi[i] - lo[i])
                nrm = np.zeros_like(pts)
                nrm[:, axis] = side
                return pts, nrm

            axes = tuple(ParamAxis(0.0, 1.0, "closed") for _ in free)
            facets.append(BoundaryFacet(param, axes, owner, name=f"x{axis}={val:g}"))
    return tuple(facets)


def sphere_param(center, radius, sign: float = 1.0):
    """Circle (2D) or sphere (3D) parametrization; sign=-1 flips the normals."""
    center = np.asarray(center, float)
    d = center.shape[0]

    if d == 2:
        def param(t):
            th = np.atleast_2d(t)[:, 0]
            n = np.stack([np.cos(th), np.sin(th)], axis=1)
            return center + radius * n, sign * n

        return param, (ParamAxis(0.0, 2 * np.pi, "periodic"),)

    def param(t):
        t = np.atleast_2d(t)
        az, inc = t[:, 0], t[:, 1]
        n = np.stack([np.sin(inc) * np.cos(az), np.sin(inc) * np.sin(az), np.cos(inc)], axis=1)
        return center + radius * n, sign * n

    return param, (ParamAxis(0.0, 2 * np.pi, "periodic"), ParamAxis(0.0, np.pi, "open"))
