"""Block least-squares assembly, normalization weights and the dense solve.

A problem is handed to this module as a list of :class:`Condition` objects.
Each condition couples a point cloud with one or more scalar equations
(:class:`OperatorRowSpec`) and the manufactured right-hand side at those
points.  Interior, boundary and gauge conditions bind the network of the
subdomain owning each point; jump conditions on an interface ``(i, j)`` put
``+op(phi_i)`` into the columns of ``i`` and ``-op(phi_j)`` into those of ``j``.

Columns are ordered network-major, then field, each block of width ``M_k + 1``
(constant column first).
"""

from __future__ import annotations

import enum
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.linalg
import scipy.linalg.lapack

from .geometry import DomainPartition, PointCloud, classify_many
from .neuronbank import NeuronBank, basis_derivative

Array = np.ndarray

DEFAULT_MEMORY_BUDGET = 512 * 2**20


class AssemblyError(ValueError):
    pass


class WeightUndefinedError(ArithmeticError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values reached the least-squares solver."""


@dataclass(frozen=True)
class Term:
    """``coef(x, normals, k) * D^deriv u_field``; ``coef`` may be a plain number."""

    field: int
    deriv: tuple[int, ...]
    coef: float | Callable = 1.0

    def __post_init__(self):
        if sum(self.deriv) > 2:
            raise AssemblyError("derivatives above order 2 are not supported")

    def weight(self, x: Array, normals: Array | None, k: int) -> Array:
        if callable(self.coef):
            return np.broadcast_to(np.asarray(self.coef(x, normals, k), float), (x.shape[0],))
        return np.full(x.shape[0], float(self.coef))


@dataclass(frozen=True)
class OperatorRowSpec:
    """One scalar equation as a sum of terms."""

    terms: tuple[Term, ...]
    name: str = ""

    def apply(self, derivs: Callable[[int, tuple], Array], x, normals, k) -> Array:
        """Apply the operator given ``derivs(field, multi_index) -> (N, ...)``."""
        out = None
        for t in self.terms:
            w = t.weight(x, normals, k)
            d = derivs(t.field, t.deriv)
            v = w.reshape((-1,) + (1,) * (d.ndim - 1)) * d
            out = v if out is None else out + v
        return out


@dataclass
class Condition:
    tag: str
    kind: str  # interior | boundary | gauge | jump
    equations: tuple[OperatorRowSpec, ...]
    cloud: PointCloud
    target: Array  # (N, n_eq)

    def __post_init__(self):
        if self.kind not in ("interior", "boundary", "gauge", "jump"):
            raise AssemblyError(f"unknown condition kind {self.kind!r}")
        if self.kind == "jump" and self.cloud.pair is None:
            raise AssemblyError("jump conditions need an interface cloud")
        self.target = np.asarray(self.target, float).reshape(len(self.cloud), len(self.equations))

    @property
    def n_rows(self) -> int:
        return len(self.cloud) * len(self.equations)


@dataclass(frozen=True)
class ModelLayout:
    """Networks, their banks and the map from subdomains to networks.

    With one network per subdomain this is a Multi-TransNet; mapping every
    subdomain to network 0 gives a single TransNet over the whole domain.
    """

    partition: DomainPartition
    banks: tuple[NeuronBank, ...]
    net_of: tuple[int, ...]
    fields: tuple[str, ...] = ("u",)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    def width(self, net: int) -> int:
        return self.n_fields * (self.banks[net].M + 1)

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for net in range(len(self.banks)):
            out.append(acc)
            acc += self.width(net)
        return tuple(out)

    @property
    def n_cols(self) -> int:
        return sum(self.width(n) for n in range(len(self.banks)))

    def cols(self, net: int, fld: int) -> slice:
        start = self.offsets[net] + fld * (self.banks[net].M + 1)
        return slice(start, start + self.banks[net].M + 1)


class WeightMode(str, enum.Enum):
    ONES = "ones"
    MATRIX_ONLY = "matrix_only"
    AUGMENTED = "augmented"


@dataclass
class EquationBlock:
    """Rows of one condition restricted to the networks it touches.

    ``rows`` has the columns of ``nets`` concatenated in order; use
    :meth:`dense` for the full-width matrix.
    """

    tag: str
    rows: Array
    target: Array
    nets: tuple[int, ...]
    layout: ModelLayout

    @property
    def column_index(self) -> Array:
        return np.concatenate(
            [np.arange(self.layout.offsets[n], self.layout.offsets[n] + self.layout.width(n)) for n in self.nets]
        )

    def dense(self) -> Array:
        out = np.zeros((self.rows.shape[0], self.layout.n_cols))
        out[:, self.column_index] = self.rows
        return out


@dataclass
class AssembledSystem:
    F: Array
    T: Array
    weights: list[float]
    block_index: list[tuple[str, int, int]]
    layout: ModelLayout
    gammas: tuple[float, ...]


@dataclass(frozen=True)
class SolutionModel:
    layout: ModelLayout
    gammas: tuple[float, ...]
    alpha: Array
    residual2: float = float("nan")
    rank: int | None = None

    def coefficients(self, net: int, fld: int = 0) -> Array:
        return self.alpha[self.layout.cols(net, fld)]


# --------------------------------------------------------------------------
# Row construction
# --------------------------------------------------------------------------


def _nets_of(cond: Condition, layout: ModelLayout) -> tuple[int, ...]:
    if cond.kind == "jump":
        i, j = cond.cloud.pair
        return tuple(sorted({layout.net_of[i], layout.net_of[j]}))
    return tuple(sorted({layout.net_of[int(k)] for k in np.unique(cond.cloud.labels)}))


def _operator_rows(layout, gammas, eqs, x, normals, k) -> Array:
    """(n_eq, N, width(net)) rows of the equations applied to subdomain k's network."""
    net = layout.net_of[k]
    bank = layout.banks[net]
    m1 = bank.M + 1
    cache: dict = {}
    memo: dict = {}
    rows = np.zeros((len(eqs), x.shape[0], layout.n_fields * m1))
    for e, eq in enumerate(eqs):
        for t in eq.terms:
            d = memo.get(t.deriv)
            if d is None:
                memo[t.deriv] = d = basis_derivative(bank, gammas[net], x, t.deriv, _cache=cache)
            rows[e][:, t.field * m1 : (t.field + 1) * m1] += t.weight(x, normals, k)[:, None] * d
    return rows


def block_chunks(
    cond: Condition, layout: ModelLayout, gammas, chunk_points: int | None = None
) -> Iterator[tuple[Array, Array]]:
    """Yield ``(rows, target)`` pieces of a condition's block, point chunk by chunk.

    Within a chunk rows are ordered equation-major.
    """
    nets = _nets_of(cond, layout)
    local_off = {}
    acc = 0
    for n in nets:
        local_off[n] = acc
        acc += layout.width(n)
    width = acc
    N = len(cond.cloud)
    neq = len(cond.equations)
    step = N if not chunk_points else max(1, int(chunk_points))
    for s in range(0, N, step):
        sl = slice(s, min(N, s + step))
        x = cond.cloud.points[sl]
        nrm = cond.cloud.normals[sl] if cond.cloud.normals is not None else None
        n = x.shape[0]
        rows = np.zeros((neq, n, width))
        if cond.kind == "jump":
            i, j = cond.cloud.pair
            for k, sign in ((i, 1.0), (j, -1.0)):
                net = layout.net_of[k]
                o = local_off[net]
                rows[:, :, o : o + layout.width(net)] += sign * _operator_rows(
                    layout, gammas, cond.equations, x, nrm, k
                )
        else:
            labels = cond.cloud.labels[sl]
            for k in np.unique(labels):
                idx = np.flatnonzero(labels == k)
                net = layout.net_of[int(k)]
                o = local_off[net]
                sub = _operator_rows(layout, gammas, cond.equations, x[idx], None if nrm is None else nrm[idx], int(k))
                rows[:, idx, o : o + layout.width(net)] = sub
        yield rows.reshape(neq * n, width), cond.target[sl].T.reshape(-1)


def build_block(cond: Condition, layout: ModelLayout, gammas) -> EquationBlock:
    pieces = list(block_chunks(cond, layout, gammas))
    rows = np.concatenate([p[0] for p in pieces]) if pieces else np.zeros((0, 0))
    target = np.concatenate([p[1] for p in pieces]) if pieces else np.zeros(0)
    return EquationBlock(cond.tag, rows, target, _nets_of(cond, layout), layout)


def _weight_from_max(tag: str, m: float) -> float:
    if not m > 0:
        raise WeightUndefinedError(f"block {tag!r} is identically zero; its weight is undefined")
    return 1.0 / m


def compute_weights(blocks: Sequence[EquationBlock], mode: WeightMode | str) -> list[float]:
    """One weight per block: 1, 1/max|rows| or 1/max|[rows | target]|."""
    mode = WeightMode(mode)
    if not blocks:
        raise AssemblyError("no blocks to weight")
    out = []
    for b in blocks:
        if mode is WeightMode.ONES:
            out.append(1.0)
            continue
        m = np.max(np.abs(b.rows)) if b.rows.size else 0.0
        if mode is WeightMode.AUGMENTED and b.target.size:
            m = max(m, np.max(np.abs(b.target)))
        out.append(_weight_from_max(b.tag, m))
    return out


def assemble(blocks: Sequence[EquationBlock], weights: Sequence[float], gammas=None) -> AssembledSystem:
    if len(blocks) != len(weights):
        raise AssemblyError("one weight per block required")
    layouts = {id(b.layout) for b in blocks}
    if len(layouts) != 1:
        raise AssemblyError("blocks were built against different column layouts")
    layout = blocks[0].layout
    n_rows = sum(b.rows.shape[0] for b in blocks)
    F = np.zeros((n_rows, layout.n_cols))
    T = np.empty(n_rows)
    index = []
    r = 0
    for b, lam in zip(blocks, weights):
        n = b.rows.shape[0]
        F[r : r + n, b.column_index] = lam * b.rows
        T[r : r + n] = lam * b.target
        index.append((b.tag, r, r + n))
        r += n
    return AssembledSystem(F, T, list(weights), index, layout, tuple(gammas) if gammas is not None else ())


# --------------------------------------------------------------------------
# Least squares
# --------------------------------------------------------------------------


class QRAccumulator:
    """Row-streaming Householder QR of the augmented matrix ``[F | T]``.

    Only the ``(n+1) x (n+1)`` triangular factor is kept; each chunk of rows
    is folded in with LAPACK's triangular-pentagonal QR, so a system far larger
    than memory costs the same flops as one dense QR.  With
    ``R = [[R0, z], [0, rho]]`` the problem becomes ``min |R0 a - z|^2 + rho^2``.
    """

    def __init__(self, n_cols: int, block: int = 64):
        self.n = n_cols
        self.rows_seen = 0
        self.block = block
        self._R = np.zeros((n_cols + 1, n_cols + 1), order="F")

    def add(self, rows: Array, target: Array) -> None:
        rows = np.asarray(rows, float)
        if rows.shape[0] == 0:
            return
        if not (np.isfinite(rows).all() and np.isfinite(target).all()):
            raise NumericalError("non-finite entries in the least-squares system")
        aug = np.empty((rows.shape[0], self.n + 1), order="F")
        aug[:, : self.n] = rows
        aug[:, self.n] = target
        nb = max(1, min(self.block, self.n + 1))
        R, _, _, info = scipy.linalg.lapack.dtpqrt(0, nb, self._R, aug, overwrite_a=1, overwrite_b=1)
        if info != 0:  # pragma: no cover
            raise NumericalError(f"dtpqrt failed with info={info}")
        self._R = R
        self.rows_seen += rows.shape[0]

    @property
    def R(self) -> Array:
        return np.triu(self._R)

    def solve(self, rank_tol: float | None = None):
        """Minimum-norm truncated solution; returns ``(alpha, residual2, rank)``."""
        if self.rows_seen == 0:
            raise AssemblyError("no rows were added")
        n = self.n
        R = self.R
        R0, z = R[:n, :n], R[:n, n]
        rho2 = float(R[n, n] ** 2)
        if rank_tol is None:
            rank_tol = np.finfo(float).eps * max(self.rows_seen, n)
        alpha, _, rank, _ = scipy.linalg.lstsq(
            R0, z, cond=rank_tol, lapack_driver="gelsd", check_finite=False
        )
        res2 = rho2 + float(np.sum((R0 @ alpha - z) ** 2))
        return alpha, res2, int(rank)


def _chunk_rows(n_cols: int, budget: int = 256 * 2**20) -> int:
    return max(256, budget // (8 * (n_cols + 1)))


def solve(system: AssembledSystem, rank_tol: float | None = None) -> SolutionModel:
    """Minimum-norm least-squares fit of the output layer."""
    F, T = system.F, system.T
    if F.shape[0] < 1:
        raise AssemblyError("system has no rows")
    acc = QRAccumulator(F.shape[1])
    step = _chunk_rows(F.shape[1])
    for s in range(0, F.shape[0], step):
        acc.add(F[s : s + step], T[s : s + step])
    alpha, res2, rank = acc.solve(rank_tol)
    return SolutionModel(system.layout, system.gammas, alpha, res2, rank)


@dataclass
class SolveInfo:
    rows: int = 0
    cols: int = 0
    weights: list = field(default_factory=list)
    block_index: list = field(default_factory=list)
    assembly_s: float = 0.0
    solve_s: float = 0.0
    streamed: bool = False
    rank: int = 0


def assemble_and_solve(
    conditions: Sequence[Condition],
    layout: ModelLayout,
    gammas,
    weight_mode: WeightMode | str = WeightMode.AUGMENTED,
    rank_tol: float | None = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> tuple[SolutionModel, SolveInfo]:
    """Build, weight and solve; streams through the QR accumulator when the
    dense system would not fit in ``memory_budget`` bytes."""
    gammas = tuple(float(g) for g in gammas)
    n_rows = sum(c.n_rows for c in conditions)
    n_cols = layout.n_cols
    info = SolveInfo(rows=n_rows, cols=n_cols)
    if n_rows * n_cols * 8 <= memory_budget:
        t0 = time.perf_counter()
        blocks = [build_block(c, layout, gammas) for c in conditions]
        weights = compute_weights(blocks, weight_mode)
        system = assemble(blocks, weights, gammas)
        t1 = time.perf_counter()
        model = solve(system, rank_tol)
        info.assembly_s, info.solve_s = t1 - t0, time.perf_counter() - t1
        info.weights, info.block_index, info.rank = weights, system.block_index, model.rank
        return model, info

    info.streamed = True
    mode = WeightMode(weight_mode)
    per_chunk = max(1, _chunk_rows(n_cols) // 4)
    weights = []
    t_asm = 0.0
    # pass 1: block maxima for the normalization
    for c in conditions:
        if mode is WeightMode.ONES:
            weights.append(1.0)
            continue
        t0 = time.perf_counter()
        m = 0.0
        for rows, target in block_chunks(c, layout, gammas, per_chunk // len(c.equations)):
            m = max(m, float(np.max(np.abs(rows))) if rows.size else 0.0)
            if mode is WeightMode.AUGMENTED and target.size:
                m = max(m, float(np.max(np.abs(target))))
        weights.append(_weight_from_max(c.tag, m))
        t_asm += time.perf_counter() - t0
    # pass 2: stream weighted rows into the QR factor
    acc = QRAccumulator(n_cols)
    t_solve = 0.0
    step = _chunk_rows(n_cols)
    buf_rows, buf_t, buf_n = [], [], 0
    index, r = [], 0

    def flush():
        nonlocal buf_rows, buf_t, buf_n, t_solve
        if buf_n:
            t0 = time.perf_counter()
            acc.add(np.vstack(buf_rows), np.concatenate(buf_t))
            t_solve += time.perf_counter() - t0
        buf_rows, buf_t, buf_n = [], [], 0

    for c, lam in zip(conditions, weights):
        nets = _nets_of(c, layout)
        colidx = np.concatenate([np.arange(layout.offsets[n], layout.offsets[n] + layout.width(n)) for n in nets])
        start = r
        for rows, target in block_chunks(c, layout, gammas, max(1, per_chunk // len(c.equations))):
            t0 = time.perf_counter()
            full = np.zeros((rows.shape[0], n_cols))
            full[:, colidx] = lam * rows
            buf_rows.append(full)
            buf_t.append(lam * target)
            buf_n += rows.shape[0]
            r += rows.shape[0]
            t_asm += time.perf_counter() - t0
            if buf_n >= step:
                flush()
        index.append((c.tag, start, r))
    flush()
    t0 = time.perf_counter()
    alpha, res2, rank = acc.solve(rank_tol)
    t_solve += time.perf_counter() - t0
    info.assembly_s, info.solve_s = t_asm, t_solve
    info.weights, info.block_index, info.rank = weights, index, rank
    return SolutionModel(layout, gammas, alpha, res2, rank), info


def posterior_indicator(
    conditions: Sequence[Condition],
    layout: ModelLayout,
    gammas,
    weight_mode: WeightMode | str = WeightMode.AUGMENTED,
    rank_tol: float | None = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> float:
    """Achieved weighted squared residual for the given shapes."""
    model, _ = assemble_and_solve(conditions, layout, gammas, weight_mode, rank_tol, memory_budget)
    return model.residual2


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate(
    model: SolutionModel,
    points: Array,
    labels: Array | None = None,
    gradients: bool = False,
    chunk: int = 8192,
):
    """Field values ``(N, F)`` (and gradients ``(N, F, d)``) of the piecewise model."""
    layout = model.layout
    points = np.atleast_2d(np.asarray(points, float))
    if labels is None:
        labels = classify_many(layout.partition, points)
    labels = np.asarray(labels, int)
    N, d = points.shape
    vals = np.zeros((N, layout.n_fields))
    grads = np.zeros((N, layout.n_fields, d)) if gradients else None
    for k in np.unique(labels):
        net = layout.net_of[int(k)]
        bank, g = layout.banks[net], model.gammas[net]
        idx_all = np.flatnonzero(labels == k)
        coef = np.stack([model.coefficients(net, f) for f in range(layout.n_fields)], axis=1)
        for s in range(0, idx_all.size, chunk):
            idx = idx_all[s : s + chunk]
            cache: dict = {}
            vals[idx] = basis_derivative(bank, g, points[idx], (0,) * d, _cache=cache) @ coef
            if gradients:
                for i in range(d):
                    e = tuple(int(i == j) for j in range(d))
                    grads[idx, :, i] = basis_derivative(bank, g, points[idx], e, _cache=cache) @ coef
    return (vals, grads) if gradients else vals


# --------------------------------------------------------------------------
# Binary dump of (F, T)
# --------------------------------------------------------------------------

_SYS_MAGIC = b"MTNLSQ01"


def write_system(system: AssembledSystem, path) -> None:
    """Little-endian layout: magic, uint64 rows, uint64 cols, uint64 n_blocks,
    per block (uint64 start, uint64 stop, uint32 tag length, tag utf-8),
    then F column-major float64 and T float64."""
    F, T = system.F, system.T
    with open(path, "wb") as fh:
        fh.write(_SYS_MAGIC)
        fh.write(struct.pack("<QQQ", F.shape[0], F.shape[1], len(system.block_index)))
        for tag, a, b in system.block_index:
            raw = tag.encode()
            fh.write(struct.pack("<QQI", a, b, len(raw)))
            fh.write(raw)
        fh.write(np.asarray(F, "<f8").tobytes(order="F"))
        fh.write(np.asarray(T, "<f8").tobytes())


def read_system(path) -> tuple[Array, Array, list[tuple[str, int, int]]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _SYS_MAGIC:
            raise ValueError("not a least-squares dump")
        m, n, nb = struct.unpack("<QQQ", fh.read(24))
        index = []
        for _ in range(nb):
            a, b, ln = struct.unpack("<QQI", fh.read(20))
            index.append((fh.read(ln).decode(), a, b))
        F = np.frombuffer(fh.read(8 * m * n), "<f8").reshape((m, n), order="F").astype(float)
        T = np.frombuffer(fh.read(8 * m), "<f8").astype(float)
    return F, T, index
