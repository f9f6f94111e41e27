"""End-to-end runs: covers, allocation, banks, shapes, sampling, assembly, solve, metrics."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .assembly import (
    AssembledSystem,
    ModelLayout,
    SolutionModel,
    assemble,
    assemble_and_solve,
    build_block,
    compute_weights,
    posterior_indicator,
    write_system,
)
from .benchmarks import (
    BenchmarkProblem,
    ErrorReport,
    _jsonable,
    build_conditions,
    csv_columns,
    error_metrics,
    make_problem,
    test_points,
    training_set,
)
from .config import RunConfig, SweepConfig
from .geometry import BallCover
from .neuronbank import density, generate_bank, write_bank
from .shapes import (
    AllocationPlan,
    SearchTrace,
    ShapePlan,
    allocate_neurons,
    equal_allocation,
    formula_shapes,
    optimize_multinet_shape,
)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.original = exc


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class RunArtifacts:
    problem: BenchmarkProblem
    layout: ModelLayout
    plan: AllocationPlan
    shapes: ShapePlan
    model: SolutionModel
    trace: SearchTrace | None
    conditions: list


def _problem(cfg: RunConfig) -> BenchmarkProblem:
    return make_problem(cfg.problem, cfg.contrast, **cfg.problem_options())


def network_covers(cfg: RunConfig, problem: BenchmarkProblem) -> tuple[tuple[BallCover, ...], tuple[int, ...]]:
    """Covering balls per network and the subdomain-to-network map."""
    if cfg.network == "single":
        cover = problem.single_cover or _enclosing_ball(problem)
        return (cover,), (0,) * problem.K
    return problem.covers, tuple(range(problem.K))


def _enclosing_ball(problem: BenchmarkProblem) -> BallCover:
    lo, hi = problem.partition.bbox
    return BallCover(0.5 * (lo + hi), 0.5 * float(np.linalg.norm(hi - lo)) * 1.05)


def allocation_for(cfg: RunConfig, covers) -> AllocationPlan:
    radii = [c.radius for c in covers]
    if cfg.allocation == "equal":
        return equal_allocation(cfg.M, len(covers), radii)
    return allocate_neurons(cfg.M, radii)


def make_layout(problem, covers, net_of, plan: AllocationPlan, seed: int) -> ModelLayout:
    banks = tuple(generate_bank(c, m, seed, stream=k) for k, (c, m) in enumerate(zip(covers, plan.counts)))
    return ModelLayout(problem.partition, banks, net_of, problem.fields)


def _training(cfg: RunConfig, problem):
    s = cfg.sampling
    return training_set(problem, s.spacing, s.boundary_counts, s.interface_counts)


def _search(cfg: RunConfig, conditions, layout, plan, d) -> tuple[ShapePlan, SearchTrace]:
    budget = cfg.memory_budget_mb * 2**20

    def eta(gammas):
        return posterior_indicator(conditions, layout, gammas, cfg.weight_mode, cfg.rank_tol, budget)

    sh = cfg.shape
    return optimize_multinet_shape(eta, sh.interval, sh.iterations, plan, d, sh.anchor)


def fit_constant_at(cfg: RunConfig, M0: int, problem=None, conditions=None) -> tuple[float, SearchTrace, ShapePlan]:
    """Preprocessing: optimize the shapes at ``M0`` and return the shared constant C."""
    problem = problem or _problem(cfg)
    covers, net_of = network_covers(cfg, problem)
    sub = cfg.model_copy(update={"M": M0})
    plan = allocation_for(sub, covers)
    layout = make_layout(problem, covers, net_of, plan, cfg.seed)
    if conditions is None:
        conditions = build_conditions(problem, _training(cfg, problem))
    shapes, trace = _search(sub, conditions, layout, plan, problem.dim)
    return shapes.C, trace, shapes


def run_solve(cfg: RunConfig, constant: float | None = None) -> tuple[ErrorReport, RunArtifacts]:
    """One complete run.  ``constant`` overrides C for the formula strategy
    (used by sweeps that fit C once)."""
    st = _Stages()
    t_start = time.perf_counter()
    problem = st.run("setup", _problem, cfg)
    covers, net_of = st.run("covers", network_covers, cfg, problem)
    plan = st.run("allocate", allocation_for, cfg, covers)
    layout = st.run("banks", make_layout, problem, covers, net_of, plan, cfg.seed)
    training = st.run("sampling", _training, cfg, problem)
    conditions = st.run("sampling", build_conditions, problem, training)

    trace = None
    sh = cfg.shape
    if sh.strategy == "optimize":
        shapes, trace = st.run("shapes", _search, cfg, conditions, layout, plan, problem.dim)
    elif sh.strategy == "fixed":
        if len(sh.gammas) != len(covers):
            raise StageError("shapes", ValueError(f"expected {len(covers)} shape parameters"))
        shapes = ShapePlan(tuple(sh.gammas), "fixed")
    else:
        if constant is None and sh.strategy == "preprocess":
            constant, trace, _ = st.run("shapes", fit_constant_at, cfg, sh.M0, problem, conditions)
        C = constant if constant is not None else sh.C
        shapes = st.run("shapes", formula_shapes, C, plan, problem.dim)

    budget = cfg.memory_budget_mb * 2**20
    model, info = st.run(
        "solve", assemble_and_solve, conditions, layout, shapes.gammas, cfg.weight_mode, cfg.rank_tol, budget
    )
    if not np.all(np.isfinite(model.alpha)):
        raise StageError("solve", FloatingPointError("non-finite coefficients"))
    st.timings.pop("solve")
    st.timings["assembly"] = info.assembly_s
    st.timings["solve"] = info.solve_s

    def _eval():
        n_test = cfg.sampling.n_test
        pts, lab = test_points(problem, cfg.sampling.test_seed, n_test, training)
        return error_metrics(model, problem, pts, lab, gradients=cfg.gradients), len(pts)

    report, n_test = st.run("evaluate", _eval)
    total = time.perf_counter() - t_start

    report.M = cfg.M
    report.contrast = tuple(cfg.contrast) if cfg.contrast is not None else _default_contrast(problem)
    report.seed = cfg.seed
    report.seed_policy = f"seed={cfg.seed}"
    report.strategy = shapes.strategy if sh.strategy != "preprocess" else "formula(preprocess)"
    report.weight_mode = cfg.weight_mode.value
    report.timings = {f"{k}_s": v for k, v in st.timings.items()}
    report.timings["total_s"] = total
    n_cols = layout.n_cols
    report.details = {
        "network": cfg.network,
        "counts": list(plan.counts),
        "radii": list(plan.radii),
        "gammas": list(shapes.gammas),
        "C": shapes.C if shapes.C is not None else constant,
        "rows": info.rows,
        "cols": n_cols,
        "cols_without_bias": n_cols - len(layout.banks) * layout.n_fields,
        "rank": info.rank,
        "residual2": model.residual2,
        "weights": dict(zip([b[0] for b in info.block_index], info.weights)),
        "n_train": {
            "interior": [len(c) for c in training.interior],
            "boundary": len(training.boundary),
            "interface": [len(c) for c in training.interfaces],
        },
        "n_test": n_test,
        "streamed": info.streamed,
    }
    if trace is not None:
        report.details["search"] = trace.to_dict()

    arts = RunArtifacts(problem, layout, plan, shapes, model, trace, conditions)
    _write_outputs(cfg, report, arts)
    return report, arts


def _default_contrast(problem: BenchmarkProblem):
    for key in ("beta", "mu"):
        v = problem.coefficients.get(key)
        if isinstance(v, tuple):
            return v
    return None


def _write_outputs(cfg: RunConfig, report: ErrorReport, arts: RunArtifacts) -> None:
    out = cfg.output
    if out.report_json:
        Path(out.report_json).write_text(report.to_json())
    if out.report_csv:
        write_csv([report.csv_row()], out.report_csv, report.csv_columns())
    if out.trace_json and arts.trace is not None:
        Path(out.trace_json).write_text(json.dumps(arts.trace.to_dict(), indent=2))
    if out.bank_dir:
        d = Path(out.bank_dir)
        d.mkdir(parents=True, exist_ok=True)
        for k, bank in enumerate(arts.layout.banks):
            write_bank(bank, d / f"bank_{k}.bin")
    if out.system_dump:
        write_system(assembled_system(arts.conditions, arts.layout, arts.shapes.gammas, cfg.weight_mode), out.system_dump)


def assembled_system(conditions, layout, gammas, weight_mode) -> AssembledSystem:
    blocks = [build_block(c, layout, gammas) for c in conditions]
    return assemble(blocks, compute_weights(blocks, weight_mode), gammas)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --------------------------------------------------------------------------
# Tuning and sweeps
# --------------------------------------------------------------------------


def run_tune(cfg: RunConfig) -> tuple[float, SearchTrace]:
    """Fit the shared constant C by the golden-section search at ``shape.M0`` (or ``M``)."""
    M0 = cfg.shape.M0 or cfg.M
    try:
        C, trace, _ = fit_constant_at(cfg, M0)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("tune", exc) from exc
    return C, trace


def trimmed_mean(values: Sequence[float], trim: int) -> float:
    """Drop ``trim/2`` largest and ``trim/2`` smallest values and average the rest."""
    v = np.sort(np.asarray(values, float))
    if trim % 2:
        raise ValueError("trim must be even")
    if trim >= v.size:
        raise ValueError("trim removes every value")
    h = trim // 2
    return float(v[h : v.size - h].mean())


SWEEP_METRICS_EXTRA = ("rl2_grad", "assembly_s", "solve_s")


def _sweep_cell(args):
    cfg, constant = args
    rep, _ = run_solve(cfg, constant)
    return rep.csv_row()


def run_sweep(cfg: SweepConfig, out_path=None) -> list[dict]:
    """One CSV row per (M, contrast) cell with trimmed means over repetitions."""
    tmpl = cfg.template
    contrasts = cfg.contrasts or [tmpl.contrast]
    constant = None
    if tmpl.shape.strategy == "preprocess":
        constant, _ = run_tune(tmpl)
    jobs, keys = [], []
    for M in cfg.M_values:
        for c in contrasts:
            for r in range(cfg.repetitions):
                run = tmpl.model_copy(update={"M": int(M), "contrast": c, "seed": tmpl.seed + r})
                jobs.append((run, constant))
                keys.append((M, tuple(c) if c is not None else None))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]

    fields = make_problem(tmpl.problem, tmpl.contrast, **tmpl.problem_options()).fields
    cols = csv_columns(fields) + ["n_runs"]
    metric_cols = [c for c in cols if c.startswith(("rl2_", "rlinf_")) or c in SWEEP_METRICS_EXTRA]
    rows = []
    for M in cfg.M_values:
        for c in contrasts:
            key = (M, tuple(c) if c is not None else None)
            cell = [res for res, k in zip(results, keys) if k == key]
            row = dict(cell[0])
            row["seed_policy"] = f"{cfg.seed_policy}:{tmpl.seed}+r,r<{cfg.repetitions};trim={cfg.trim}"
            for m in metric_cols:
                vals = [x[m] for x in cell if x.get(m) is not None]
                row[m] = trimmed_mean(vals, cfg.trim) if len(vals) == len(cell) else None
            row["n_runs"] = len(cell)
            rows.append(row)
    if out_path is not None:
        write_csv(rows, out_path, cols)
    return rows


# --------------------------------------------------------------------------
# Hyperplane density diagnostics
# --------------------------------------------------------------------------


def ball_probes(center, radius: float, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed in the ball ``|x - center| <= radius``."""
    center = np.atleast_1d(np.asarray(center, float))
    d = center.shape[0]
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    return center + g * r[:, None]


def run_density(ball: BallCover, M: int, tau: float, seeds: Sequence[int], probes: np.ndarray) -> list[dict]:
    """Density of partition hyperplanes at each probe point, one row per (seed, probe)."""
    rows = []
    probes = np.atleast_2d(probes)
    for s in seeds:
        bank = generate_bank(ball, M, int(s))
        D = density(bank, probes, tau)
        for i, (p, v) in enumerate(zip(probes, np.atleast_1d(D))):
            row = {"seed": int(s), "probe": i, "D": float(v), "expected": tau / ball.radius}
            row.update({f"x{j}": float(c) for j, c in enumerate(p)})
            rows.append(row)
    return rows


def density_summary(rows: Sequence[dict]) -> dict:
    """Mean density, its standard error over seeds, and the expected value."""
    by_seed: dict[int, list[float]] = {}
    for r in rows:
        by_seed.setdefault(r["seed"], []).append(r["D"])
    means = np.array([np.mean(v) for v in by_seed.values()])
    se = float(means.std(ddof=1) / math.sqrt(means.size)) if means.size > 1 else float("nan")
    return {"mean": float(means.mean()), "se": se, "expected": rows[0]["expected"], "n_seeds": int(means.size)}


def report_json_without_timings(report: ErrorReport) -> str:
    return json.dumps(_jsonable(report.to_dict(timings=False)), indent=2, sort_keys=True)
