"""Monte Carlo experiment driver: configs, replication loops, rate fits, reports.

An experiment is described by a flat INI config (sections [experiment],
[geometry], [density], [estimator]) and produces a fixed file set in its output
directory: a risk CSV with one row per replication, aggregate plot points, a
JSON report, a static SVG figure, and wall-clock timings.  Timings live in a
separate file so that every other output is byte-reproducible from the config
and seed alone.

Replications run in parallel over a thread pool with per-replication seeds
derived from the base seed by stream splitting; aggregation uses pairwise tree
sums, so means do not depend on scheduling order beyond bottom-of-double noise.
A replication that raises is recorded as an errored row, and the experiment as
a whole fails only when more than 20 percent of replications error.
"""

from __future__ import annotations

import configparser
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from itertools import permutations

import numpy as np

from .densities import (
    BumpLatticeSpec,
    ConfigError,
    DensityModel,
    SampleSet,
    bandwidth,
    derive_seed,
    estimate_density,
    make_density,
    sample,
    splitmix64,
)
from .functionals import (
    DebiasConfig,
    _embed_coeffs,
    _taper_cutoff,
    closed_form_second_uniform,
    cubic_kernel,
    debiased_estimate,
    estimate_cubic_form,
    estimate_quadratic_form,
    hoeffding_terms,
    mu_first_derivative,
    mu_second_form,
    multiplication_cubic_form,
    multiplication_quadratic_form,
    perturb_density,
    ustat,
    UStatKernel,
)
from .pencil import assemble_pencil, cluster_ids, solve_spectrum
from .projectors import (
    PluginConfig,
    angle_Dq,
    cluster_mean,
    contour_projector,
    plugin_eigenspace,
    select_contour,
    spectral_projector,
)
from .torus import (
    RAISED_COSINE,
    FourierField,
    GridField,
    Sobolev,
    TorusGeometry,
    analyze,
    compute_norm,
    frequency_lattice,
    hermitian_part,
    synthesize,
)


class ExperimentError(RuntimeError):
    """More than the tolerated fraction of replications failed."""


class DegenerateFitError(ValueError):
    """Rate fit attempted on too few n values or nonpositive mean risks."""


EXPERIMENT_KINDS = (
    "selftest",
    "spectrum",
    "density-rate",
    "eigenspace-rate",
    "eigenvalue-rate",
    "efficiency",
    "perturbation-bound",
)

# fraction of errored replications above which the run is declared failed
ERROR_BUDGET = 0.20


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one experiment; round-trips through an INI file."""

    kind: str = "selftest"
    seed: int = 0
    replications: int = 1
    n_grid: tuple[int, ...] = (256,)
    threads: int = 1
    out_dir: str = "out"
    dim: int = 1
    side_lengths: tuple[float, ...] = (1.0,)
    density_kind: str = "trig"
    density_cutoff: int = 0  # 0 picks the catalog default band
    amplitude: float = 0.5
    sigma: float = 0.15
    smoothness_s: float = 2.0
    alpha: float = 1.0
    floor_delta: float = 0.05
    pencil_cutoff: int = 16
    oversample: int = 4
    target_index: int = 1
    gap: float = 10.0
    nodes: int = 64
    q_list: tuple[float, ...] = (2.0,)
    density_c: float = 1.0
    quadratic_c: float = 1.0
    cubic_c: float = 1.0
    correction_cutoff: int = 8
    split: str = "half"
    functional: str = "square"
    estimator: str = "debias"  # "debias" | "ustat-quadratic" | "ustat-cubic"
    derivative_check: bool = False
    epsilons: tuple[float, ...] = (0.04, 0.02, 0.01, 0.005)
    tilt_mode: tuple[int, ...] = (2,)
    tilt_amplitude: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n grid must be nonempty and strictly increasing")
        if len(self.side_lengths) != self.dim:
            raise ConfigError("side_lengths length must equal dim")
        if self.estimator not in ("debias", "ustat-quadratic", "ustat-cubic"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if not self.q_list or any(q < 2 for q in self.q_list):
            raise ConfigError("q_list entries must lie in [2, inf)")
        if any(e <= 0 for e in self.epsilons):
            raise ConfigError("epsilons must be positive")
        if all(k == 0 for k in self.tilt_mode):
            raise ConfigError("tilt mode must be a nonzero lattice vector")

    def geometry(self) -> TorusGeometry:
        return TorusGeometry(self.dim, self.side_lengths)


_CONFIG_SECTIONS = {
    "experiment": ("kind", "seed", "replications", "n_grid", "threads", "out_dir"),
    "geometry": ("dim", "side_lengths"),
    "density": (
        "density_kind", "density_cutoff", "amplitude", "sigma",
        "smoothness_s", "alpha", "floor_delta",
    ),
    "estimator": (
        "pencil_cutoff", "oversample", "target_index", "gap", "nodes", "q_list",
        "density_c", "quadratic_c", "cubic_c", "correction_cutoff", "split",
        "functional", "estimator", "derivative_check", "epsilons",
        "tilt_mode", "tilt_amplitude",
    ),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, text: str):
    kind = _FIELD_TYPES[name]
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() in ("true", "yes", "on", "1"):
            return True
        if text.lower() in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"field {name} expects a boolean, got {text!r}")
    if kind == "tuple[int, ...]":
        return tuple(int(tok) for tok in text.split())
    if kind == "tuple[float, ...]":
        return tuple(float(tok) for tok in text.split())
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_ini(config: ExperimentConfig) -> str:
    out = io.StringIO()
    for section, names in _CONFIG_SECTIONS.items():
        out.write(f"[{section}]\n")
        for name in names:
            out.write(f"{name} = {_render(getattr(config, name))}\n")
        out.write("\n")
    return out.getvalue()


def config_from_ini(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    values = {}
    for section in parser.sections():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser.items(section):
            if name not in _CONFIG_SECTIONS[section]:
                raise ConfigError(f"unknown key {name!r} in section [{section}]")
            values[name] = _coerce(name, raw)
    return ExperimentConfig(**values)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_ini(fh.read())


# --- deterministic reduction and rate fitting --------------------------------------


def tree_sum(values) -> float:
    """Pairwise summation; permutation-stable to relative 1e-12 for sane inputs."""
    vals = [float(v) for v in values]
    if not vals:
        return 0.0
    while len(vals) > 1:
        vals = [
            vals[i] + vals[i + 1] if i + 1 < len(vals) else vals[i]
            for i in range(0, len(vals), 2)
        ]
    return vals[0]


def tree_mean(values) -> float:
    vals = list(values)
    if not vals:
        return float("nan")
    return tree_sum(vals) / len(vals)


@dataclass(frozen=True)
class RiskTable:
    """Per-replication rows with a named metric column used for rate fitting."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    metric: str

    def column(self, name: str) -> list:
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]

    def pairs(self, metric: str | None = None) -> list[tuple[int, float]]:
        if "n" not in self.columns:
            raise ValueError("table has no sample-size column to fit against")
        ns = self.column("n")
        vals = self.column(metric or self.metric)
        return [(int(n), float(v)) for n, v in zip(ns, vals)]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(", ".join(self.columns) + "\n")
        for row in self.rows:
            out.write(", ".join(_cell(v) for v in row) + "\n")
        return out.getvalue()


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class RateFit:
    """OLS fit of log mean-risk against log n."""

    slope: float
    intercept: float
    stderr: float
    r_squared: float
    points: int

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "stderr": self.stderr,
            "r_squared": self.r_squared,
            "points": self.points,
        }


def fit_rate(table, metric: str | None = None) -> RateFit:
    """Fit mean risk ~ C * n^slope by least squares on the log-log means.

    Accepts a RiskTable or any iterable of (n, risk) pairs; NaN risks are
    dropped before averaging.  Requires at least three distinct n with positive
    finite mean risk, else a degenerate-fit error.
    """
    pairs = table.pairs(metric) if isinstance(table, RiskTable) else [
        (int(n), float(v)) for n, v in table
    ]
    groups: dict[int, list[float]] = {}
    for n, v in pairs:
        if math.isfinite(v):
            groups.setdefault(n, []).append(v)
    ns = sorted(groups)
    if len(ns) < 3:
        raise DegenerateFitError(f"rate fit needs >= 3 distinct n values, got {len(ns)}")
    means = [tree_mean(groups[n]) for n in ns]
    for n, m in zip(ns, means):
        if not (math.isfinite(m) and m > 0):
            raise DegenerateFitError(f"mean risk at n={n} is {m!r}; log fit undefined")

    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(means, dtype=float))
    xbar, ybar = x.mean(), y.mean()
    sxx = float(((x - xbar) ** 2).sum())
    slope = float(((x - xbar) * (y - ybar)).sum() / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    rss = float((resid**2).sum())
    dof = len(ns) - 2
    stderr = math.sqrt(rss / dof / sxx) if dof > 0 else float("nan")
    tss = float(((y - ybar) ** 2).sum())
    r_squared = 1.0 if tss < 1e-30 else 1.0 - rss / tss
    return RateFit(slope, intercept, stderr, r_squared, len(ns))


# --- replication driver -------------------------------------------------------------


def _ordered_map(fn, items, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _run_batches(config: ExperimentConfig, worker, error_row):
    """Run worker(n, rep, seed) across the n grid; collect rows and error counts.

    worker returns (rows, errored).  Exceptions are converted to a single error
    row via error_row(n, rep, seed) and counted toward the budget.
    """
    all_rows: list[tuple] = []
    errored = 0
    total = 0
    stages: dict[str, float] = {}

    def run_one(job):
        n, rep, seed = job
        try:
            return worker(n, rep, seed)
        except Exception:
            return [error_row(n, rep, seed)], True

    for n_index, n in enumerate(config.n_grid):
        t0 = time.perf_counter()
        jobs = [(n, rep, derive_seed(config.seed, n_index, rep)) for rep in range(config.replications)]
        for rows, bad in _ordered_map(run_one, jobs, config.threads):
            all_rows.extend(rows)
            errored += bool(bad)
        total += len(jobs)
        stages[f"n={n}"] = time.perf_counter() - t0
    return all_rows, errored, total, stages


def _per_n_summary(table: RiskTable, extras=None) -> list[dict]:
    ns = sorted(set(int(n) for n in table.column("n")))
    vals = np.asarray(table.column(table.metric), dtype=float)
    narr = np.asarray(table.column("n"), dtype=int)
    out = []
    for n in ns:
        sel = vals[narr == n]
        fin = sel[np.isfinite(sel)]
        entry = {
            "n": n,
            "count": int(sel.size),
            "errors": int(sel.size - fin.size),
            "mean": tree_mean(fin) if fin.size else float("nan"),
            "median": float(np.median(fin)) if fin.size else float("nan"),
            "stderr": float(np.std(fin, ddof=1) / math.sqrt(fin.size)) if fin.size > 1 else float("nan"),
        }
        if extras is not None:
            entry.update(extras(n))
        out.append(entry)
    return out


def _density_from(config: ExperimentConfig) -> DensityModel:
    if config.density_kind == "bump-lattice":
        raise ConfigError("bump-lattice densities are code-only; configs use uniform, trig, gauss-bump")
    return make_density(
        config.density_kind,
        config.geometry(),
        cutoff=config.density_cutoff if config.density_cutoff > 0 else None,
        smoothness_s=config.smoothness_s,
        alpha=config.alpha,
        amplitude=config.amplitude,
        sigma=config.sigma,
    )


def _debias_config(config: ExperimentConfig) -> DebiasConfig:
    return DebiasConfig(
        smoothness_s=config.smoothness_s,
        alpha=config.alpha,
        split=config.split,
        floor_delta=config.floor_delta,
        density_c=config.density_c,
        quadratic_c=config.quadratic_c,
        cubic_c=config.cubic_c,
        pencil_cutoff=config.pencil_cutoff,
        target_index=config.target_index,
        gap=config.gap,
        correction_cutoff=config.correction_cutoff,
        oversample=config.oversample,
        derivative_check=config.derivative_check,
    )


def _l2_distance(a: FourierField, b: FourierField) -> float:
    cut = max(a.freqs.cutoff, b.freqs.cutoff)
    freqs = frequency_lattice(a.geometry, cut)
    diff = _embed_coeffs(a, freqs) - _embed_coeffs(b, freqs)
    return FourierField(freqs, diff, reality_flag=True).l2_norm()


def _constant_field(geometry: TorusGeometry, cutoff: int) -> FourierField:
    freqs = frequency_lattice(geometry, cutoff)
    c = np.zeros(len(freqs), dtype=complex)
    c[0] = geometry.volume
    return FourierField(freqs, c, reality_flag=True)


def _cosine_field(geometry: TorusGeometry, mode: tuple[int, ...], amplitude: float) -> FourierField:
    cut = max(abs(k) for k in mode)
    freqs = frequency_lattice(geometry, cut)
    c = np.zeros(len(freqs), dtype=complex)
    half = amplitude * geometry.volume / 2.0
    c[freqs.index_of(mode)] += half
    c[freqs.index_of(tuple(-k for k in mode))] += half
    return FourierField(freqs, c, reality_flag=True)


def tilted_density(base: DensityModel, direction: FourierField, eps: float) -> DensityModel:
    """The renormalized multiplicative tilt f(1 + eps*w) / mass, revalidated."""
    cut = base.field.freqs.cutoff + direction.freqs.cutoff
    grid = max(4 * (2 * cut + 1), 2 * cut + 2)
    fv = np.real(synthesize(base.field, grid).values)
    wv = np.real(synthesize(direction, grid).values)
    tilted = analyze(GridField(base.geometry, grid, (fv * (1.0 + eps * wv)).astype(complex)), cut, real=True)
    coeffs = tilted.coeffs / tilted.coeffs[0]
    shift = coeffs - _embed_coeffs(base.field, tilted.freqs)
    return perturb_density(base, FourierField(tilted.freqs, shift, reality_flag=True), 1.0)


# --- experiment runners ------------------------------------------------------------


def _expected_rates(config: ExperimentConfig) -> dict | None:
    s, d = config.smoothness_s, config.dim
    if config.kind == "density-rate":
        return {"rate": "n^(-s/(2s+d))", "slope": -s / (2 * s + d)}
    if config.kind == "eigenspace-rate":
        return {"rate": "n^(-(s+1)/(2s+d)) + n^(-1/2)", "slope": -min((s + 1) / (2 * s + d), 0.5)}
    if config.kind in ("eigenvalue-rate", "efficiency"):
        return {"rate": "n^(-4s/(4s+d)) + n^(-1/2)", "slope": -min(4 * s / (4 * s + d), 0.5)}
    return None


def _run_density_rate(config: ExperimentConfig):
    truth = _density_from(config)

    def worker(n, rep, seed):
        ss = sample(truth, n, seed)
        level = bandwidth(n, config.smoothness_s, config.dim, "density", config.density_c)
        fhat = estimate_density(
            ss, RAISED_COSINE, level, config.floor_delta,
            smoothness_s=config.smoothness_s, alpha=config.alpha,
        )
        loss = _l2_distance(fhat.field, truth.field)
        return [(n, rep, level, loss, seed)], not math.isfinite(loss)

    def error_row(n, rep, seed):
        return (n, rep, 0, float("nan"), seed)

    rows, errored, total, stages = _run_batches(config, worker, error_row)
    table = RiskTable(("n", "replication", "level", "l2_loss", "seed"), tuple(rows), "l2_loss")
    return table, {}, errored, total, stages


def _run_eigenspace_rate(config: ExperimentConfig):
    truth = _density_from(config)
    pencil_true = assemble_pencil(truth, config.pencil_cutoff, config.alpha, config.oversample)
    system_true = solve_spectrum(pencil_true)
    contour_true = select_contour(system_true, config.target_index, config.gap, config.nodes)
    proj_true = spectral_projector(system_true, contour_true)
    pcfg = PluginConfig(
        cutoff=config.pencil_cutoff,
        smoothness_s=config.smoothness_s,
        density_constant=config.density_c,
        floor_delta=config.floor_delta,
        alpha=config.alpha,
        oversample=config.oversample,
        q=config.q_list[0],
        nodes=config.nodes,
    )

    def worker(n, rep, seed):
        ss = sample(truth, n, seed)
        rr = plugin_eigenspace(ss, config.target_index, config.gap, pcfg, truth=truth)
        rows = [(n, rep, rr.rank_true, rr.rank_est, rr.d2, rr.dq, rr.q, rr.emp_l2_loss, seed)]
        for q in config.q_list[1:]:
            dq = angle_Dq(proj_true, rr.projector, q).value if rr.projector is not None else float("nan")
            rows.append((n, rep, rr.rank_true, rr.rank_est, rr.d2, dq, q, rr.emp_l2_loss, seed))
        return rows, not math.isfinite(rr.d2)

    def error_row(n, rep, seed):
        return (n, rep, proj_true.rank, 0, float("nan"), float("nan"), config.q_list[0], float("nan"), seed)

    rows, errored, total, stages = _run_batches(config, worker, error_row)
    table = RiskTable(
        ("n", "replication", "rank_true", "rank_est", "D2", "Dq", "q", "emp_l2_loss", "seed"),
        tuple(rows), "D2",
    )

    narr = np.asarray(table.column("n"), dtype=int)
    rt = np.asarray(table.column("rank_true"), dtype=int)
    re_ = np.asarray(table.column("rank_est"), dtype=int)

    def extras(n):
        sel = narr == n
        return {"rank_recovery": float(np.mean(rt[sel] == re_[sel]))}

    return table, {"per_n_extras": extras}, errored, total, stages


def _run_eigenvalue_rate(config: ExperimentConfig):
    truth = _density_from(config)
    pencil_true = assemble_pencil(truth, config.pencil_cutoff, config.alpha, config.oversample)
    system_true = solve_spectrum(pencil_true)
    contour_true = select_contour(system_true, config.target_index, config.gap, config.nodes)
    mu_true = cluster_mean(system_true, contour_true)
    dcfg = _debias_config(config)

    def worker(n, rep, seed):
        ss = sample(truth, n, seed)
        rr = debiased_estimate("eigenvalue", ss, dcfg, seed=seed)
        row = (
            n, rep, rr.estimate, rr.plugin, rr.corr1, rr.corr2, rr.corr3,
            abs(rr.estimate - mu_true), abs(rr.plugin - mu_true),
            "|".join(rr.flags), seed,
        )
        return [row], not math.isfinite(rr.estimate)

    def error_row(n, rep, seed):
        nan = float("nan")
        return (n, rep, nan, nan, nan, nan, nan, nan, nan, "error", seed)

    rows, errored, total, stages = _run_batches(config, worker, error_row)
    table = RiskTable(
        ("n", "replication", "estimate", "plugin", "corr1", "corr2", "corr3",
         "abs_error", "plugin_abs_error", "flags", "seed"),
        tuple(rows), "abs_error",
    )

    narr = np.asarray(table.column("n"), dtype=int)
    est_err = np.asarray(table.column("abs_error"), dtype=float)
    plg_err = np.asarray(table.column("plugin_abs_error"), dtype=float)

    def extras(n):
        sel = (narr == n) & np.isfinite(est_err) & np.isfinite(plg_err)
        if not sel.any():
            return {"plugin_mean": float("nan"), "rmse": float("nan"), "plugin_rmse": float("nan")}
        return {
            "plugin_mean": tree_mean(plg_err[sel]),
            "rmse": float(np.sqrt(np.mean(est_err[sel] ** 2))),
            "plugin_rmse": float(np.sqrt(np.mean(plg_err[sel] ** 2))),
        }

    n_top = max(config.n_grid)
    sel = (narr == n_top) & np.isfinite(est_err) & np.isfinite(plg_err)
    gains = plg_err[sel] - est_err[sel]
    if gains.size > 1 and float(np.std(gains, ddof=1)) > 0:
        sigma = float(tree_mean(gains) / (np.std(gains, ddof=1) / math.sqrt(gains.size)))
    else:
        sigma = float("nan")
    report_extra = {
        "truth": mu_true,
        "paired_largest_n": {
            "n": n_top,
            "count": int(gains.size),
            "mean_gain": tree_mean(gains) if gains.size else float("nan"),
            "gain_sigma": sigma,
        },
    }
    try:
        report_extra["plugin_fit"] = fit_rate(table, "plugin_abs_error").to_dict()
    except DegenerateFitError:
        report_extra["plugin_fit"] = None
    return table, {"per_n_extras": extras, "report": report_extra}, errored, total, stages


def _run_efficiency(config: ExperimentConfig):
    truth = _density_from(config)
    geom = truth.geometry
    dcfg = _debias_config(config)

    # per-n kernels for the pure U-statistic estimators, built once and shared
    pure: dict[int, tuple] = {}
    for n in config.n_grid:
        if config.estimator == "ustat-quadratic":
            level = bandwidth(n, config.smoothness_s, config.dim, "quadratic", config.quadratic_c)
            qcut = _taper_cutoff(level, geom)
            form = multiplication_quadratic_form(_constant_field(geom, 2 * qcut), qcut)
            pure[n] = (form, level)
        elif config.estimator == "ustat-cubic":
            levels = tuple(
                bandwidth(n, config.smoothness_s, config.dim, f"cubic_{j}", config.cubic_c)
                for j in (1, 2, 3)
            )
            ccut = _taper_cutoff(max(levels), geom)
            form = multiplication_cubic_form(_constant_field(geom, 3 * ccut), ccut)
            pure[n] = (form, levels)

    def worker(n, rep, seed):
        ss = sample(truth, n, seed)
        nan = float("nan")
        if config.estimator == "debias":
            rr = debiased_estimate(config.functional, ss, dcfg, seed=seed)
            row = (n, rep, rr.estimate, rr.plugin, rr.variance_proxy, seed)
            return [row], not math.isfinite(rr.estimate)
        form, levels = pure[n]
        if config.estimator == "ustat-quadratic":
            est = estimate_quadratic_form(form, ss, levels)
        else:
            est = estimate_cubic_form(form, ss, levels)
        return [(n, rep, est, nan, nan, seed)], not math.isfinite(est)

    def error_row(n, rep, seed):
        nan = float("nan")
        return (n, rep, nan, nan, nan, seed)

    rows, errored, total, stages = _run_batches(config, worker, error_row)
    table = RiskTable(
        ("n", "replication", "estimate", "plugin", "variance_proxy", "seed"),
        tuple(rows), "estimate",
    )

    narr = np.asarray(table.column("n"), dtype=int)
    est = np.asarray(table.column("estimate"), dtype=float)
    prox = np.asarray(table.column("variance_proxy"), dtype=float)

    def extras(n):
        sel = (narr == n) & np.isfinite(est)
        vals = est[sel]
        pv = prox[(narr == n) & np.isfinite(prox)]
        return {
            "empirical_variance": float(np.var(vals, ddof=1)) if vals.size > 1 else float("nan"),
            "mean_variance_proxy": tree_mean(pv) if pv.size else float("nan"),
        }

    return table, {"per_n_extras": extras}, errored, total, stages


def _run_perturbation(config: ExperimentConfig):
    truth = _density_from(config)
    t0 = time.perf_counter()
    pencil_f = assemble_pencil(truth, config.pencil_cutoff, config.alpha, config.oversample)
    system_f = solve_spectrum(pencil_f)
    contour_f = select_contour(system_f, config.target_index, config.gap, config.nodes)
    proj_f = spectral_projector(system_f, contour_f)
    tilt = _cosine_field(truth.geometry, config.tilt_mode, config.tilt_amplitude)
    stages = {"setup": time.perf_counter() - t0}

    rows = []
    errored = 0
    for eps in config.epsilons:
        t0 = time.perf_counter()
        try:
            shifted = tilted_density(truth, tilt, eps)
            pencil_h = assemble_pencil(shifted, config.pencil_cutoff, config.alpha, config.oversample)
            system_h = solve_spectrum(pencil_h)
            contour_h = select_contour(system_h, config.target_index, config.gap, config.nodes)
            proj_h = spectral_projector(system_h, contour_h)
            d2 = angle_Dq(proj_f, proj_h, 2.0).value
            cut = max(truth.field.freqs.cutoff, shifted.field.freqs.cutoff)
            freqs = frequency_lattice(truth.geometry, cut)
            diff = FourierField(
                freqs,
                _embed_coeffs(shifted.field, freqs) - _embed_coeffs(truth.field, freqs),
                reality_flag=True,
            )
            hnorm = compute_norm(diff, Sobolev(-1.0))
            rows.append((eps, d2, hnorm, d2 / hnorm, d2 / eps))
        except Exception:
            nan = float("nan")
            rows.append((eps, nan, nan, nan, nan))
            errored += 1
        stages[f"eps={eps!r}"] = time.perf_counter() - t0

    table = RiskTable(
        ("epsilon", "d2", "h_minus1_norm", "ratio", "d2_over_epsilon"),
        tuple(rows), "d2",
    )
    ratios = [r[3] for r in rows if math.isfinite(r[3])]
    slopes = sorted(
        ((r[0], r[4]) for r in rows if math.isfinite(r[4])), key=lambda t: t[0]
    )
    drift = float("nan")
    if len(slopes) >= 2:
        drift = abs(slopes[0][1] / slopes[1][1] - 1.0)
    report_extra = {
        "ratio_max_over_min": (max(ratios) / min(ratios)) if ratios else float("nan"),
        "d2_over_eps_drift": drift,
    }
    return table, {"report": report_extra}, errored, len(rows), stages


def _run_spectrum(config: ExperimentConfig):
    truth = _density_from(config)
    t0 = time.perf_counter()
    pencil = assemble_pencil(truth, config.pencil_cutoff, config.alpha, config.oversample)
    system = solve_spectrum(pencil)
    stages = {"solve": time.perf_counter() - t0}
    ids = cluster_ids(system.eigenvalues)
    rows = tuple(
        (i, float(lam), int(cid))
        for i, (lam, cid) in enumerate(zip(system.eigenvalues, ids))
    )
    table = RiskTable(("index", "eigenvalue", "cluster_id"), rows, "eigenvalue")
    report_extra = {"clusters": int(ids[-1]) + 1, "modes": len(system.eigenvalues)}
    try:
        contour = select_contour(system, config.target_index, config.gap, config.nodes)
        report_extra["target_cluster_mean"] = cluster_mean(system, contour)
    except Exception as exc:
        report_extra["target_cluster_mean"] = None
        report_extra["target_flag"] = f"{type(exc).__name__}"
    return table, {"report": report_extra}, 0, len(rows), stages


# --- selftest ----------------------------------------------------------------------


def _conj_symmetrize(arr: np.ndarray, neg: np.ndarray) -> np.ndarray:
    return arr + np.conj(arr[np.ix_(*([neg] * arr.ndim))])


def _check_fourier_round_trip() -> str:
    geom = TorusGeometry(1, (1.0,))
    freqs = frequency_lattice(geom, 8)
    rng = np.random.default_rng(5)
    fld = hermitian_part(FourierField(freqs, rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs))))
    back = analyze(synthesize(fld, 64), 8, real=True)
    dev = float(np.abs(back.coeffs - fld.coeffs).max())
    assert dev <= 1e-10, f"round trip deviates by {dev:.3g}"
    quad = synthesize(fld, 64)
    parseval = abs(fld.l2_norm() ** 2 - float(np.sum(np.abs(quad.values) ** 2) * quad.quad_weight))
    assert parseval <= 1e-10, f"Parseval gap {parseval:.3g}"
    return f"round trip {dev:.2e}, Parseval gap {parseval:.2e}"


def _check_seed_stream() -> str:
    assert splitmix64(0) == 0xE220A8397B1DCDAF, "splitmix64 reference output changed"
    dens = make_density("trig")
    a = sample(dens, 64, seed=7).points
    b = sample(dens, 64, seed=7).points
    assert np.array_equal(a, b), "sampling is not reproducible"
    return "splitmix64 anchor and sampler determinism hold"


def _check_uniform_spectrum() -> str:
    dens = make_density("uniform")
    system = solve_spectrum(assemble_pencil(dens, 16))
    kk = np.sort(np.array([k * k for k in range(-16, 17)], dtype=float))
    target = 4 * math.pi**2 * kk
    dev = float(np.abs(system.eigenvalues - target).max() / (1 + target.max()))
    assert dev <= 1e-10, f"uniform spectrum off by rel {dev:.3g}"
    return f"lambda = 4 pi^2 k^2 to rel {dev:.2e}"


def _check_projector_equivalence() -> str:
    worst = 0.0
    cases = [
        make_density("trig"),
        make_density("gauss-bump", amplitude=0.4),
        make_density("bump-lattice", bump=BumpLatticeSpec(4, 1 / 8, 2.0, (1, -1, 1, -1))),
    ]
    for dens in cases:
        pencil = assemble_pencil(dens, 12)
        system = solve_spectrum(pencil)
        contour = select_contour(system, 1, 20.0)
        a = spectral_projector(system, contour).matrix()
        b = contour_projector(pencil, contour).matrix()
        idem = float(np.linalg.norm(a @ a - a, 2))
        worst = max(worst, float(np.linalg.norm(a - b, 2)), idem)
    assert worst <= 1e-8, f"projector routes disagree by {worst:.3g}"
    return f"contour vs eigen route agree to {worst:.2e} on 3 densities"


def _check_angle_basics() -> str:
    dens = make_density("uniform")
    system = solve_spectrum(assemble_pencil(dens, 4))
    p0 = spectral_projector(system, select_contour(system, 0, 1.0))
    p1 = spectral_projector(system, select_contour(system, 1, 10.0))
    self_zero = angle_Dq(p1, p1, 2.0).value
    assert self_zero <= 1e-9, f"D2(P, P) = {self_zero:.3g}"
    # disjoint eigenspaces: each composition has unit norm, so the angle is 2
    both = angle_Dq(p0, p1, 2.0).value
    assert abs(both - 2.0) <= 1e-9, f"orthogonal-pair angle {both!r}"
    return f"D2 self {self_zero:.2e}, orthogonal pair {both!r}"


def _check_influence() -> str:
    dens = make_density("uniform")
    system = solve_spectrum(assemble_pencil(dens, 4))
    contour = select_contour(system, 1, 10.0)
    influence = mu_first_derivative(system, contour, check=False)
    grid = synthesize(influence.field, 64)
    sup = float(np.abs(grid.values).max())
    assert sup <= 1e-10, f"uniform influence reaches {sup:.3g}"

    trig = make_density("trig")
    system_t = solve_spectrum(assemble_pencil(trig, 12))
    contour_t = select_contour(system_t, 1, 20.0)
    infl = mu_first_derivative(system_t, contour_t, check=False)
    u = _cosine_field(trig.geometry, (2,), 0.2)
    predicted = infl.pair(u)
    mu0 = cluster_mean(system_t, contour_t)

    def mu_at(eps: float) -> float:
        moved = perturb_density(trig, u, eps)
        sysm = solve_spectrum(assemble_pencil(moved, 12))
        return cluster_mean(sysm, select_contour(sysm, 1, 20.0))

    eps = 1e-3
    fd = (mu_at(eps) - mu_at(-eps)) / (2 * eps)
    rel = abs(fd - predicted) / (1 + abs(predicted))
    assert rel <= 1e-4, f"finite difference misses the pairing by rel {rel:.3g}"
    errs = [abs(mu_at(e) - mu0 - e * predicted) for e in (2e-2, 1e-2)]
    slope = math.log(errs[0] / errs[1]) / math.log(2.0)
    assert 1.9 <= slope <= 2.1, f"first-order remainder slope {slope:.3f}"
    return f"uniform sup {sup:.2e}, FD rel {rel:.2e}, remainder slope {slope:.3f}"


def _check_second_form_triple() -> str:
    dens = make_density("uniform")
    system = solve_spectrum(assemble_pencil(dens, 4))
    contour = select_contour(system, 1, 10.0)
    u = _cosine_field(dens.geometry, (1,), 1.0)
    q_pencil = mu_second_form(system, contour, correction_cutoff=2).apply(u)
    q_closed = closed_form_second_uniform((1,), 4).apply(u)
    anchor = 2 * math.pi**2 / 3
    rel_routes = abs(q_pencil - q_closed) / abs(anchor)
    rel_anchor = abs(q_pencil - anchor) / abs(anchor)

    mu0 = cluster_mean(system, contour)

    def mu_at(eps: float) -> float:
        moved = perturb_density(dens, u, eps)
        sysm = solve_spectrum(assemble_pencil(moved, 4))
        return cluster_mean(sysm, select_contour(sysm, 1, 10.0))

    def second_diff(eps: float) -> float:
        return (mu_at(eps) + mu_at(-eps) - 2 * mu0) / eps**2

    # Richardson step removes the eps^2 remainder of the centered second difference
    eps = 2e-2
    second = (4 * second_diff(eps / 2) - second_diff(eps)) / 3
    rel_fd = abs(second - 2 * q_pencil) / abs(2 * anchor)
    assert rel_routes <= 1e-6, f"congruence vs closed form rel {rel_routes:.3g}"
    assert rel_anchor <= 1e-6, f"value off the 2 pi^2/3 anchor by rel {rel_anchor:.3g}"
    assert rel_fd <= 1e-4, f"second difference misses 2Q by rel {rel_fd:.3g}"
    return f"routes {rel_routes:.2e}, anchor {rel_anchor:.2e}, FD {rel_fd:.2e}"


def _check_ustat_exactness() -> str:
    geom = TorusGeometry(1, (1.0,))
    rng = np.random.default_rng(17)
    worst = 0.0
    for order in (2, 3):
        freqs = frequency_lattice(geom, 2)
        p = len(freqs)
        t = rng.standard_normal((p,) * order) + 1j * rng.standard_normal((p,) * order)
        t = _conj_symmetrize(t, freqs.neg_indices())
        perm_avg = np.zeros_like(t)
        for pm in permutations(range(order)):
            perm_avg += np.transpose(t, pm)
        kernel = UStatKernel(order, freqs, perm_avg / math.factorial(order), RAISED_COSINE, (2,) * order)
        for n in (10, 30):
            pts = SampleSet(geom, rng.uniform(0, 1, (n, 1)), n, float("nan"))
            dev = abs(ustat(kernel, pts, "fast") - ustat(kernel, pts, "naive"))
            worst = max(worst, dev)
    assert worst <= 1e-10, f"fast and naive U-statistics disagree by {worst:.3g}"
    return f"fast vs naive max deviation {worst:.2e}"


def _check_hoeffding_and_collapse() -> str:
    geom = TorusGeometry(1, (1.0,))
    dens = make_density("trig")
    rng = np.random.default_rng(23)
    pts = sample(dens, 7, seed=23)
    cf = frequency_lattice(geom, 2)
    raw = rng.standard_normal((len(cf),) * 3)
    sym = np.zeros_like(raw)
    for pm in permutations(range(3)):
        sym += raw.transpose(pm)
    sym = _conj_symmetrize(sym.astype(complex), cf.neg_indices())

    def trilinear(*vecs):
        out = sym
        for v in vecs:
            out = np.tensordot(out, v, axes=([0], [0]))
        return complex(out)

    decomp = hoeffding_terms(trilinear, pts, dens, 3, 2)
    assert decomp.residual <= 1e-10 * (1.0 + abs(decomp.direct)), (
        f"Hoeffding identity residual {decomp.residual:.3g}"
    )

    form = multiplication_cubic_form(_constant_field(geom, 6), 2)
    collapsed = cubic_kernel(form, (4, 4, 4))
    mult = RAISED_COSINE.mode_multipliers(form.freqs, 4)
    plain = form.tensor * mult[:, None, None] * mult[None, :, None] * mult[None, None, :]
    dev = float(np.abs(collapsed.tensor - plain).max())
    assert dev <= 1e-10, f"equal-level dressing deviates from the cube by {dev:.3g}"
    return f"Hoeffding residual {decomp.residual:.2e}, collapse deviation {dev:.2e}"


def _check_fit_and_config() -> str:
    fit = fit_rate([(n, 3.0 * n**-0.5) for n in (64, 128, 256, 512)])
    assert abs(fit.slope + 0.5) <= 1e-12, f"exact synthetic slope {fit.slope!r}"
    cfg = ExperimentConfig(
        kind="eigenspace-rate", seed=11, replications=3, n_grid=(64, 128, 256),
        q_list=(2.0, 4.0), epsilons=(0.02, 0.01), split="pow:0.5",
    )
    back = config_from_ini(config_to_ini(cfg))
    assert back == cfg, "config does not round-trip through INI"
    return f"synthetic slope error {abs(fit.slope + 0.5):.2e}, config round-trips"


_SELFTEST_CHECKS = (
    ("fourier-round-trip", _check_fourier_round_trip),
    ("seed-stream", _check_seed_stream),
    ("uniform-spectrum", _check_uniform_spectrum),
    ("projector-equivalence", _check_projector_equivalence),
    ("angle-basics", _check_angle_basics),
    ("influence-derivative", _check_influence),
    ("second-form-triple", _check_second_form_triple),
    ("ustat-exactness", _check_ustat_exactness),
    ("hoeffding-collapse", _check_hoeffding_and_collapse),
    ("fit-and-config", _check_fit_and_config),
)


def _run_selftest(config: ExperimentConfig):
    checks = []
    failures = 0
    stages = {}
    for name, fn in _SELFTEST_CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn()
            checks.append({"name": name, "passed": True, "detail": detail})
        except Exception as exc:
            failures += 1
            checks.append({"name": name, "passed": False, "detail": f"{type(exc).__name__}: {exc}"})
        stages[name] = time.perf_counter() - t0
    report_extra = {"checks": checks, "failures": failures}
    return None, {"report": report_extra}, failures, len(checks), stages


# --- emission ----------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentResult:
    """Everything a run produced, with the paths of the emitted files."""

    config: ExperimentConfig
    table: RiskTable | None
    fit: RateFit | None
    report: dict
    files: tuple[str, ...]
    error_fraction: float
    ok: bool


def _points_csv(per_n: list[dict]) -> str:
    out = io.StringIO()
    out.write("n, mean, median, stderr, count, errors\n")
    for entry in per_n:
        out.write(
            ", ".join(
                _cell(entry[k]) for k in ("n", "mean", "median", "stderr", "count", "errors")
            )
            + "\n"
        )
    return out.getvalue()


def _render_plot(path: str, config: ExperimentConfig, table: RiskTable | None,
                 per_n: list[dict] | None, fit: RateFit | None) -> None:
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "torspec"
    from matplotlib.backends.backend_svg import FigureCanvasSVG
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5.2, 3.6))
    FigureCanvasSVG(fig)
    ax = fig.add_subplot(111)

    if config.kind == "spectrum" and table is not None:
        ax.plot(table.column("index"), table.column("eigenvalue"), marker=".", lw=1.0)
        ax.set_xlabel("index")
        ax.set_ylabel("eigenvalue")
    elif config.kind == "perturbation-bound" and table is not None:
        eps = table.column("epsilon")
        ax.plot(eps, table.column("ratio"), marker="o", label="D2 / H^-1 norm")
        ax.plot(eps, table.column("d2_over_epsilon"), marker="s", label="D2 / eps")
        ax.set_xscale("log")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("ratio")
        ax.legend(fontsize=8)
    elif per_n:
        ns = [e["n"] for e in per_n]
        means = [e["mean"] for e in per_n]
        errs = [e["stderr"] for e in per_n]
        ax.errorbar(ns, means, yerr=errs, marker="o", lw=1.0, capsize=3, label="mean risk")
        if fit is not None:
            xs = np.array(sorted(ns), dtype=float)
            ax.plot(xs, np.exp(fit.intercept) * xs**fit.slope, "--",
                    label=f"fit slope {fit.slope:.3f}")
        if len(ns) > 1:
            ax.set_xscale("log")
            # all-errored runs leave no positive means; log scale would refuse them
            if any(math.isfinite(m) and m > 0 for m in means):
                ax.set_yscale("log")
        ax.set_xlabel("n")
        ax.set_ylabel(table.metric if table is not None else "risk")
        ax.legend(fontsize=8)
    else:
        ax.text(0.5, 0.5, "no plot data", ha="center", va="center")

    ax.set_title(config.kind)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})


_RUNNERS = {
    "selftest": _run_selftest,
    "spectrum": _run_spectrum,
    "density-rate": _run_density_rate,
    "eigenspace-rate": _run_eigenspace_rate,
    "eigenvalue-rate": _run_eigenvalue_rate,
    "efficiency": _run_efficiency,
    "perturbation-bound": _run_perturbation,
}

_RATE_KINDS = ("density-rate", "eigenspace-rate", "eigenvalue-rate", "efficiency")


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run one configured experiment and write its file set to config.out_dir.

    Returns the in-memory result; raises ExperimentError after writing all
    files when more than 20 percent of replications errored.  Selftest failures
    set ok=False without raising, so the CLI can report per-check outcomes.
    """
    t_start = time.perf_counter()
    table, extra, errored, total, stages = _RUNNERS[config.kind](config)

    per_n = None
    fit = None
    if config.kind in _RATE_KINDS and table is not None:
        per_n = _per_n_summary(table, extra.get("per_n_extras"))
        try:
            fit = fit_rate(table)
        except DegenerateFitError:
            fit = None

    error_fraction = errored / total if total else 0.0
    report = {
        "kind": config.kind,
        "rows": len(table.rows) if table is not None else 0,
        "replications_total": total,
        "replications_errored": errored,
        "error_fraction": error_fraction,
        "metric": table.metric if table is not None else None,
        "per_n": per_n,
        "fit": fit.to_dict() if fit is not None else None,
        "expected": _expected_rates(config),
        "config": asdict(config),
    }
    report.update(extra.get("report", {}))

    os.makedirs(config.out_dir, exist_ok=True)
    files = []

    csv_name = "spectrum.csv" if config.kind == "spectrum" else "risk.csv"
    if table is not None:
        path = os.path.join(config.out_dir, csv_name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(table.to_csv())
        files.append(path)

    if per_n is not None:
        path = os.path.join(config.out_dir, "points.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_points_csv(per_n))
        files.append(path)

    path = os.path.join(config.out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, indent=2) + "\n")
    files.append(path)

    if config.kind != "selftest":
        path = os.path.join(config.out_dir, "plot.svg")
        _render_plot(path, config, table, per_n, fit)
        files.append(path)

    stages["emit"] = time.perf_counter() - t_start - sum(stages.values())
    path = os.path.join(config.out_dir, "timing.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"total_seconds": time.perf_counter() - t_start, "stages": stages}, indent=2) + "\n")
    files.append(path)

    ok = error_fraction <= ERROR_BUDGET if config.kind != "selftest" else errored == 0
    result = ExperimentResult(config, table, fit, report, tuple(files), error_fraction, ok)
    if config.kind != "selftest" and error_fraction > ERROR_BUDGET:
        raise ExperimentError(
            f"{errored} of {total} replications failed "
            f"({100 * error_fraction:.1f}% > {100 * ERROR_BUDGET:.0f}% budget); outputs in {config.out_dir}"
        )
    return result
