"""Acceptance gate: twelve pinned criteria, one test (one pass/fail line) each.

Criteria 1-5 are exact numerical oracles exercised directly against the
library.  Criteria 6-11 run the shipped experiment configs end to end with
the output directory redirected into tmp, so the configs in configs/ are the
single source of truth for the Monte Carlo settings.  Criterion 12 reruns a
shipped config and compares risk-CSV bytes.

Tolerances and runtime caps are pinned constants; do not loosen them to make
a failing build green.
"""

import dataclasses
import math
import os
import time
from itertools import permutations

import numpy as np

from torspec.densities import BumpLatticeSpec, SampleSet, make_density, sample
from torspec.functionals import (
    UStatKernel,
    closed_form_second_uniform,
    cubic_kernel,
    hoeffding_terms,
    mu_first_derivative,
    mu_second_form,
    multiplication_cubic_form,
    perturb_density,
    ustat,
)
from torspec.harness import load_config, run_experiment
from torspec.pencil import assemble_pencil, solve_spectrum
from torspec.projectors import (
    cluster_mean,
    contour_projector,
    select_contour,
    spectral_projector,
)
from torspec.torus import (
    RAISED_COSINE,
    FourierField,
    TorusGeometry,
    frequency_lattice,
    synthesize,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")
GEOM = TorusGeometry(1, (1.0,))
FOUR_PI_SQ = 4 * math.pi**2


def run_shipped(name, tmp_path, **overrides):
    config = load_config(os.path.join(CONFIG_DIR, name))
    config = dataclasses.replace(config, out_dir=str(tmp_path / name.removesuffix(".ini")), **overrides)
    return run_experiment(config)


def cos_direction(k: int, amplitude: float) -> FourierField:
    cf = frequency_lattice(GEOM, abs(k))
    c = np.zeros(len(cf), dtype=complex)
    c[cf.index_of([k])] = amplitude / 2
    c[cf.index_of([-k])] = amplitude / 2
    return FourierField(cf, c, reality_flag=True)


def conjugate_symmetrize(arr: np.ndarray, neg: np.ndarray) -> np.ndarray:
    idx = np.ix_(*([neg] * arr.ndim))
    return arr + np.conj(arr[idx])


def test_01_uniform_spectrum_matches_4pi2_k2():
    t0 = time.perf_counter()
    system = solve_spectrum(assemble_pencil(make_density("uniform"), 16))
    kk = np.sort(np.array([k * k for k in range(-16, 17)], dtype=float))
    target = FOUR_PI_SQ * kk
    rel = float(np.abs(system.eigenvalues - target).max() / (1 + target.max()))
    assert rel <= 1e-10
    assert time.perf_counter() - t0 < 1.0


def test_02_contour_and_eigen_projectors_agree():
    t0 = time.perf_counter()
    cases = [
        make_density("trig"),
        make_density("gauss-bump", amplitude=0.4),
        make_density("bump-lattice", bump=BumpLatticeSpec(4, 1 / 8, 2.0, (1, -1, 1, -1))),
    ]
    worst = 0.0
    for dens in cases:
        pencil = assemble_pencil(dens, 12)
        system = solve_spectrum(pencil)
        contour = select_contour(system, 1, 20.0)
        a = spectral_projector(system, contour).matrix()
        b = contour_projector(pencil, contour).matrix()
        worst = max(worst, float(np.linalg.norm(a - b, 2)))
    assert worst <= 1e-8
    assert time.perf_counter() - t0 < 10.0


def test_03_first_derivative_vanishes_and_matches_fd():
    t0 = time.perf_counter()
    uniform = make_density("uniform")
    system = solve_spectrum(assemble_pencil(uniform, 4))
    influence = mu_first_derivative(system, select_contour(system, 1, 10.0), check=False)
    sup = float(np.abs(synthesize(influence.field, 64).values).max())
    assert sup <= 1e-10

    trig = make_density("trig")
    system_t = solve_spectrum(assemble_pencil(trig, 12))
    contour_t = select_contour(system_t, 1, 20.0)
    infl = mu_first_derivative(system_t, contour_t, check=False)
    u = cos_direction(2, 0.2)
    predicted = infl.pair(u)
    mu0 = cluster_mean(system_t, contour_t)

    def mu_at(eps):
        moved = perturb_density(trig, u, eps)
        sysm = solve_spectrum(assemble_pencil(moved, 12))
        return cluster_mean(sysm, select_contour(sysm, 1, 20.0))

    fd = (mu_at(1e-3) - mu_at(-1e-3)) / 2e-3
    assert abs(fd - predicted) / (1 + abs(predicted)) <= 1e-4
    errs = [abs(mu_at(e) - mu0 - e * predicted) for e in (2e-2, 1e-2)]
    slope = math.log(errs[0] / errs[1]) / math.log(2.0)
    assert 1.9 <= slope <= 2.1
    assert time.perf_counter() - t0 < 10.0


def test_04_second_derivative_routes_agree():
    t0 = time.perf_counter()
    dens = make_density("uniform")
    system = solve_spectrum(assemble_pencil(dens, 4))
    contour = select_contour(system, 1, 10.0)
    u = cos_direction(1, 1.0)
    q_pencil = mu_second_form(system, contour, correction_cutoff=2).apply(u)
    q_closed = closed_form_second_uniform((1,), 4).apply(u)
    anchor = 2 * math.pi**2 / 3
    assert abs(q_pencil - q_closed) / abs(anchor) <= 1e-4
    assert abs(q_pencil - anchor) / abs(anchor) <= 1e-4

    mu0 = cluster_mean(system, contour)

    def mu_at(eps):
        moved = perturb_density(dens, u, eps)
        sysm = solve_spectrum(assemble_pencil(moved, 4))
        return cluster_mean(sysm, select_contour(sysm, 1, 10.0))

    def second_diff(eps):
        return (mu_at(eps) + mu_at(-eps) - 2 * mu0) / eps**2

    # Richardson pair removes the quartic remainder of the centered difference
    second = (4 * second_diff(1e-2) - second_diff(2e-2)) / 3
    assert abs(second - 2 * q_pencil) / abs(2 * anchor) <= 1e-4
    assert time.perf_counter() - t0 < 30.0


def test_05_ustat_fast_naive_hoeffding_collapse():
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    worst = 0.0
    for order in (2, 3):
        cf = frequency_lattice(GEOM, 2)
        p = len(cf)
        raw = rng.standard_normal((p,) * order) + 1j * rng.standard_normal((p,) * order)
        raw = conjugate_symmetrize(raw, cf.neg_indices())
        sym = np.zeros_like(raw)
        for pm in permutations(range(order)):
            sym += np.transpose(raw, pm)
        kernel = UStatKernel(order, cf, sym / math.factorial(order), RAISED_COSINE, (2,) * order)
        for n in (10, 30):
            pts = SampleSet(GEOM, rng.uniform(0, 1, (n, 1)), n, float("nan"))
            worst = max(worst, abs(ustat(kernel, pts, "fast") - ustat(kernel, pts, "naive")))
    assert worst <= 1e-10

    trig = make_density("trig")
    pts = sample(trig, 7, seed=23)
    cf = frequency_lattice(GEOM, 2)
    raw3 = np.random.default_rng(23).standard_normal((len(cf),) * 3)
    sym3 = np.zeros_like(raw3)
    for pm in permutations(range(3)):
        sym3 += raw3.transpose(pm)
    sym3 = conjugate_symmetrize(sym3.astype(complex), cf.neg_indices())

    def trilinear(*vecs):
        out = sym3
        for v in vecs:
            out = np.tensordot(out, v, axes=([0], [0]))
        return complex(out)

    decomp = hoeffding_terms(trilinear, pts, trig, 3, 2)
    assert decomp.residual <= 1e-10

    ones = np.zeros(len(frequency_lattice(GEOM, 6)), dtype=complex)
    ones[0] = 1.0
    form = multiplication_cubic_form(FourierField(frequency_lattice(GEOM, 6), ones, reality_flag=True), 2)
    collapsed = cubic_kernel(form, (4, 4, 4))
    mult = RAISED_COSINE.mode_multipliers(form.freqs, 4)
    plain = form.tensor * mult[:, None, None] * mult[None, :, None] * mult[None, None, :]
    assert float(np.abs(collapsed.tensor - plain).max()) <= 1e-10
    assert time.perf_counter() - t0 < 30.0


def test_06_integral_functionals_hit_targets(tmp_path):
    t0 = time.perf_counter()
    for name, target in (("quadratic-unbiased.ini", 1.125), ("cubic-unbiased.ini", 1.375)):
        res = run_shipped(name, tmp_path)
        per = res.report["per_n"][0]
        se = math.sqrt(per["empirical_variance"] / per["count"])
        assert abs(per["mean"] - target) <= 3 * se, name
        assert res.error_fraction == 0.0, name
    assert time.perf_counter() - t0 < 300.0


def test_07_debiased_variance_near_efficient_bound(tmp_path):
    t0 = time.perf_counter()
    res = run_shipped("efficiency.ini", tmp_path)
    per = res.report["per_n"][0]
    bound = 0.4375 / 4096
    assert abs(per["empirical_variance"] / bound - 1.0) <= 0.25
    assert time.perf_counter() - t0 < 300.0


def test_08_density_risk_slope(tmp_path):
    t0 = time.perf_counter()
    res = run_shipped("density-rate.ini", tmp_path)
    assert res.ok
    assert abs(res.fit.slope + 0.4) <= 0.12
    assert time.perf_counter() - t0 < 600.0


def test_09_eigenspace_risk_slope_and_rank_recovery(tmp_path):
    t0 = time.perf_counter()
    res = run_shipped("eigenspace-rate.ini", tmp_path)
    assert res.ok
    assert abs(res.fit.slope + 0.5) <= 0.15
    for per in res.report["per_n"]:
        if per["n"] >= 2048:
            assert per["rank_recovery"] >= 0.95, per
    assert time.perf_counter() - t0 < 1800.0


def test_10_eigenvalue_debias_slope_and_paired_gain(tmp_path):
    t0 = time.perf_counter()
    res = run_shipped("eigenvalue-rate.ini", tmp_path)
    assert res.ok
    assert abs(res.fit.slope + 0.5) <= 0.15
    paired = res.report["paired_largest_n"]
    assert paired["gain_sigma"] >= 3.0
    top = res.report["per_n"][-1]
    assert top["rmse"] <= top["plugin_rmse"]
    assert time.perf_counter() - t0 < 1800.0


def test_11_perturbation_ratio_bounded_and_stable(tmp_path):
    t0 = time.perf_counter()
    res = run_shipped("perturbation-bound.ini", tmp_path)
    assert res.report["ratio_max_over_min"] <= 3.0
    assert res.report["d2_over_eps_drift"] <= 0.10
    assert time.perf_counter() - t0 < 120.0


def test_12_reruns_are_byte_identical(tmp_path):
    first = run_shipped("density-rate.ini", tmp_path / "a")
    second = run_shipped("density-rate.ini", tmp_path / "b")
    csv_a = open(os.path.join(first.config.out_dir, "risk.csv"), "rb").read()
    csv_b = open(os.path.join(second.config.out_dir, "risk.csv"), "rb").read()
    assert csv_a == csv_b
    assert first.table.to_csv() == second.table.to_csv()
