"""Geometry, lattice, transform and norm oracles.

Frozen values below come from hand calculations with the coefficient convention
u_k = int u exp(-i omega_k . x) dx on the volume-one torus:

  cos(2 pi x) has u_{+-1} = 1/2, L2 norm 1/sqrt(2), H^1 norm sqrt((1+4 pi^2)/2),
  H^{-1} norm sqrt(0.5/(1+4 pi^2)), L1 norm 2/pi, L4 norm (3/8)^{1/4};
  (1 + 0.5 cos)^2 = 1.125 + cos + 0.0625 cos(4 pi x).
"""

import math

import numpy as np
import pytest

from torspec.torus import (
    Besov,
    FourierField,
    FrequencySet,
    GeometryError,
    GridField,
    Lp,
    RAISED_COSINE,
    ResolutionError,
    Sobolev,
    TorusGeometry,
    analyze,
    compute_norm,
    field_from_csv,
    field_to_csv,
    frequency_lattice,
    hermitian_part,
    point_mass,
    resample_pointwise,
    synthesize,
    taper_projection,
    unit_torus,
)

PI2 = math.pi**2


def cosine_field(cutoff=4, amp=0.5, mode=1, mean=0.0):
    fr = frequency_lattice(unit_torus(1), cutoff)
    c = np.zeros(len(fr), dtype=complex)
    c[fr.index_of([0])] = mean
    c[fr.index_of([mode])] = amp / 2
    c[fr.index_of([-mode])] = amp / 2
    return FourierField(fr, c, reality_flag=True)


def random_real_field(freqs, seed, decay=0.0):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs))
    if decay:
        c = c * (1.0 + freqs.lam) ** (-decay / 2.0)
    return hermitian_part(FourierField(freqs, c))


class TestGeometry:
    def test_volume(self):
        assert TorusGeometry(2, (2.0, 3.0)).volume == 6.0
        assert unit_torus(3).volume == 1.0

    def test_invalid(self):
        with pytest.raises(GeometryError):
            TorusGeometry(1, (0.0,))
        with pytest.raises(GeometryError):
            TorusGeometry(4, (1.0,) * 4)
        with pytest.raises(GeometryError):
            TorusGeometry(2, (1.0,))


class TestLattice:
    def test_unit_1d(self):
        fr = frequency_lattice(unit_torus(1), 1)
        assert sorted(fr.kvec.ravel().tolist()) == [-1, 0, 1]
        assert fr.kvec[0].tolist() == [0]
        for k in (-1, 0, 1):
            i = fr.index_of([k])
            assert np.isclose(fr.lam[i], 4 * PI2 * k * k)
            assert np.isclose(fr.omega[i, 0], 2 * np.pi * k)

    def test_rescaled(self):
        fr = frequency_lattice(TorusGeometry(1, (2.0,)), 3)
        i = fr.index_of([1])
        assert np.isclose(fr.omega[i, 0], np.pi)
        assert np.isclose(fr.lam[i], PI2)

    def test_2d_count_and_neg(self):
        fr = frequency_lattice(unit_torus(2), 3)
        assert len(fr) == 49
        neg = fr.neg_indices()
        assert np.array_equal(fr.kvec[neg], -fr.kvec)
        assert np.array_equal(neg[neg], np.arange(len(fr)))
        assert neg[0] == 0

    def test_index_of_matches_enumeration(self):
        fr = frequency_lattice(unit_torus(3), 2)
        for i in range(0, len(fr), 13):
            assert fr.index_of(fr.kvec[i]) == i
        with pytest.raises(GeometryError):
            fr.index_of([3, 0, 0])

    def test_cutoff_zero(self):
        fr = frequency_lattice(unit_torus(2), 0)
        assert len(fr) == 1
        assert fr.lam[0] == 0.0


class TestTransforms:
    def test_round_trip_1d(self):
        fr = frequency_lattice(unit_torus(1), 4)
        u = random_real_field(fr, seed=7)
        back = analyze(synthesize(u, 16), 4)
        assert np.max(np.abs(back.coeffs - u.coeffs)) < 1e-12
        assert back.reality_flag

    def test_round_trip_2d_complex(self):
        fr = frequency_lattice(unit_torus(2), 3)
        rng = np.random.default_rng(3)
        u = FourierField(fr, rng.standard_normal(len(fr)) + 1j * rng.standard_normal(len(fr)))
        back = analyze(synthesize(u, 10), 3)
        assert np.max(np.abs(back.coeffs - u.coeffs)) < 1e-12
        assert not back.reality_flag

    def test_single_mode_values(self):
        fr = frequency_lattice(unit_torus(1), 2)
        c = np.zeros(len(fr), dtype=complex)
        c[fr.index_of([2])] = 1.0
        g = synthesize(FourierField(fr, c), 8)
        x = g.axes()[0]
        assert np.allclose(g.values, np.exp(2j * np.pi * 2 * x), atol=1e-14)

    def test_aliasing_guard(self):
        fr = frequency_lattice(unit_torus(1), 4)
        u = random_real_field(fr, seed=1)
        with pytest.raises(ResolutionError):
            synthesize(u, 9)
        g = synthesize(u, 32)
        with pytest.raises(ResolutionError):
            analyze(g, 16)

    def test_parseval(self):
        fr = frequency_lattice(unit_torus(2), 4)
        u = random_real_field(fr, seed=11)
        g = synthesize(u, 12)
        quad = np.sum(np.abs(g.values) ** 2) * g.quad_weight
        assert np.isclose(quad, np.sum(np.abs(u.coeffs) ** 2), rtol=1e-12)

    def test_evaluate_matches_grid(self):
        fr = frequency_lattice(unit_torus(2), 3)
        u = random_real_field(fr, seed=5)
        g = synthesize(u, 8)
        ax = g.axes()
        pts = np.array([[ax[0][2], ax[1][5]], [ax[0][7], ax[1][0]]])
        vals = u.evaluate(pts)
        assert np.allclose(vals, [g.values[2, 5].real, g.values[7, 0].real], atol=1e-12)

    def test_mean(self):
        assert cosine_field(mean=3.0).mean() == pytest.approx(3.0)

    def test_reality_flag_enforced(self):
        fr = frequency_lattice(unit_torus(1), 1)
        bad = np.array([0.0, 1.0, 0.5], dtype=complex)  # u_{-1} != conj(u_1)
        with pytest.raises(ValueError):
            FourierField(fr, bad, reality_flag=True)
        assert hermitian_part(FourierField(fr, bad)).reality_flag


class TestNorms:
    def test_cosine_sobolev(self):
        u = cosine_field(amp=1.0)
        assert compute_norm(u, Sobolev(0.0)) == pytest.approx(1 / math.sqrt(2), rel=1e-13)
        assert compute_norm(u, Sobolev(1.0)) == pytest.approx(math.sqrt((1 + 4 * PI2) / 2), rel=1e-13)
        assert compute_norm(u, Sobolev(1.0)) == pytest.approx(4.49880081823798, rel=1e-10)
        assert compute_norm(u, Sobolev(-1.0)) == pytest.approx(math.sqrt(0.5 / (1 + 4 * PI2)), rel=1e-13)

    def test_cosine_lp(self):
        u = cosine_field(amp=1.0)
        assert compute_norm(u, Lp(2.0)) == pytest.approx(1 / math.sqrt(2), rel=1e-13)
        assert compute_norm(u, Lp(1.0), grid_resolution=4096) == pytest.approx(2 / math.pi, rel=1e-6)
        assert compute_norm(u, Lp(4.0)) == pytest.approx((3 / 8) ** 0.25, rel=1e-12)
        assert compute_norm(u, Lp(math.inf)) == pytest.approx(1.0, rel=1e-12)

    def test_sobolev_p4(self):
        # multiplier lifts cos to sqrt(1+4pi^2) cos, then L4
        u = cosine_field(amp=1.0)
        expect = math.sqrt(1 + 4 * PI2) * (3 / 8) ** 0.25
        assert compute_norm(u, Sobolev(1.0, p=4.0)) == pytest.approx(expect, rel=1e-12)

    def test_besov_single_shell(self):
        # modes +-1 sit in shell j=2 since sqrt(1+4pi^2) ~ 6.36 in [4, 8)
        u = cosine_field(amp=1.0)
        for q in (1.0, 2.0, math.inf):
            got = compute_norm(u, Besov(0.5, 2.0, q))
            assert got == pytest.approx(2.0 / math.sqrt(2), rel=1e-12)
        const = cosine_field(amp=0.0, mean=1.0)
        assert compute_norm(const, Besov(1.5, 2.0, 1.0)) == pytest.approx(1.0, rel=1e-12)

    def test_besov_two_shells(self):
        u = cosine_field(cutoff=3, amp=1.0)  # shell 2
        c = u.coeffs.copy()
        c[u.freqs.index_of([3])] = 0.5  # |omega| = 6pi, modulus ~18.9, shell 4
        c[u.freqs.index_of([-3])] = 0.5
        v = FourierField(u.freqs, c, reality_flag=True)
        b1 = 2.0**(2 * 0.5) * (1 / math.sqrt(2))
        b2 = 2.0**(4 * 0.5) * (1 / math.sqrt(2))
        assert compute_norm(v, Besov(0.5, 2.0, 1.0)) == pytest.approx(b1 + b2, rel=1e-12)
        assert compute_norm(v, Besov(0.5, 2.0, math.inf)) == pytest.approx(b2, rel=1e-12)

    def test_zero_field(self):
        z = cosine_field(amp=0.0)
        for spec in (Lp(1.0), Lp(math.inf), Sobolev(2.0), Besov(0.5, 2.0, 1.0)):
            assert compute_norm(z, spec) == 0.0

    def test_lp_monotone(self):
        fr = frequency_lattice(unit_torus(1), 4)
        u = random_real_field(fr, seed=23, decay=1.0)
        vals = [compute_norm(u, Lp(p), grid_resolution=512) for p in (1.0, 2.0, 4.0, 8.0, math.inf)]
        for lo, hi in zip(vals, vals[1:]):
            assert lo <= hi + 1e-9

    def test_invalid_p(self):
        with pytest.raises(Exception):
            Lp(0.5)


class TestProjectionFamily:
    def test_profile_values(self):
        psi = RAISED_COSINE.profile
        assert psi(np.array([0.0, 0.5, 1.0]))[0] == 1.0
        assert np.allclose(psi(np.array([0.0, 0.5, 1.0])), 1.0)
        assert psi(np.array([1.5]))[0] == pytest.approx(0.5)
        assert np.allclose(psi(np.array([2.0, 3.0, 10.0])), 0.0)
        r = np.linspace(0, 4, 400)
        assert np.all(psi(r) >= 0) and np.all(psi(r) <= 1)
        assert np.all(np.diff(psi(r)) <= 1e-14)

    def test_identity_on_core_band(self):
        fr = frequency_lattice(unit_torus(1), 2)
        u = random_real_field(fr, seed=2)
        # max |omega| = 4 pi ~ 12.57 < 13 so pi_13 is the identity on the band
        proj = taper_projection(u, RAISED_COSINE, 13)
        assert np.array_equal(proj.coeffs, u.coeffs)

    def test_annihilates_far_band(self):
        fr = frequency_lattice(unit_torus(1), 2)
        u = random_real_field(fr, seed=2)
        proj = taper_projection(u, RAISED_COSINE, 3)
        # |omega_{+-1}| = 2 pi > 6 and |omega_{+-2}| = 4 pi > 6: only k=0 survives
        assert proj.coeffs[0] == u.coeffs[0]
        assert np.max(np.abs(proj.coeffs[1:])) == 0.0

    def test_point_mass_projection(self):
        fr = frequency_lattice(unit_torus(1), 8)
        p = taper_projection([0.3], RAISED_COSINE, 4, freqs=fr)
        assert p.coeffs[0] == pytest.approx(1.0)  # kernel integrates to one
        base = point_mass(fr, [0.3])
        mult = RAISED_COSINE.mode_multipliers(fr, 4)
        assert np.allclose(p.coeffs, base.coeffs * mult)
        assert p.reality_flag is True

    def test_tail_decay_rate(self):
        # coefficients of an H^2 field with lam^{-1} envelope: tail ~ D^{-2.1}
        fr = frequency_lattice(unit_torus(1), 256)
        absk = np.abs(fr.kvec[:, 0])
        c = (1.0 + fr.lam) ** (-1.0) * (1.0 + absk) ** (-0.6)
        u = FourierField(fr, c.astype(complex), reality_flag=True)
        levels = np.array([8, 16, 32, 64])
        tails = []
        for d_level in levels:
            mult = RAISED_COSINE.mode_multipliers(fr, int(d_level))
            tails.append(u.with_coeffs(u.coeffs * (1 - mult)).l2_norm())
        slope = np.polyfit(np.log(levels), np.log(tails), 1)[0]
        assert slope <= -1.9

    def test_kernel_norm_growth(self):
        # sup_x ||pi_D delta_x||_{L2} should scale like D^{d/2}
        for dim in (1, 2):
            fr = frequency_lattice(unit_torus(dim), 16 if dim == 1 else 12)
            levels = np.array([8, 16, 32]) if dim == 2 else np.array([4, 8, 16, 32])
            norms = []
            for d_level in levels:
                mult = RAISED_COSINE.mode_multipliers(fr, int(d_level))
                assert mult[np.sqrt(fr.lam) >= 2 * d_level].max(initial=0.0) == 0.0
                norms.append(math.sqrt(float(np.sum(mult**2))))
            slope = np.polyfit(np.log(levels), np.log(norms), 1)[0]
            assert abs(slope - dim / 2) < 0.15

    def test_level_validation(self):
        fr = frequency_lattice(unit_torus(1), 2)
        with pytest.raises(ValueError):
            RAISED_COSINE.mode_multipliers(fr, 0)


class TestPointwiseResample:
    def test_square_of_cosine_density(self):
        f = cosine_field(cutoff=1, amp=0.5, mean=1.0)
        sq = resample_pointwise(f, np.square, cutoff=2)
        fr = sq.freqs
        assert sq.coeffs[fr.index_of([0])] == pytest.approx(1.125, abs=1e-13)
        assert sq.coeffs[fr.index_of([1])] == pytest.approx(0.5, abs=1e-13)
        assert sq.coeffs[fr.index_of([2])] == pytest.approx(0.0625, abs=1e-13)
        assert sq.reality_flag

    def test_power_alpha(self):
        # f^0 = 1 regardless of f
        f = cosine_field(cutoff=1, amp=0.5, mean=1.0)
        one = resample_pointwise(f, lambda v: v**0.0, cutoff=1)
        assert one.coeffs[0] == pytest.approx(1.0, abs=1e-13)
        assert np.max(np.abs(one.coeffs[1:])) < 1e-13


class TestSerialization:
    def test_round_trip_bytes(self):
        fr = frequency_lattice(unit_torus(2), 2)
        u = random_real_field(fr, seed=9)
        txt = field_to_csv(u)
        back = field_from_csv(txt)
        assert back.freqs.cutoff == 2
        assert back.geometry.side_lengths == (1.0, 1.0)
        assert np.array_equal(back.coeffs, u.coeffs)
        assert field_to_csv(back) == txt
        assert back.reality_flag

    def test_complex_field_flagged(self):
        fr = frequency_lattice(unit_torus(1), 1)
        u = FourierField(fr, np.array([0.0, 1.0, 0.5j]))
        back = field_from_csv(field_to_csv(u))
        assert not back.reality_flag
        assert np.array_equal(back.coeffs, u.coeffs)

    def test_grid_field_validation(self):
        with pytest.raises(ValueError):
            GridField(unit_torus(2), 4, np.zeros((4, 5)))
