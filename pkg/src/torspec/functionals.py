"""Estimators for smooth functionals of a sampled density.

Covers U-statistics of orders 1 to 3 with fast symmetric-function identities,
quadratic and multiscale cubic projection estimators, first and second Frechet
derivatives of the cluster-mean eigenvalue functional, the efficient influence
function, and the sample-splitting debiasing pipeline built from all of these.

Coefficient conventions follow the rest of the package: u_k = int u e^{-i w_k x},
so int u v = (1/V) sum_k u_k v_{-k}.  A "direction" is a real mean-zero field;
forms are stored as raw-bilinear dense tensors over coefficient vectors, with
taper multipliers folded into the tensor so per-sample vectors stay plain
(optionally centered) point-mass coefficients.
"""

import json
import math
from dataclasses import dataclass, replace
from itertools import combinations, permutations

import numpy as np

from .densities import (
    ConfigError,
    DensityModel,
    ModelClassError,
    SampleSet,
    _check_grid_size,
    bandwidth,
    estimate_density,
)
from .pencil import Contour, EigenSystem, assemble_pencil, solve_spectrum
from .projectors import EmptyContourError, GapViolationError, cluster_mean, select_contour
from .torus import (
    RAISED_COSINE,
    FourierField,
    FrequencySet,
    GridField,
    ProjectionFamily,
    ResolutionError,
    analyze,
    frequency_lattice,
    hermitian_part,
    resample_pointwise,
    synthesize,
    unit_torus,
)


class InstabilityError(RuntimeError):
    """Cluster rank or finite-difference behavior changed under a probe perturbation."""


class ConditioningError(RuntimeError):
    """Cluster and exterior spectrum too close for second-order perturbation solves."""


class InsufficientSampleError(ValueError):
    """Fewer samples than the order of the requested U-statistic."""


# --- coefficient plumbing ---------------------------------------------------


def _embed_coeffs(field: FourierField, freqs: FrequencySet) -> np.ndarray:
    """Coefficients of `field` gathered on the lattice `freqs`.

    Modes of `freqs` beyond the source band come back zero; source modes beyond
    the target band are dropped (the caller picks the band that matters).
    """
    src = field.freqs
    if src.geometry != freqs.geometry:
        raise ValueError("fields live on different tori")
    if src.cutoff == freqs.cutoff:
        return field.coeffs.copy()
    out = np.zeros(len(freqs), dtype=complex)
    inside = np.all(np.abs(freqs.kvec) <= src.cutoff, axis=1)
    n_src = 2 * src.cutoff + 1
    flat = np.zeros(int(inside.sum()), dtype=np.int64)
    for i in range(freqs.geometry.dim):
        flat = flat * n_src + freqs.kvec[inside, i] % n_src
    out[inside] = field.coeffs[flat]
    return out


def _difference_gather(freqs: FrequencySet, table: FourierField, shift=None) -> np.ndarray:
    """Dense (m, m) matrix of table coefficients at (k_a - k_b - shift)."""
    big = table.freqs
    need = 2 * freqs.cutoff + (0 if shift is None else int(np.max(np.abs(shift))))
    if big.cutoff < need:
        raise ResolutionError(f"difference table band {big.cutoff} < required {need}")
    n_big = 2 * big.cutoff + 1
    flat = np.zeros((len(freqs), len(freqs)), dtype=np.int64)
    for i in range(freqs.geometry.dim):
        ka = freqs.kvec[:, i]
        diff = ka[:, None] - ka[None, :]
        if shift is not None:
            diff = diff - int(shift[i])
        flat = flat * n_big + diff % n_big
    return table.coeffs[flat]


def _triple_gather(freqs: FrequencySet, table: FourierField) -> np.ndarray:
    """Dense (m, m, m) tensor of table coefficients at -(k_a + k_b + k_c)."""
    big = table.freqs
    if big.cutoff < 3 * freqs.cutoff:
        raise ResolutionError(f"triple table band {big.cutoff} < required {3 * freqs.cutoff}")
    n_big = 2 * big.cutoff + 1
    m = len(freqs)
    flat = np.zeros((m, m, m), dtype=np.int64)
    for i in range(freqs.geometry.dim):
        s = freqs.kvec[:, i]
        tot = -(s[:, None, None] + s[None, :, None] + s[None, None, :])
        flat = flat * n_big + tot % n_big
    return table.coeffs[flat]


def _real_with_guard(value: complex, scale: float = 1.0) -> float:
    if abs(value.imag) > 1e-8 * (scale + abs(value.real)):
        raise ArithmeticError(f"expected a real value, got imaginary part {value.imag:g}")
    return float(value.real)


def perturb_density(density: DensityModel, direction: FourierField, eps: float) -> DensityModel:
    """The density f + eps*u for a real mean-zero direction u, revalidated.

    Mass stays one because the direction has no zero mode; positivity is
    rechecked on the model grid and failure raises like any other model-class
    violation.
    """
    if not direction.reality_flag:
        raise ValueError("perturbation direction must be a real field")
    scale = 1.0 + float(np.abs(direction.coeffs).max())
    if abs(direction.coeffs[0]) > 1e-12 * scale:
        raise ValueError("perturbation direction must have zero mean")
    geom = density.geometry
    cut = max(density.field.freqs.cutoff, direction.freqs.cutoff)
    freqs = frequency_lattice(geom, cut)
    coeffs = _embed_coeffs(density.field, freqs) + eps * _embed_coeffs(direction, freqs)
    fld = FourierField(freqs, coeffs, reality_flag=True)
    grid = synthesize(fld, _check_grid_size(cut, geom.dim))
    mn = float(np.real(grid.values).min())
    if mn <= 0:
        raise ModelClassError(f"perturbation of size {eps:g} drives the density to {mn:.3g}")
    return DensityModel(
        field=fld,
        smoothness_s=density.smoothness_s,
        floor_delta=mn * (1 - 1e-9),
        norm_bound_L=density.norm_bound_L,
        alpha=density.alpha,
    )


# --- first derivative: the influence function --------------------------------


@dataclass(frozen=True)
class InfluenceField:
    """Riesz representer psi_f of the first derivative of the cluster mean.

    `centering` is int psi_f f, so the order-1 correction of the debiasing
    pipeline is mean(psi_f(X_i)) - centering.
    """

    field: FourierField
    density: DensityModel
    contour: Contour | None
    centering: float

    def pair(self, u: FourierField) -> float:
        """int psi_f u for a real field u, paired on the common band."""
        cut = min(self.field.freqs.cutoff, u.freqs.cutoff)
        cf = frequency_lattice(self.field.geometry, cut)
        a = _embed_coeffs(self.field, cf)
        b = _embed_coeffs(u, cf)
        return float(np.real(np.vdot(a, b))) / self.field.geometry.volume

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.field.evaluate(points)


def _cluster_mean_of(
    density: DensityModel,
    contour: Contour,
    cutoff: int,
    alpha: float,
    expected_rank: int,
) -> float:
    system = solve_spectrum(assemble_pencil(density, cutoff, alpha=alpha))
    inside = contour.encloses(system.eigenvalues)
    if int(inside.sum()) != expected_rank:
        raise InstabilityError(
            f"cluster rank changed under the probe: {int(inside.sum())} inside, expected {expected_rank}"
        )
    return float(np.mean(system.eigenvalues[inside]))


def _probe_direction(density: DensityModel, seed: int) -> FourierField:
    geom = density.geometry
    cut = min(3, density.field.freqs.cutoff) or 1
    cf = frequency_lattice(geom, cut)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal(len(cf)) + 1j * rng.standard_normal(len(cf))
    raw[0] = 0.0
    fld = hermitian_part(FourierField(cf, raw))
    coeffs = fld.coeffs.copy()
    coeffs[0] = 0.0
    fld = fld.with_coeffs(coeffs, real=True)
    sup = float(np.abs(np.real(synthesize(fld, 8 * (2 * cut + 1)).values)).max())
    amp = min(0.05 * density.sup(), 0.45 * density.floor_delta) / max(sup, 1e-300)
    return fld.with_coeffs(coeffs * amp, real=True)


def mu_first_derivative(
    eigensystem: EigenSystem,
    contour: Contour,
    *,
    check: bool = True,
    probe_seed: int = 1234,
) -> InfluenceField:
    """Influence function of the cluster mean, in closed pencil form.

    psi_f = (alpha/N) sum_cluster f^{alpha-1} (|grad g_i|^2 - lambda_i |g_i|^2)
    with the weighted-orthonormal cluster basis g_i.  When `check` is set the
    derivative is validated by one-sided finite differences at eps = 1e-3 and
    5e-4 along a random band-limited direction; the error must decay at the
    second-order rate, and a rank change under the probe raises.
    """
    pen = eigensystem.pencil
    inside = contour.encloses(eigensystem.eigenvalues)
    rank = int(inside.sum())
    if rank == 0:
        raise EmptyContourError(f"no eigenvalue inside the contour at {contour.center:g}")
    lam_in = eigensystem.eigenvalues[inside]
    cols = eigensystem.eigenvectors[:, inside]
    freqs = pen.freqs
    geom = freqs.geometry
    out_cut = 2 * freqs.cutoff
    grid_n = 4 * (2 * out_cut + 1)
    density = pen.density
    alpha = pen.alpha

    if alpha == 1.0:
        fpow = 1.0
    else:
        fvals = np.real(synthesize(density.field, grid_n).values)
        fpow = fvals ** (alpha - 1.0)
    acc = np.zeros((grid_n,) * geom.dim)
    for a in range(rank):
        vec = FourierField(freqs, cols[:, a])
        gvals = synthesize(vec, grid_n).values
        grad2 = np.zeros_like(acc)
        for i in range(geom.dim):
            dvals = synthesize(vec.with_coeffs(1j * freqs.omega[:, i] * cols[:, a]), grid_n).values
            grad2 += np.abs(dvals) ** 2
        acc += grad2 - lam_in[a] * np.abs(gvals) ** 2
    psi_vals = (alpha / rank) * fpow * acc
    psi = analyze(GridField(geom, grid_n, psi_vals.astype(complex)), out_cut, real=True)

    influence = InfluenceField(
        field=psi,
        density=density,
        contour=contour,
        centering=0.0,
    )
    centering = influence.pair(density.field)
    influence = replace(influence, centering=centering)

    if check:
        u = _probe_direction(density, probe_seed)
        mu0 = float(np.mean(lam_in))
        der = influence.pair(u)
        errs = []
        for eps in (1e-3, 5e-4):
            mu_eps = _cluster_mean_of(
                perturb_density(density, u, eps), contour, freqs.cutoff, alpha, rank
            )
            errs.append(abs(mu_eps - mu0 - eps * der))
        if max(errs) > 1e-11 * (1.0 + abs(mu0)):
            slope = math.log2(errs[0] / errs[1])
            if not 1.9 <= slope <= 2.1:
                raise InstabilityError(
                    f"first-derivative finite-difference check failed: slope {slope:.3f}, "
                    f"errors {errs[0]:.3g}, {errs[1]:.3g}"
                )
    return influence


def efficiency_variance(influence, density: DensityModel, points_per_dim: int | None = None) -> float:
    """Var_f(psi(X)) = int psi^2 f - (int psi f)^2 by grid quadrature."""
    fld = influence.field if isinstance(influence, InfluenceField) else influence
    cut = max(fld.freqs.cutoff, density.field.freqs.cutoff)
    grid_n = points_per_dim or 4 * (2 * cut + 1)
    psi = np.real(synthesize(fld, grid_n).values)
    f = np.real(synthesize(density.field, grid_n).values)
    w = density.geometry.volume / grid_n**density.geometry.dim
    mean = float((psi * f).sum() * w)
    second = float((psi * psi * f).sum() * w)
    return second - mean * mean


# --- second derivative: quadratic form ----------------------------------------


@dataclass(frozen=True)
class QuadraticForm:
    """Hermitian matrix Q on a truncated band with B[u, u] = u^H Q u for real u."""

    freqs: FrequencySet
    matrix: np.ndarray
    correction_cutoff: int

    def __post_init__(self) -> None:
        q = np.asarray(self.matrix, dtype=complex)
        m = len(self.freqs)
        if q.shape != (m, m):
            raise ValueError(f"matrix shape {q.shape}, expected ({m}, {m})")
        scale = float(np.abs(q).max()) or 1.0
        if float(np.abs(q - q.conj().T).max()) > 1e-10 * scale:
            raise ValueError("quadratic form matrix is not Hermitian")
        object.__setattr__(self, "matrix", q)

    def apply(self, u) -> float:
        """B[u, u] for a real direction u (field or coefficient vector)."""
        vec = _embed_coeffs(u, self.freqs) if isinstance(u, FourierField) else np.asarray(u, dtype=complex)
        val = complex(np.vdot(vec, self.matrix @ vec))
        return _real_with_guard(val, float(np.abs(vec).max()) ** 2 + 1.0)

    def raw_matrix(self) -> np.ndarray:
        """Plain-bilinear representation: B[u, v] = u^T R v on coefficient vectors."""
        return self.matrix[self.freqs.neg_indices(), :]


def mu_second_form(
    eigensystem: EigenSystem,
    contour: Contour,
    correction_cutoff: int | None = None,
) -> QuadraticForm:
    """Second derivative of the cluster mean as a form on the correction band.

    Built from generalized-eigenproblem perturbation theory: congruence to a
    standard problem through M^{-1/2}, second-order terms of the transformed
    operator, and reduced-resolvent couplings to the exterior spectrum summed
    explicitly over eigenpairs.  Polarized over single-mode directions.
    """
    pen = eigensystem.pencil
    freqs = pen.freqs
    K = freqs.cutoff
    kc = K if correction_cutoff is None else int(correction_cutoff)
    if not 1 <= kc <= K:
        raise ValueError(f"correction cutoff {kc} must lie in [1, {K}]")
    lam = eigensystem.eigenvalues
    vecs = eigensystem.eigenvectors
    inside = contour.encloses(lam)
    rank = int(inside.sum())
    if rank == 0:
        raise EmptyContourError(f"no eigenvalue inside the contour at {contour.center:g}")
    iin = np.flatnonzero(inside)
    iout = np.flatnonzero(~inside)
    lam_in = lam[iin]
    lam_out = lam[iout]
    if len(iout):
        gap = float(np.abs(lam_in[:, None] - lam_out[None, :]).min())
        if gap < 1e-6 * (1.0 + float(np.abs(lam).max())):
            raise ConditioningError(
                f"cluster-exterior gap {gap:.3g} too small for second-order solves"
            )

    geom = freqs.geometry
    alpha = pen.alpha
    vol = geom.volume
    cf = frequency_lattice(geom, kc)
    ndir = len(cf)
    p = len(freqs)
    if ndir * p * p > 2**25:
        raise ValueError("correction band too large for dense perturbation assembly")

    big = 2 * K + kc
    if alpha == 1.0:
        gtab = None
    else:
        gtab = resample_pointwise(pen.density.field, lambda v: v ** (alpha - 1.0), big)
    dots = freqs.omega @ freqs.omega.T

    m1 = np.empty((ndir, p, p), dtype=complex)
    s1 = np.empty((ndir, p, p), dtype=complex)
    for m in range(ndir):
        shift = cf.kvec[m]
        if gtab is None:
            base = np.zeros((p, p), dtype=complex)
            for i in range(geom.dim):
                diff = freqs.kvec[:, i][:, None] - freqs.kvec[:, i][None, :]
                if i == 0:
                    eq = diff == shift[i]
                else:
                    eq &= diff == shift[i]
            base[eq] = vol  # f^0 has the single coefficient V at mode zero
        else:
            base = _difference_gather(freqs, gtab, shift)
        m1[m] = (alpha / vol) * base
        s1[m] = dots * m1[m]
    # congruence to the weighted-orthonormal eigenbasis
    e = vecs
    m1 = np.einsum("ka,mkl,lb->mab", e.conj(), m1, e, optimize=True)
    s1 = np.einsum("ka,mkl,lb->mab", e.conj(), s1, e, optimize=True)
    n1 = s1 - 0.5 * (m1 * lam[None, None, :] + lam[None, :, None] * m1)

    if alpha != 1.0:
        htab = resample_pointwise(pen.density.field, lambda v: v ** (alpha - 2.0), 2 * K + 2 * kc)
        c2 = alpha * (alpha - 1.0) / (2.0 * vol * vol)
    neg = cf.neg_indices()
    weights = None
    if len(iout):
        weights = 1.0 / (2.0 * (lam_in[:, None] - lam_out[None, :]))

    def tr_in(x: np.ndarray, y: np.ndarray) -> complex:
        return complex(np.einsum("ac,ca->", x[iin, :], y[:, iin]))

    q = np.empty((ndir, ndir), dtype=complex)
    for k in range(ndir):
        mu = int(neg[k])
        a_m, a_s, a_n = m1[mu], s1[mu], n1[mu]
        for l in range(ndir):
            b_m, b_s, b_n = m1[l], s1[l], n1[l]
            total = -(tr_in(a_m, b_s) + tr_in(b_m, a_s) + tr_in(a_s, b_m) + tr_in(b_s, a_m)) / 4.0
            prod_ab = np.einsum("ac,ca->a", a_m[iin, :], b_m[:, iin])
            prod_ba = np.einsum("ac,ca->a", b_m[iin, :], a_m[:, iin])
            total += (3.0 / 8.0) * complex(np.dot(lam_in, prod_ab + prod_ba))
            lam_mid = np.einsum("ac,c,ca->a", a_m[iin, :], lam, b_m[:, iin])
            lam_mid += np.einsum("ac,c,ca->a", b_m[iin, :], lam, a_m[:, iin])
            total += complex(lam_mid.sum()) / 8.0
            if alpha != 1.0:
                shift2 = cf.kvec[mu] + cf.kvec[l]
                w2 = c2 * _difference_gather(freqs, htab, shift2)
                s2d = np.einsum("ka,kl,la->a", e[:, iin].conj(), dots * w2, e[:, iin])
                m2d = np.einsum("ka,kl,la->a", e[:, iin].conj(), w2, e[:, iin])
                total += complex(s2d.sum()) - complex(np.dot(lam_in, m2d))
            if weights is not None:
                cross = a_n[np.ix_(iin, iout)] * b_n[np.ix_(iout, iin)].T
                cross += b_n[np.ix_(iin, iout)] * a_n[np.ix_(iout, iin)].T
                total += complex((weights * cross).sum())
            q[k, l] = total / rank
    return QuadraticForm(cf, q, kc)


def closed_form_second_uniform(k_star, cutoff: int, geometry=None) -> QuadraticForm:
    """Diagonal second-derivative form at the uniform density (alpha = 1).

    Entry at mode k is (w_k . w_star)(w_k . w_{k+star}) / (|w_{k+star}|^2 - |w_star|^2),
    zero at k = 0 and at k = -2 k_star where the within-pair coupling lives.  Valid
    only when the cluster at |w_star|^2 is exactly the pair {k_star, -k_star}.
    """
    k_star = np.atleast_1d(np.asarray(k_star, dtype=np.int64))
    geom = geometry or unit_torus(len(k_star))
    if np.all(k_star == 0):
        raise ValueError("k_star must be nonzero")
    freqs = frequency_lattice(geom, cutoff)
    scale = 2.0 * np.pi / np.asarray(geom.side_lengths)
    w_star = k_star * scale
    lam_star = float(w_star @ w_star)
    same = np.abs(freqs.lam - lam_star) <= 1e-9 * (1.0 + lam_star)
    expected = {tuple(k_star), tuple(-k_star)}
    found = {tuple(v) for v in freqs.kvec[same]}
    if found != expected:
        raise ValueError(f"cluster at |w|^2 = {lam_star:g} is {sorted(found)}, not the pair {sorted(expected)}")
    w_shift = (freqs.kvec + k_star[None, :]) * scale[None, :]
    num = (freqs.omega @ w_star) * np.einsum("kd,kd->k", freqs.omega, w_shift)
    den = np.einsum("kd,kd->k", w_shift, w_shift) - lam_star
    entries = np.zeros(len(freqs))
    live = np.ones(len(freqs), dtype=bool)
    live[freqs.index_of(np.zeros(len(k_star), dtype=np.int64))] = False
    if np.all(np.abs(2 * k_star) <= cutoff):
        live[freqs.index_of(-2 * k_star)] = False
    if np.abs(den[live]).min() <= 1e-9 * (1.0 + lam_star):
        raise ValueError("a shifted mode resonates with the cluster; the pair form does not apply")
    entries[live] = num[live] / den[live]
    return QuadraticForm(freqs, np.diag(entries).astype(complex), cutoff)


# --- U-statistics --------------------------------------------------------------


@dataclass(frozen=True)
class UStatKernel:
    """Symmetric J-linear kernel over projected coefficient vectors.

    The dense tensor already carries the taper dressing; `center` (pilot
    density coefficients) is subtracted from each point-mass vector before
    contraction.  Symmetry of the tensor is validated so U-statistics over
    unordered subsets are well defined.
    """

    order: int
    freqs: FrequencySet
    tensor: np.ndarray
    family: ProjectionFamily
    levels: tuple
    center: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.order not in (1, 2, 3):
            raise ConfigError(f"supported orders are 1..3, got {self.order}")
        t = np.asarray(self.tensor, dtype=complex)
        m = len(self.freqs)
        if t.shape != (m,) * self.order:
            raise ValueError(f"tensor shape {t.shape}, expected {(m,) * self.order}")
        scale = float(np.abs(t).max()) or 1.0
        for perm in permutations(range(self.order)):
            if float(np.abs(t - t.transpose(perm)).max()) > 1e-10 * scale:
                raise ValueError("kernel tensor is not symmetric under argument permutation")
        object.__setattr__(self, "tensor", t)
        if self.center is not None:
            c = np.asarray(self.center, dtype=complex)
            if c.shape != (m,):
                raise ValueError(f"center shape {c.shape}, expected ({m},)")
            object.__setattr__(self, "center", c)

    def coefficient_vectors(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vecs = np.exp(-1j * pts @ self.freqs.omega.T)
        if self.center is not None:
            vecs = vecs - self.center[None, :]
        return vecs

    def evaluate(self, *points) -> float:
        """Definitional kernel b(x_1, ..., x_J) on point masses."""
        if len(points) != self.order:
            raise ValueError(f"kernel of order {self.order} got {len(points)} arguments")
        vecs = [self.coefficient_vectors(x)[0] for x in points]
        out = self.tensor
        for v in vecs:
            out = np.tensordot(out, v, axes=([0], [0]))
        return _real_with_guard(complex(out), float(np.abs(self.tensor).max()) + 1.0)


def ustat(kernel: UStatKernel, samples: SampleSet, mode: str = "fast") -> float:
    """U-statistic of the kernel: average of b over unordered J-subsets."""
    n = len(samples)
    j = kernel.order
    if n < j:
        raise InsufficientSampleError(f"need at least {j} samples, got {n}")
    if mode == "naive":
        vals = [
            kernel.evaluate(*(samples.points[i] for i in subset))
            for subset in combinations(range(n), j)
        ]
        return float(np.mean(vals))
    if mode != "fast":
        raise ConfigError(f"unknown U-statistic mode {mode!r}")
    c = kernel.coefficient_vectors(samples.points)
    t = kernel.tensor
    scale = float(np.abs(t).max()) + 1.0
    if j == 1:
        return _real_with_guard(complex((c @ t).mean()), scale)
    s = c.sum(axis=0)
    if j == 2:
        total = complex(s @ t @ s)
        diag = complex(np.einsum("ik,kl,il->", c, t, c))
        return _real_with_guard((total - diag) / (n * (n - 1)), scale)
    ts = np.tensordot(t, s, axes=([2], [0]))
    full = complex(s @ ts @ s)
    pair = complex(np.einsum("ik,il,kl->", c, c, ts))
    triple = complex(np.einsum("klm,ik,il,im->", t, c, c, c, optimize=True))
    distinct = full - 3.0 * pair + 2.0 * triple
    return _real_with_guard(distinct / (n * (n - 1) * (n - 2)), scale)


def multiplication_quadratic_form(kernel_field: FourierField, cutoff: int) -> QuadraticForm:
    """The form B[u, v] = int u v c as a matrix on the cutoff band.

    `kernel_field` is c analyzed on a band at least twice the cutoff.
    """
    freqs = frequency_lattice(kernel_field.geometry, cutoff)
    vol = kernel_field.geometry.volume
    matrix = _difference_gather(freqs, kernel_field) / vol**2
    return QuadraticForm(freqs, matrix, cutoff)


@dataclass(frozen=True)
class CubicForm:
    """Raw-bilinear dense tensor of a symmetric 3-linear form on a band."""

    freqs: FrequencySet
    tensor: np.ndarray


def multiplication_cubic_form(kernel_field: FourierField, cutoff: int) -> CubicForm:
    """The form G[u, v, w] = int u v w c as a dense tensor on the cutoff band."""
    freqs = frequency_lattice(kernel_field.geometry, cutoff)
    vol = kernel_field.geometry.volume
    return CubicForm(freqs, _triple_gather(freqs, kernel_field) / vol**3)


def _taper_cutoff(level: int, geometry) -> int:
    return max(1, math.ceil(level * max(geometry.side_lengths) / math.pi))


def quadratic_kernel(
    form: QuadraticForm,
    level: int,
    family: ProjectionFamily = RAISED_COSINE,
    center: FourierField | None = None,
) -> UStatKernel:
    mult = family.mode_multipliers(form.freqs, level)
    tensor = mult[:, None] * form.raw_matrix() * mult[None, :]
    cvec = None if center is None else _embed_coeffs(center, form.freqs)
    return UStatKernel(2, form.freqs, tensor, family, (level,), cvec)


def cubic_kernel(
    form: CubicForm,
    levels,
    family: ProjectionFamily = RAISED_COSINE,
    center: FourierField | None = None,
) -> UStatKernel:
    """Five-term multiscale dressing of a cubic form, explicitly symmetrized.

    With p_j the level-D_j multipliers the kernel is
      G[p1 x, p1 y, p1 z] + G[(p2-p1) x, (p2-p1) y, (p2-p1) z]
      + sym3 G[p1 x, p1 y, (p3-p1) z] + sym3 G[p1 x, (p3-p1) y, (p3-p1) z]
      + sym3 G[(p2-p1) x, (p2-p1) y, (p3-p2) z]
    where sym3 sums the three placements of the odd slot.
    """
    d1, d2, d3 = (int(v) for v in levels)
    if not d1 <= d2 <= d3:
        raise ConfigError(f"cubic levels must be nondecreasing, got {levels}")
    p1 = family.mode_multipliers(form.freqs, d1)
    p2 = family.mode_multipliers(form.freqs, d2)
    p3 = family.mode_multipliers(form.freqs, d3)
    q21 = p2 - p1
    q31 = p3 - p1
    q32 = p3 - p2

    def cube(a):
        return a[:, None, None] * a[None, :, None] * a[None, None, :]

    def sym3(a, b):
        # two slots carry a, one slot carries b, summed over placements
        return (
            a[:, None, None] * a[None, :, None] * b[None, None, :]
            + a[:, None, None] * b[None, :, None] * a[None, None, :]
            + b[:, None, None] * a[None, :, None] * a[None, None, :]
        )

    dressing = cube(p1) + cube(q21) + sym3(p1, q31) + sym3(q31, p1) + sym3(q21, q32)
    cvec = None if center is None else _embed_coeffs(center, form.freqs)
    return UStatKernel(3, form.freqs, form.tensor * dressing, family, (d1, d2, d3), cvec)


def estimate_quadratic_form(
    form: QuadraticForm,
    samples: SampleSet,
    level: int,
    *,
    family: ProjectionFamily = RAISED_COSINE,
    center: FourierField | None = None,
    mode: str | None = None,
) -> float:
    """Order-2 U-statistic of b(x, y) = B[pi_D(delta_x - c), pi_D(delta_y - c)]."""
    n = len(samples)
    if mode == "naive" and n > 500:
        raise ConfigError("the naive pair enumeration is restricted to n <= 500")
    kernel = quadratic_kernel(form, level, family, center)
    return ustat(kernel, samples, mode or "fast")


def estimate_cubic_form(
    form: CubicForm,
    samples: SampleSet,
    levels,
    *,
    family: ProjectionFamily = RAISED_COSINE,
    center: FourierField | None = None,
    mode: str | None = None,
) -> float:
    """Order-3 U-statistic of the five-term multiscale kernel."""
    n = len(samples)
    if mode == "naive" and n > 500:
        raise ConfigError("the naive triple enumeration is restricted to n <= 500")
    kernel = cubic_kernel(form, levels, family, center)
    return ustat(kernel, samples, mode or "fast")


# --- Hoeffding decomposition ----------------------------------------------------


@dataclass(frozen=True)
class HoeffdingDecomposition:
    """Exact split U_n B = B[f,..,f] + sum_j C(J,j) U^(j) b_j on a finite band."""

    base: float
    projections: tuple
    reconstruction: float
    direct: float

    @property
    def residual(self) -> float:
        return abs(self.direct - self.reconstruction)


def hoeffding_terms(
    form,
    samples: SampleSet,
    density: DensityModel,
    order: int,
    cutoff: int,
) -> HoeffdingDecomposition:
    """Evaluate every Hoeffding projection of a J-linear form at a known density.

    `form` is a symmetric callable on `order` coefficient vectors over the
    cutoff band; measures are represented exactly there, so the density band
    must fit inside the evaluation band.
    """
    if density.field.freqs.cutoff > cutoff:
        raise ResolutionError(
            f"density band {density.field.freqs.cutoff} exceeds the evaluation band {cutoff}"
        )
    n = len(samples)
    if n < order:
        raise InsufficientSampleError(f"need at least {order} samples, got {n}")
    cf = frequency_lattice(samples.geometry, cutoff)
    pm = np.exp(-1j * samples.points @ cf.omega.T)
    fvec = _embed_coeffs(density.field, cf)
    base = form(*([fvec] * order))
    base = _real_with_guard(complex(base))
    projections = []
    for j in range(1, order + 1):
        vals = [
            form(*[pm[i] - fvec for i in subset], *([fvec] * (order - j)))
            for subset in combinations(range(n), j)
        ]
        projections.append(_real_with_guard(complex(np.mean(vals)), 1.0 + abs(base)))
    direct_vals = [
        form(*[pm[i] for i in subset]) for subset in combinations(range(n), order)
    ]
    direct = _real_with_guard(complex(np.mean(direct_vals)), 1.0 + abs(base))
    reconstruction = base + sum(
        math.comb(order, j) * u for j, u in enumerate(projections, start=1)
    )
    return HoeffdingDecomposition(base, tuple(projections), reconstruction, direct)


# --- integral functionals ---------------------------------------------------------


_PSI_TABLE = {
    "square": (
        lambda t: t * t,
        lambda t: 2.0 * t,
        lambda t: np.ones_like(t),
        None,
    ),
    "cube": (
        lambda t: t**3,
        lambda t: 3.0 * t * t,
        lambda t: 3.0 * t,
        lambda t: np.ones_like(t),
    ),
    "entropy": (
        lambda t: t * np.log(t),
        lambda t: 1.0 + np.log(t),
        lambda t: 0.5 / t,
        lambda t: -1.0 / (6.0 * t * t),
    ),
}


@dataclass(frozen=True)
class IntegralFunctional:
    """T(f) = int psi(f) with its derivative kernels as multiplication forms.

    The order-J kernel is psi^(J)(f)/J!; order one is evaluated pointwise and
    exactly, higher orders are band-limited on demand.
    """

    kind: str
    density: DensityModel
    value: float
    grid_points: int

    def _scalar(self, which: int):
        return _PSI_TABLE[self.kind][which]

    def _grid_values(self, points_per_dim: int) -> np.ndarray:
        return np.real(synthesize(self.density.field, points_per_dim).values)

    def t1_values(self, points: np.ndarray) -> np.ndarray:
        return self._scalar(1)(self.density.field.evaluate(points))

    @property
    def t1_mean(self) -> float:
        f = self._grid_values(self.grid_points)
        w = self.density.geometry.volume / self.grid_points**self.density.geometry.dim
        return float((self._scalar(1)(f) * f).sum() * w)

    def t1_pair(self, u: FourierField) -> float:
        g = max(self.grid_points, 4 * (2 * u.freqs.cutoff + 1))
        f = self._grid_values(g)
        uv = np.real(synthesize(u, g).values)
        w = self.density.geometry.volume / g**self.density.geometry.dim
        return float((self._scalar(1)(f) * uv).sum() * w)

    def t2_pair(self, u: FourierField) -> float:
        g = max(self.grid_points, 4 * (2 * u.freqs.cutoff + 1))
        f = self._grid_values(g)
        uv = np.real(synthesize(u, g).values)
        w = self.density.geometry.volume / g**self.density.geometry.dim
        return float((self._scalar(2)(f) * uv * uv).sum() * w)

    def kernel_field(self, derivative_order: int, cutoff: int) -> FourierField | None:
        """psi^(J)(f)/J! analyzed on the requested band; None when identically zero."""
        fn = self._scalar(derivative_order)
        if fn is None:
            return None
        return resample_pointwise(self.density.field, fn, cutoff)


def integral_functional(psi_spec: str, density: DensityModel, points_per_dim: int | None = None) -> IntegralFunctional:
    """Quadrature value of int psi(f) together with its derivative kernels."""
    if psi_spec not in _PSI_TABLE:
        raise ConfigError(f"unknown integral functional {psi_spec!r}")
    dim = density.geometry.dim
    grid_n = points_per_dim or (1024 if dim == 1 else (96 if dim == 2 else 32))
    grid_n = max(grid_n, 2 * density.field.freqs.cutoff + 2)
    vals = np.real(synthesize(density.field, grid_n).values)
    if psi_spec == "entropy" and float(vals.min()) <= 1e-12:
        raise ModelClassError("entropy needs a strictly positive density on the grid")
    w = density.geometry.volume / grid_n**dim
    value = float(_PSI_TABLE[psi_spec][0](vals).sum() * w)
    return IntegralFunctional(psi_spec, density, value, grid_n)


# --- debiasing pipeline -------------------------------------------------------------


@dataclass(frozen=True)
class DebiasConfig:
    """Knobs of the sample-splitting estimator; defaults suit d = 1 at s = 2."""

    smoothness_s: float = 2.0
    alpha: float = 1.0
    split: str = "half"  # "half" | "pow:E" | "fixed:K"
    family: ProjectionFamily = RAISED_COSINE
    floor_delta: float = 0.05
    density_c: float = 1.0
    quadratic_c: float = 1.0
    cubic_c: float = 1.0
    pencil_cutoff: int = 16
    target_index: int = 1
    gap: float = 10.0
    correction_cutoff: int = 8
    oversample: int = 4
    derivative_check: bool = True
    force_order: int | None = None


@dataclass(frozen=True)
class EstimateReport:
    """Debiased point estimate with its full decomposition."""

    estimate: float
    plugin: float
    corr1: float
    corr2: float
    corr3: float
    n1: int
    n2: int
    D_density: int
    D_quadratic: int
    seed: int
    flags: tuple
    variance_proxy: float = float("nan")
    cubic_levels: tuple | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "estimate": self.estimate,
                "plugin": self.plugin,
                "corr1": self.corr1,
                "corr2": self.corr2,
                "corr3": self.corr3,
                "n1": self.n1,
                "n2": self.n2,
                "D_density": self.D_density,
                "D_quadratic": self.D_quadratic,
                "seed": self.seed,
                "flags": list(self.flags),
            }
        )


def _split_sizes(rule: str, n: int) -> tuple[int, int]:
    if rule == "half":
        n2 = n // 2
    elif rule.startswith("pow:"):
        expo = float(rule.split(":", 1)[1])
        if not 0 < expo < 1:
            raise ConfigError(f"split exponent must lie in (0, 1), got {expo}")
        n2 = max(4, int(n**expo))
    elif rule.startswith("fixed:"):
        n2 = int(rule.split(":", 1)[1])
    else:
        raise ConfigError(f"unknown split rule {rule!r}")
    n1 = n - n2
    if n1 < 4 or n2 < 4:
        raise ConfigError(f"split rule {rule!r} leaves n1 = {n1}, n2 = {n2}; need both >= 4")
    return n1, n2


def debiased_estimate(
    functional: str,
    samples: SampleSet,
    config: DebiasConfig,
    *,
    seed: int = 0,
) -> EstimateReport:
    """Pilot-corrected estimate of an integral functional or the cluster mean.

    The last n2 points fit the pilot density; corrections are averaged over the
    first n1.  Correction arguments are centered at the pilot, pi_D(delta_x - fhat),
    which regroups the expansion without changing its expectation.  Failures in
    the derivative machinery degrade to the plug-in value and are flagged.
    """
    known = ("square", "cube", "entropy", "eigenvalue")
    if functional not in known:
        raise ConfigError(f"unknown functional {functional!r}; expected one of {known}")
    n = len(samples)
    if n < 8:
        raise InsufficientSampleError(f"need at least 8 samples, got {n}")
    n1, n2 = _split_sizes(config.split, n)
    geom = samples.geometry
    d = geom.dim
    s = config.smoothness_s
    first = SampleSet(geom, samples.points[:n1], samples.seed, samples.generation_log)
    pilot = SampleSet(geom, samples.points[n1:], samples.seed, samples.generation_log)

    d_density = bandwidth(n2, s, d, "density", config.density_c)
    fhat = estimate_density(
        pilot, config.family, d_density, config.floor_delta, smoothness_s=s, alpha=config.alpha
    )
    d_quad = bandwidth(n1, s, d, "quadratic", config.quadratic_c)
    flags: list[str] = []
    corr3 = 0.0
    cubic_levels = None
    variance_proxy = float("nan")

    if functional == "eigenvalue":
        try:
            pen = assemble_pencil(fhat, config.pencil_cutoff, alpha=config.alpha, oversample=config.oversample)
            system = solve_spectrum(pen)
        except Exception as exc:  # noqa: BLE001 - every failure mode maps to one flag
            flags.append(f"estimate-failed: {type(exc).__name__}")
            nan = float("nan")
            return EstimateReport(
                nan, nan, nan, nan, nan, n1, n2, d_density, d_quad, seed, tuple(flags)
            )
        try:
            contour = select_contour(system, config.target_index, config.gap)
        except GapViolationError:
            flags.append("gap-violation")
            center = float(system.eigenvalues[config.target_index])
            contour = Contour(center, config.gap / 2.0)
        plugin = cluster_mean(system, contour)
        try:
            influence = mu_first_derivative(system, contour, check=config.derivative_check)
            psi_vals = influence.evaluate(first.points)
            corr1 = float(np.mean(psi_vals)) - influence.centering
            variance_proxy = float(np.var(psi_vals, ddof=1)) / n1
            qform = mu_second_form(system, contour, config.correction_cutoff)
            corr2 = estimate_quadratic_form(
                qform, first, d_quad, family=config.family, center=fhat.field
            )
        except (InstabilityError, ConditioningError, EmptyContourError) as exc:
            flags.append(f"derivative-instability: {type(exc).__name__}")
            corr1 = corr2 = 0.0
    else:
        fun = integral_functional(functional, fhat)
        plugin = fun.value
        vals1 = fun.t1_values(first.points)
        corr1 = float(np.mean(vals1)) - fun.t1_mean
        variance_proxy = float(np.var(vals1, ddof=1)) / n1
        q_cut = _taper_cutoff(d_quad, geom)
        band2 = max(2 * q_cut, fhat.field.freqs.cutoff)
        kernel2 = fun.kernel_field(2, band2)
        form2 = multiplication_quadratic_form(kernel2, q_cut)
        corr2 = estimate_quadratic_form(
            form2, first, d_quad, family=config.family, center=fhat.field
        )
        order3 = 3 if (config.force_order == 3 or s <= d / 4.0) else 2
        if order3 == 3:
            cubic_levels = tuple(
                bandwidth(n1, s, d, f"cubic_{i}", config.cubic_c) for i in (1, 2, 3)
            )
            kernel3 = fun.kernel_field(3, max(3 * _taper_cutoff(cubic_levels[2], geom), fhat.field.freqs.cutoff))
            if kernel3 is not None:
                form3 = multiplication_cubic_form(kernel3, _taper_cutoff(cubic_levels[2], geom))
                corr3 = estimate_cubic_form(
                    form3, first, cubic_levels, family=config.family, center=fhat.field
                )

    estimate = plugin + corr1 + corr2 + corr3
    return EstimateReport(
        estimate=float(estimate),
        plugin=float(plugin),
        corr1=float(corr1),
        corr2=float(corr2),
        corr3=float(corr3),
        n1=n1,
        n2=n2,
        D_density=d_density,
        D_quadratic=d_quad,
        seed=seed,
        flags=tuple(flags),
        variance_proxy=variance_proxy,
        cubic_levels=cubic_levels,
    )
