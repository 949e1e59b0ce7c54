"""Test-density catalog, exact rejection sampling, and the projection density estimator.

A DensityModel is a band-limited positive probability density on the torus together
with its model-class parameters (smoothness s, floor delta, norm bound L) and the
operator hyperparameter alpha.  Catalog constructors, the sampler and the estimator
all return models whose zero-mode coefficient is exactly one.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .torus import (
    FourierField,
    FrequencySet,
    GridField,
    ProjectionFamily,
    Sobolev,
    TorusGeometry,
    analyze,
    compute_norm,
    frequency_lattice,
    point_mass,
    resample_pointwise,
    synthesize,
    unit_torus,
)


class ModelClassError(ValueError):
    """Constructed density violates the model class (positivity, mass, smoothness)."""


class SamplerIntegrityError(RuntimeError):
    """Rejection envelope violated at runtime; sampling aborted rather than biased."""


class ConfigError(ValueError):
    """Unknown catalog name, bandwidth rule or malformed specification."""


def splitmix64(state: int) -> int:
    """One splitmix64 output for the given state; standard constants."""
    z = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0xFFFFFFFFFFFFFFFF

def derive_seed(base: int, *indices: int) -> int:
    """Stream-splitting rule: fold indices into the base seed one splitmix step each."""
    s = base & 0xFFFFFFFFFFFFFFFF
    for ix in indices:
        s = splitmix64(s ^ (ix & 0xFFFFFFFFFFFFFFFF))
    return s


def _check_grid_size(cutoff: int, dim: int) -> int:
    # 8x oversampling, capped so d=3 checks stay affordable
    cap = {1: 4096, 2: 768, 3: 160}[dim]
    return max(2 * cutoff + 2, min(8 * (2 * cutoff + 1), cap))


@dataclass(frozen=True)
class DensityModel:
    """Positive band-limited density with model-class metadata.

    Invariants checked at construction: Hermitian coefficients, zero mode exactly
    one (mass one), pointwise minimum on a dense grid at least floor_delta.
    """

    field: FourierField
    smoothness_s: float
    floor_delta: float
    norm_bound_L: float
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if not self.field.reality_flag:
            raise ModelClassError("density field must carry Hermitian (real) coefficients")
        if self.smoothness_s < 2:
            raise ModelClassError(f"smoothness must be >= 2, got {self.smoothness_s}")
        if not (self.floor_delta > 0):
            raise ModelClassError(f"floor must be positive, got {self.floor_delta}")
        if not (self.norm_bound_L > 0):
            raise ModelClassError(f"norm bound must be positive, got {self.norm_bound_L}")
        mass = self.field.coeffs[0]
        if abs(mass - 1.0) > 1e-12:
            raise ModelClassError(f"zero-mode coefficient must be 1, got {mass}")
        vals = self._check_values()
        mn = float(vals.min())
        if mn < self.floor_delta * (1 - 1e-9):
            raise ModelClassError(f"density dips to {mn:.6g}, below the floor {self.floor_delta:.6g}")

    def _check_values(self) -> np.ndarray:
        freqs = self.field.freqs
        g = synthesize(self.field, _check_grid_size(freqs.cutoff, freqs.geometry.dim))
        return np.real(g.values)

    @property
    def geometry(self) -> TorusGeometry:
        return self.field.geometry

    def sup(self) -> float:
        return float(self._check_values().max())

    def weight(self, alpha: float, cutoff: int, points_per_dim: int | None = None) -> FourierField:
        """Coefficients of f^alpha up to the cutoff (oversampled pointwise power)."""
        if alpha == 0.0:
            freqs = frequency_lattice(self.geometry, cutoff)
            c = np.zeros(len(freqs), dtype=complex)
            c[0] = self.geometry.volume
            return FourierField(freqs, c, reality_flag=True)
        return resample_pointwise(self.field, lambda v: v**alpha, cutoff, points_per_dim)

    def log_field(self, cutoff: int | None = None) -> FourierField:
        """Coefficients of log f (the drift potential) up to the cutoff."""
        cut = self.field.freqs.cutoff if cutoff is None else cutoff
        return resample_pointwise(self.field, np.log, cut)


@dataclass(frozen=True)
class SampleSet:
    """n i.i.d. draws from a density, with the seed and acceptance rate that made them."""

    geometry: TorusGeometry
    points: np.ndarray
    seed: int
    generation_log: float  # acceptance rate; nan for imported sets

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.geometry.dim:
            raise ValueError(f"points must be (n, {self.geometry.dim}), got {pts.shape}")
        sides = np.asarray(self.geometry.side_lengths)
        if pts.size and (pts.min() < 0 or np.any(pts >= sides)):
            raise ValueError("points must lie in the fundamental domain")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


# --- catalog ---------------------------------------------------------------


@dataclass(frozen=True)
class BumpLatticeSpec:
    """Lattice of scaled radial bumps: f = 1 + eps^s * sum_i tau_i chi((x - x_i)/eps).

    Centers sit on the N^d grid x_i = (j + 1/2)/N * kappa; supports are disjoint iff
    eps <= spacing/2.  profile "plain" is a nonnegative raised-cosine bump; profile
    "vanishing" is orthogonalized against 1 and r^2 so each bump integrates to zero
    and has vanishing second moments.
    """

    grid_n: int
    epsilon: float
    amplitude_exponent: float
    signs: tuple[int, ...]
    profile: str = "plain"

    def __post_init__(self) -> None:
        if self.grid_n < 1 or self.epsilon <= 0:
            raise ConfigError("bump lattice needs grid_n >= 1 and epsilon > 0")
        if self.profile not in ("plain", "vanishing"):
            raise ConfigError(f"unknown bump profile {self.profile!r}")
        if any(t not in (-1, 0, 1) for t in self.signs):
            raise ConfigError("signs must be in {-1, 0, +1}")


def _plain_profile(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.where(np.abs(r) < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.clip(np.abs(r), 0, 1))), 0.0)


def bump_profile(kind: str, dim: int):
    """Radial profile chi(r) on [0, 1]; "vanishing" has zero 0th and 2nd radial moments.

    The vanishing variant is (1 + a r^2 + b r^4) * plain(r) with (a, b) solved so that
    int chi r^{dim-1} dr = int chi r^{dim+1} dr = 0; chi(0) = 1 in both variants.
    """
    if kind == "plain":
        return _plain_profile
    if kind != "vanishing":
        raise ConfigError(f"unknown bump profile {kind!r}")
    r = np.linspace(0.0, 1.0, 8193)
    base = _plain_profile(r)
    w0 = r ** (dim - 1)
    moments = {}
    for j in (0, 2, 4):
        moments[j] = (
            np.trapezoid(base * r**j * w0, r),
            np.trapezoid(base * r ** (j + 2) * w0, r),
        )
    rhs = -np.array([moments[0][0], moments[0][1]])
    mat = np.array([[moments[2][0], moments[4][0]], [moments[2][1], moments[4][1]]])
    a, b = np.linalg.solve(mat, rhs)

    def chi(rr: np.ndarray) -> np.ndarray:
        rr = np.asarray(rr, dtype=float)
        return (1.0 + a * rr**2 + b * rr**4) * _plain_profile(rr)

    return chi


def _bump_lattice_values(spec: BumpLatticeSpec, geometry: TorusGeometry, grid: int) -> np.ndarray:
    d = geometry.dim
    if len(spec.signs) != spec.grid_n**d:
        raise ConfigError(f"signs length {len(spec.signs)} != grid_n^d = {spec.grid_n ** d}")
    spacing = min(geometry.side_lengths) / spec.grid_n
    if 2 * spec.epsilon > spacing * (1 + 1e-12):
        raise ConfigError(
            f"bump supports overlap: 2*eps = {2 * spec.epsilon:.6g} exceeds grid spacing {spacing:.6g}"
        )
    chi = bump_profile(spec.profile, d)
    axes = [np.arange(grid) * (s / grid) for s in geometry.side_lengths]
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = np.ones((grid,) * d)
    amp = spec.epsilon**spec.amplitude_exponent
    centers = np.meshgrid(*[(np.arange(spec.grid_n) + 0.5) * (s / spec.grid_n) for s in geometry.side_lengths], indexing="ij")
    centers = np.stack([c.ravel() for c in centers], axis=1)
    for tau, c in zip(spec.signs, centers):
        if tau == 0:
            continue
        dist2 = np.zeros((grid,) * d)
        for i in range(d):
            di = np.abs(mesh[i] - c[i])
            di = np.minimum(di, geometry.side_lengths[i] - di)
            dist2 = dist2 + di**2
        vals = vals + tau * amp * chi(np.sqrt(dist2) / spec.epsilon)
    return vals


def make_density(
    kind: str,
    geometry: TorusGeometry | None = None,
    *,
    cutoff: int | None = None,
    smoothness_s: float = 2.0,
    floor_delta: float | None = None,
    norm_bound_L: float | None = None,
    alpha: float = 1.0,
    amplitude: float = 0.5,
    mode: tuple[int, ...] | None = None,
    extra_coeffs: dict | None = None,
    bump: BumpLatticeSpec | None = None,
    sigma: float = 0.15,
    center: tuple[float, ...] | None = None,
) -> DensityModel:
    """Catalog constructor: "uniform", "trig", "bump-lattice", "gauss-bump".

    trig is 1 + amplitude*cos(2 pi x_1 / kappa_1) plus optional extra_coeffs entries
    {lattice vector: coefficient} mirrored Hermitianly.  gauss-bump is
    1 + amplitude*(theta_sigma(x - center) - 1) for a periodized Gaussian theta_sigma,
    whose band coefficients are amplitude * exp(-sigma^2 |omega_k|^2 / 2).
    """
    geometry = geometry or unit_torus(1)
    d = geometry.dim

    if kind == "uniform":
        freqs = frequency_lattice(geometry, cutoff if cutoff is not None else 1)
        c = np.zeros(len(freqs), dtype=complex)
        c[0] = 1.0
        fld = FourierField(freqs, c, reality_flag=True)

    elif kind == "trig":
        freqs = frequency_lattice(geometry, cutoff if cutoff is not None else 1)
        c = np.zeros(len(freqs), dtype=complex)
        c[0] = 1.0
        kvec = mode if mode is not None else (1,) + (0,) * (d - 1)
        c[freqs.index_of(kvec)] += amplitude / 2
        c[freqs.index_of([-x for x in kvec])] += amplitude / 2
        for kv, val in (extra_coeffs or {}).items():
            kv = tuple(kv)
            c[freqs.index_of(kv)] += val
            c[freqs.index_of([-x for x in kv])] += np.conj(val)
        fld = FourierField(freqs, c, reality_flag=True)

    elif kind == "bump-lattice":
        if bump is None:
            raise ConfigError("bump-lattice requires a BumpLatticeSpec")
        cut = cutoff if cutoff is not None else max(16, int(math.ceil(4.0 / bump.epsilon)))
        grid = _check_grid_size(cut, d)
        vals = _bump_lattice_values(bump, geometry, grid)
        fld = analyze(GridField(geometry, grid, vals.astype(complex)), cut, real=True)
        c = fld.coeffs.copy()
        c[0] = geometry.volume  # force mass one
        fld = FourierField(fld.freqs, c, reality_flag=True)

    elif kind == "gauss-bump":
        ctr = np.asarray(center if center is not None else tuple(s / 2 for s in geometry.side_lengths))
        if cutoff is None:
            cut, kmax = 1, 64
            while cut < kmax and math.exp(-0.5 * sigma**2 * (2 * np.pi * (cut + 1) / max(geometry.side_lengths)) ** 2) > 1e-15:
                cut += 1
        else:
            cut = cutoff
        freqs = frequency_lattice(geometry, cut)
        decay = np.exp(-0.5 * sigma**2 * freqs.lam)
        c = amplitude * decay * np.exp(-1j * (freqs.omega @ ctr))
        c[0] = 1.0
        fld = FourierField(freqs, c, reality_flag=True)

    else:
        raise ConfigError(f"unknown density kind {kind!r}")

    probe = synthesize(fld, _check_grid_size(fld.freqs.cutoff, d))
    mn = float(np.real(probe.values).min())
    if mn <= 0:
        raise ModelClassError(f"{kind} construction is not positive: minimum {mn:.6g}")
    if floor_delta is None:
        floor_delta = mn * (1 - 1e-9)
    if norm_bound_L is None:
        norm_bound_L = compute_norm(fld, Sobolev(smoothness_s)) * (1 + 1e-6)
    return DensityModel(fld, smoothness_s, floor_delta, norm_bound_L, alpha)


# --- sampling ---------------------------------------------------------------


def sample(density: DensityModel, n: int, seed: int) -> SampleSet:
    """n i.i.d. points with law f dx by rejection against the uniform proposal.

    Deterministic given (density, n, seed).  The envelope is the sup of f on an
    8x-oversampled grid with a 1e-6 relative safety margin; any point where f
    exceeds the envelope aborts the run instead of quietly biasing the law.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    geom = density.geometry
    d = geom.dim
    if n == 0:
        return SampleSet(geom, np.empty((0, d)), seed, 1.0)
    envelope = density.sup() * 1.000001
    sides = np.asarray(geom.side_lengths)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    accepted: list[np.ndarray] = []
    have = 0
    proposed = 0
    while have < n:
        batch = max(1024, int(1.5 * (n - have) * envelope * geom.volume) + 16)
        pts = rng.random((batch, d)) * sides
        u = rng.random(batch)
        fvals = np.real(density.field.evaluate(pts))
        if np.any(fvals > envelope):
            worst = float(fvals.max())
            raise SamplerIntegrityError(f"density value {worst:.9g} exceeds envelope {envelope:.9g}")
        keep = u * envelope < fvals
        accepted.append(pts[keep])
        have += int(keep.sum())
        proposed += batch
    points = np.concatenate(accepted, axis=0)[:n]
    return SampleSet(geom, points, seed, have / proposed)


# --- estimation --------------------------------------------------------------


def empirical_coefficients(samples: SampleSet, freqs: FrequencySet) -> FourierField:
    """Raw empirical Fourier coefficients (1/n) sum_i e^{-i omega_k . X_i}."""
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    phases = samples.points @ freqs.omega.T
    coeffs = np.exp(-1j * phases).mean(axis=0)
    return FourierField(freqs, coeffs, reality_flag=True)


def preclip_estimate(
    samples: SampleSet,
    family: ProjectionFamily,
    level: int,
    cutoff: int | None = None,
) -> FourierField:
    """Projection estimator pi_D mu_n before clipping: psi(|omega_k|/D) times the
    empirical coefficients.  With a single sample this is exactly the kernel
    section K_D(X_1, .)."""
    if level < 1:
        raise ConfigError(f"projection level must be >= 1, got {level}")
    geom = samples.geometry
    if cutoff is None:
        cutoff = max(1, int(math.ceil(level * max(geom.side_lengths) / math.pi)))
    freqs = frequency_lattice(geom, cutoff)
    raw = empirical_coefficients(samples, freqs)
    return raw.with_coeffs(raw.coeffs * family.mode_multipliers(freqs, level))


def estimate_density(
    samples: SampleSet,
    family: ProjectionFamily,
    level: int,
    floor_delta: float,
    *,
    smoothness_s: float = 2.0,
    alpha: float = 1.0,
    cutoff: int | None = None,
) -> DensityModel:
    """Projection estimator pi_D mu_n, clipped at the floor and renormalized.

    Pre-clip coefficient at mode k is psi(|omega_k|/D) * (1/n) sum_i e^{-i omega_k X_i}.
    When the pre-clip estimate already sits above the floor everywhere, the model
    keeps the pre-clip coefficient array unchanged (clipping is a strict no-op);
    otherwise values are maxed with the floor on the synthesis grid and the result
    is divided by its mass.  The stored floor is the minimum actually achieved.
    """
    if not (floor_delta > 0):
        raise ConfigError("floor must be positive")
    geom = samples.geometry
    pre = preclip_estimate(samples, family, level, cutoff)
    cutoff = pre.freqs.cutoff
    grid = _check_grid_size(cutoff, geom.dim)
    vals = np.real(synthesize(pre, grid).values)
    mn = float(vals.min())
    if mn >= floor_delta:
        fld = pre
        achieved = mn
    else:
        clipped = np.maximum(vals, floor_delta)
        mass = clipped.mean() * geom.volume  # zero mode of the clipped field
        clipped = clipped / mass
        fld = analyze(GridField(geom, grid, clipped.astype(complex)), cutoff, real=True)
        c = fld.coeffs.copy()
        c[0] = geom.volume
        fld = FourierField(fld.freqs, c, reality_flag=True)
        # band-limiting the clipped values rings below the grid min; record what the
        # stored field actually achieves
        achieved = float(np.real(synthesize(fld, grid).values).min())
        if achieved <= 0:
            raise ModelClassError(
                f"clipped estimate not positive after band-limiting (min {achieved:.6g}); "
                "use a larger floor or more samples"
            )
    norm = compute_norm(fld, Sobolev(smoothness_s)) * (1 + 1e-6)
    return DensityModel(fld, smoothness_s, achieved * (1 - 1e-9), norm, alpha)


_BANDWIDTH_EXPONENTS = {
    "density": lambda s, d: 1.0 / (2 * s + d),
    "quadratic": lambda s, d: 2.0 / (4 * s + d),
    "cubic_1": lambda s, d: 1.0 / (4 * s + d),
    "cubic_2": lambda s, d: 1.5 / (4 * s + d),
    "cubic_3": lambda s, d: 2.0 / (4 * s + d),
}


def bandwidth(n: int, s: float, d: int, rule: str, c: float = 1.0) -> int:
    """Integer level D = max(1, ceil(c * n^e)) for the rule's rate exponent e."""
    if rule not in _BANDWIDTH_EXPONENTS:
        raise ConfigError(f"unknown bandwidth rule {rule!r}; know {sorted(_BANDWIDTH_EXPONENTS)}")
    if n < 1 or s < 2 or d < 1:
        raise ConfigError(f"bandwidth needs n >= 1, s >= 2, d >= 1, got {(n, s, d)}")
    e = _BANDWIDTH_EXPONENTS[rule](s, d)
    x = c * float(n) ** e
    # rel-1e-12 nudge so exact powers (1024^{1/5} = 4) do not ceil upward off a ulp
    return max(1, int(math.ceil(x * (1 - 1e-12))))


# --- serialization -----------------------------------------------------------


def samples_to_csv(samples: SampleSet) -> str:
    d = samples.geometry.dim
    out = io.StringIO()
    out.write(",".join(f"x{i + 1}" for i in range(d)) + "\n")
    for row in samples.points:
        out.write(",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


def samples_from_csv(text: str, geometry: TorusGeometry, seed: int = 0) -> SampleSet:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split(",")
    if len(head) != geometry.dim:
        raise ValueError(f"CSV has {len(head)} columns, geometry wants {geometry.dim}")
    pts = np.array([[float(tok) for tok in ln.split(",")] for ln in lines[1:]], dtype=float)
    if pts.size == 0:
        pts = np.empty((0, geometry.dim))
    return SampleSet(geometry, pts, seed, float("nan"))
