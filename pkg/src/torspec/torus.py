"""Flat-torus geometry, frequency lattices, transforms, norms and smoothing projections.

Everything downstream represents functions on the rescaled torus with side lengths
(kappa_1, ..., kappa_d) through truncated Fourier coefficient arrays.  The coefficient
convention is

    u_k = integral of u(x) exp(-i omega_k . x) dx,   omega_k = 2 pi (k_1/kappa_1, ...),

so for a volume-one torus Parseval reads sum |u_k|^2 = L2 norm squared.  All values are
immutable after construction and every operation here is a pure function; transforms are
stateless numpy FFT calls, so sharing across parallel workers is safe.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Invalid torus geometry (non-positive side length, unsupported dimension)."""


class ResolutionError(ValueError):
    """Grid too coarse for the requested band (would alias represented modes)."""


class InvalidNormSpec(ValueError):
    """Norm parameters outside the supported range."""


@dataclass(frozen=True)
class TorusGeometry:
    """Rescaled flat d-torus, d in {1,2,3}, with side lengths kappa_i > 0."""

    dim: int
    side_lengths: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise GeometryError(f"dim must be 1, 2 or 3, got {self.dim}")
        if len(self.side_lengths) != self.dim:
            raise GeometryError("side_lengths length must equal dim")
        if any(not (s > 0) for s in self.side_lengths):
            raise GeometryError(f"side lengths must be positive, got {self.side_lengths}")
        object.__setattr__(self, "side_lengths", tuple(float(s) for s in self.side_lengths))

    @property
    def volume(self) -> float:
        return float(np.prod(self.side_lengths))


def unit_torus(dim: int = 1) -> TorusGeometry:
    """Volume-one torus with all side lengths 1."""
    return TorusGeometry(dim, (1.0,) * dim)


@dataclass(frozen=True)
class FrequencySet:
    """Deterministic enumeration of the lattice box {k : |k_i| <= cutoff}.

    Per-dimension order is the FFT order 0, 1, ..., K, -K, ..., -1 combined in C order,
    so index 0 is k = 0 and the index of -k is arithmetically computable from the index
    of k (see `neg_indices`).
    """

    geometry: TorusGeometry
    cutoff: int
    kvec: np.ndarray = field(repr=False, compare=False, default=None)
    omega: np.ndarray = field(repr=False, compare=False, default=None)
    lam: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        if self.cutoff < 0:
            raise GeometryError(f"cutoff must be >= 0, got {self.cutoff}")
        n = 2 * self.cutoff + 1
        axes = [np.fft.fftfreq(n, 1.0 / n).astype(np.int64) for _ in range(self.geometry.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        kvec = np.stack([m.ravel() for m in mesh], axis=1)
        scale = 2.0 * np.pi / np.asarray(self.geometry.side_lengths)
        omega = kvec * scale
        lam = np.sum(omega * omega, axis=1)
        object.__setattr__(self, "kvec", kvec)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "lam", lam)

    def __len__(self) -> int:
        return self.kvec.shape[0]

    def index_of(self, k) -> int:
        """Flat enumeration index of a lattice vector k."""
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        if k.shape != (self.geometry.dim,) or np.any(np.abs(k) > self.cutoff):
            raise GeometryError(f"lattice vector {k} outside the cutoff-{self.cutoff} box")
        n = 2 * self.cutoff + 1
        idx = 0
        for i in range(self.geometry.dim):
            idx = idx * n + int(k[i]) % n
        return idx

    def neg_indices(self) -> np.ndarray:
        """Index array mapping position of k to position of -k."""
        n = 2 * self.cutoff + 1
        per_dim = (-np.arange(n)) % n
        idx = np.zeros((), dtype=np.int64)
        for _ in range(self.geometry.dim):
            idx = idx[..., None] * n + per_dim
        return idx.ravel()

    def fft_positions(self, points_per_dim: int) -> tuple[np.ndarray, ...]:
        """Per-dimension positions of each mode inside a points_per_dim FFT array."""
        if points_per_dim < 2 * self.cutoff + 2:
            raise ResolutionError(
                f"grid of {points_per_dim} points per dim aliases cutoff {self.cutoff}; "
                f"need at least {2 * self.cutoff + 2}"
            )
        return tuple(self.kvec[:, i] % points_per_dim for i in range(self.geometry.dim))


def frequency_lattice(geometry: TorusGeometry, cutoff: int) -> FrequencySet:
    """Enumerated lattice box with precomputed omega_k and lambda_k = |omega_k|^2."""
    return FrequencySet(geometry, cutoff)


@dataclass(frozen=True)
class FourierField:
    """Truncated coefficient array over a FrequencySet.

    reality_flag promises Hermitian symmetry u_{-k} = conj(u_k); the constructor
    verifies it rather than trusting the caller.
    """

    freqs: FrequencySet
    coeffs: np.ndarray
    reality_flag: bool = False

    def __post_init__(self) -> None:
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (len(self.freqs),):
            raise ValueError(f"coefficient array has shape {c.shape}, expected ({len(self.freqs)},)")
        object.__setattr__(self, "coeffs", c)
        if self.reality_flag:
            dev = np.max(np.abs(c - np.conj(c[self.freqs.neg_indices()])))
            scale = 1.0 + float(np.max(np.abs(c))) if c.size else 1.0
            if dev > 1e-8 * scale:
                raise ValueError(f"reality_flag set but Hermitian symmetry violated by {dev:.3e}")

    @property
    def geometry(self) -> TorusGeometry:
        return self.freqs.geometry

    def with_coeffs(self, coeffs: np.ndarray, real: bool | None = None) -> "FourierField":
        return FourierField(self.freqs, coeffs, self.reality_flag if real is None else real)

    def mean(self) -> float:
        """Average value, i.e. u_0 / volume."""
        return float(np.real(self.coeffs[0])) / self.geometry.volume

    def l2_norm(self) -> float:
        return math.sqrt(float(np.sum(np.abs(self.coeffs) ** 2)) / self.geometry.volume)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Values at arbitrary torus points, shape (n, d) -> (n,), by direct summation."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        phase = pts @ self.freqs.omega.T
        vals = np.exp(1j * phase) @ self.coeffs / self.geometry.volume
        return np.real(vals) if self.reality_flag else vals


def hermitian_part(field: FourierField) -> FourierField:
    """Project onto the Hermitian-symmetric (real-valued) part."""
    sym = 0.5 * (field.coeffs + np.conj(field.coeffs[field.freqs.neg_indices()]))
    return FourierField(field.freqs, sym, reality_flag=True)


def point_mass(freqs: FrequencySet, x) -> FourierField:
    """Coefficients of the Dirac mass at x restricted to the band: e^{-i omega_k . x}."""
    x = np.asarray(x, dtype=float).reshape(freqs.geometry.dim)
    return FourierField(freqs, np.exp(-1j * (freqs.omega @ x)), reality_flag=True)


@dataclass(frozen=True)
class GridField:
    """Values on the uniform tensor grid x_j = (j/G) * kappa; quadrature weight vol/G^d."""

    geometry: TorusGeometry
    points_per_dim: int
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        expected = (self.points_per_dim,) * self.geometry.dim
        if v.shape != expected:
            raise ValueError(f"values shape {v.shape}, expected {expected}")
        object.__setattr__(self, "values", v)

    @property
    def quad_weight(self) -> float:
        return self.geometry.volume / self.points_per_dim**self.geometry.dim

    def integral(self, integrand: np.ndarray | None = None) -> complex | float:
        data = self.values if integrand is None else integrand
        return data.sum() * self.quad_weight

    def axes(self) -> list[np.ndarray]:
        g = self.points_per_dim
        return [np.arange(g) * (s / g) for s in self.geometry.side_lengths]


def synthesize(fld: FourierField, points_per_dim: int) -> GridField:
    """Evaluate the field on the uniform grid via an inverse FFT.

    Requires points_per_dim >= 2*cutoff + 2 so no represented mode aliases.
    """
    freqs = fld.freqs
    pos = freqs.fft_positions(points_per_dim)
    d = freqs.geometry.dim
    arr = np.zeros((points_per_dim,) * d, dtype=np.complex128)
    arr[pos] = fld.coeffs
    vals = np.fft.ifftn(arr) * (points_per_dim**d / freqs.geometry.volume)
    if fld.reality_flag:
        vals = np.real(vals).astype(np.complex128)
    return GridField(freqs.geometry, points_per_dim, vals)


def analyze(grid: GridField, cutoff: int, real: bool | None = None) -> FourierField:
    """Coefficients up to the cutoff from grid values (exact for band-limited input)."""
    freqs = FrequencySet(grid.geometry, cutoff)
    pos = freqs.fft_positions(grid.points_per_dim)
    spec = np.fft.fftn(grid.values) * grid.quad_weight
    coeffs = spec[pos]
    if real is None:
        v = np.asarray(grid.values)
        scale = 1.0 + float(np.max(np.abs(v))) if v.size else 1.0
        real = bool(np.max(np.abs(np.imag(v))) <= 1e-10 * scale)
    if real:
        neg = freqs.neg_indices()
        coeffs = 0.5 * (coeffs + np.conj(coeffs[neg]))
    return FourierField(freqs, coeffs, reality_flag=real)


def resample_pointwise(fld: FourierField, fn, cutoff: int, points_per_dim: int | None = None) -> FourierField:
    """Apply a pointwise map to a real field on an oversampled grid, re-analyze.

    Used for non-band-limited targets like f^alpha or log f; residual aliasing decays
    spectrally with the grid size. Default grid is 4x the output band.
    """
    if points_per_dim is None:
        points_per_dim = 4 * (2 * cutoff + 1)
    points_per_dim = max(points_per_dim, 2 * max(cutoff, fld.freqs.cutoff) + 2)
    g = synthesize(fld, points_per_dim)
    vals = np.real(g.values)
    out = fn(vals)
    return analyze(GridField(fld.geometry, points_per_dim, np.asarray(out, dtype=np.complex128)), cutoff, real=True)


# --- norms ---------------------------------------------------------------


@dataclass(frozen=True)
class NormSpec:
    """One of Lp(p), Sobolev(t, p), Besov(s, p, q); p, q in [1, inf]."""

    kind: str
    p: float = 2.0
    t: float = 0.0
    s: float = 0.0
    q: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("lp", "sobolev", "besov"):
            raise InvalidNormSpec(f"unknown norm kind {self.kind!r}")
        for name, val in (("p", self.p), ("q", self.q)):
            if not (val >= 1.0):
                raise InvalidNormSpec(f"{name} must be in [1, inf], got {val}")


def Lp(p: float) -> NormSpec:
    return NormSpec("lp", p=float(p))


def Sobolev(t: float, p: float = 2.0) -> NormSpec:
    return NormSpec("sobolev", p=float(p), t=float(t))


def Besov(s: float, p: float, q: float) -> NormSpec:
    return NormSpec("besov", p=float(p), s=float(s), q=float(q))


def _grid_lp(vals: np.ndarray, p: float, weight: float) -> float:
    mags = np.abs(vals)
    if math.isinf(p):
        return float(mags.max()) if mags.size else 0.0
    return float((np.sum(mags**p) * weight) ** (1.0 / p))


def compute_norm(fld: FourierField, spec: NormSpec, grid_resolution: int | None = None) -> float:
    """Norm of a field.

    Sobolev(t, 2) is exact from coefficients: sqrt(sum (1+lambda_k)^t |u_k|^2 / vol).
    L2 likewise. Other (kind, p) combinations go through multiplier + grid quadrature,
    with grid_resolution defaulting to four points per represented mode.
    """
    freqs = fld.freqs
    vol = fld.geometry.volume
    if grid_resolution is None:
        grid_resolution = 4 * (freqs.cutoff + 1)
    grid_resolution = max(grid_resolution, 2 * freqs.cutoff + 2)

    if spec.kind == "lp":
        if spec.p == 2.0:
            return fld.l2_norm()
        g = synthesize(fld, grid_resolution)
        return _grid_lp(g.values, spec.p, g.quad_weight)

    if spec.kind == "sobolev":
        mult = (1.0 + freqs.lam) ** (spec.t / 2.0)
        if spec.p == 2.0:
            return math.sqrt(float(np.sum(mult**2 * np.abs(fld.coeffs) ** 2)) / vol)
        lifted = fld.with_coeffs(fld.coeffs * mult)
        g = synthesize(lifted, grid_resolution)
        return _grid_lp(g.values, spec.p, g.quad_weight)

    # Besov: dyadic shells 2^j <= (1 + |omega_k|^2)^{1/2} < 2^{j+1}, ties to the lower shell
    modulus = np.sqrt(1.0 + freqs.lam)
    shells = np.floor(np.log2(modulus) * (1 + 1e-14)).astype(int)
    block_norms = []
    for j in range(int(shells.max()) + 1):
        mask = shells == j
        if not mask.any():
            block_norms.append(0.0)
            continue
        block = fld.with_coeffs(np.where(mask, fld.coeffs, 0.0))
        if spec.p == 2.0:
            bn = block.l2_norm()
        else:
            g = synthesize(block, grid_resolution)
            bn = _grid_lp(g.values, spec.p, g.quad_weight)
        block_norms.append((2.0 ** (j * spec.s)) * bn)
    arr = np.asarray(block_norms)
    if math.isinf(spec.q):
        return float(arr.max()) if arr.size else 0.0
    return float(np.sum(arr**spec.q) ** (1.0 / spec.q))


# --- smoothing projection family -----------------------------------------


@dataclass(frozen=True)
class ProjectionFamily:
    """Radial Fourier taper pi_D: multiplier psi(|omega_k| / D) on mode k.

    The profile is a raised cosine: 1 on [0, 1], 0 on [2, inf), half-cosine ramp
    between, so multipliers always lie in [0, 1] and pi_D is the identity on the
    band |omega_k| <= D.
    """

    inner: float = 1.0
    outer: float = 2.0

    def profile(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        ramp = 0.5 * (1.0 + np.cos(np.pi * (r - self.inner) / (self.outer - self.inner)))
        return np.where(r <= self.inner, 1.0, np.where(r >= self.outer, 0.0, ramp))

    def mode_multipliers(self, freqs: FrequencySet, level: int) -> np.ndarray:
        if level < 1:
            raise ValueError(f"projection level must be >= 1, got {level}")
        return self.profile(np.sqrt(freqs.lam) / float(level))


RAISED_COSINE = ProjectionFamily()


def taper_projection(inp, family: ProjectionFamily, level: int, freqs: FrequencySet | None = None) -> FourierField:
    """Apply pi_D to a field, or build pi_D delta_x from a point-mass location.

    A FourierField input keeps its own band; a point input needs `freqs` to fix the
    representation band and yields coefficients psi(|omega_k|/D) e^{-i omega_k . x}.
    """
    if isinstance(inp, FourierField):
        mult = family.mode_multipliers(inp.freqs, level)
        return inp.with_coeffs(inp.coeffs * mult)
    if freqs is None:
        raise ValueError("point-mass input requires an explicit FrequencySet")
    base = point_mass(freqs, inp)
    return base.with_coeffs(base.coeffs * family.mode_multipliers(freqs, level))


# --- serialization --------------------------------------------------------


def field_to_csv(fld: FourierField) -> str:
    """Flat text record: header 'd, kappa..., cutoff' then one 'k_1..k_d, re, im' row per mode."""
    head = [str(fld.geometry.dim)]
    head += [repr(s) for s in fld.geometry.side_lengths]
    head.append(str(fld.freqs.cutoff))
    out = io.StringIO()
    out.write(", ".join(head) + "\n")
    for k, c in zip(fld.freqs.kvec, fld.coeffs):
        cols = [str(int(ki)) for ki in k] + [repr(float(c.real)), repr(float(c.imag))]
        out.write(", ".join(cols) + "\n")
    return out.getvalue()


def field_from_csv(text: str) -> FourierField:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    head = [tok.strip() for tok in lines[0].split(",")]
    d = int(head[0])
    kappa = tuple(float(tok) for tok in head[1 : 1 + d])
    cutoff = int(head[1 + d])
    freqs = FrequencySet(TorusGeometry(d, kappa), cutoff)
    coeffs = np.zeros(len(freqs), dtype=np.complex128)
    for ln in lines[1:]:
        toks = [tok.strip() for tok in ln.split(",")]
        k = [int(t) for t in toks[:d]]
        coeffs[freqs.index_of(k)] = float(toks[d]) + 1j * float(toks[d + 1])
    neg = freqs.neg_indices()
    real = bool(np.max(np.abs(coeffs - np.conj(coeffs[neg]))) <= 1e-8 * (1 + np.max(np.abs(coeffs))))
    return FourierField(freqs, coeffs, reality_flag=real)
