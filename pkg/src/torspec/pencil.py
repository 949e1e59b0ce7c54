"""Galerkin discretization of the weighted Laplacian as a Hermitian pencil.

In the Fourier basis the negative weighted Laplacian -Delta_f with weight
w = f^alpha has the matrix pair (S, M):

    S_{kl} = (omega_k . omega_l) w_{k-l},   M_{kl} = w_{k-l},

both Hermitian by construction since w is real.  Eigenvalues of (S, M) are the
operator eigenvalues; the resolvent (z + Delta_f)^{-1} is the solve (zM - S)c = M r.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .densities import DensityModel
from .torus import FourierField, FrequencySet, frequency_lattice


class DiscretizationError(RuntimeError):
    """Assembled mass matrix not positive definite; the weight grid was too coarse."""


class NearSingularError(ValueError):
    """Resolvent argument too close to the pencil spectrum."""


class IllPosedContourError(ValueError):
    """An eigenvalue sits within the safety margin of the contour."""


@dataclass(frozen=True)
class SpectralPencil:
    """Hermitian matrix pair (S, M) for -Delta_f on the cutoff-K Fourier basis."""

    freqs: FrequencySet
    stiffness: np.ndarray
    mass: np.ndarray
    alpha: float
    density: DensityModel
    _eig_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        s, m = self.stiffness, self.mass
        n = len(self.freqs)
        if s.shape != (n, n) or m.shape != (n, n):
            raise ValueError("matrix shapes do not match the frequency set")
        scale = float(np.abs(s).max()) + 1.0
        if np.abs(s - s.conj().T).max() > 1e-10 * scale:
            raise ValueError("stiffness matrix is not Hermitian")
        if np.abs(m - m.conj().T).max() > 1e-10 * (float(np.abs(m).max()) + 1.0):
            raise ValueError("mass matrix is not Hermitian")
        zero = self.freqs.index_of([0] * self.freqs.geometry.dim)
        if np.abs(s[zero]).max() > 1e-12 * scale or np.abs(s[:, zero]).max() > 1e-12 * scale:
            raise ValueError("stiffness row/column for the constant mode must vanish")

    @property
    def size(self) -> int:
        return len(self.freqs)

    def eigenvalues_only(self) -> np.ndarray:
        """Spectrum without vectors, cached on the pencil."""
        if not self._eig_cache:
            self._eig_cache.append(scipy.linalg.eigh(self.stiffness, self.mass, eigvals_only=True))
        return self._eig_cache[0]


def assemble_pencil(
    density: DensityModel,
    cutoff: int,
    alpha: float | None = None,
    oversample: int = 4,
) -> SpectralPencil:
    """Assemble (S, M) from the density's weight f^alpha.

    The weight is analyzed at band 2*cutoff from an oversample*(2*cutoff+1) grid
    (oversample >= 2 keeps that grid alias-free for the double band; the default 4
    suppresses the non-band-limited remainder of f^alpha).
    """
    if alpha is None:
        alpha = density.alpha
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    if oversample < 2:
        raise ValueError(f"oversample must be >= 2, got {oversample}")
    geom = density.geometry
    freqs = frequency_lattice(geom, cutoff)
    wband = 2 * cutoff
    grid = oversample * (2 * cutoff + 1)
    w = density.weight(alpha, cutoff=wband, points_per_dim=grid)

    # difference indexing k_a - k_b into the double-band FFT-order lattice
    n_small, n_big = 2 * cutoff + 1, 2 * wband + 1
    d = geom.dim
    flat = np.zeros((len(freqs), len(freqs)), dtype=np.int64)
    for i in range(d):
        ka = freqs.kvec[:, i]
        flat = flat * n_big + (ka[:, None] - ka[None, :]) % n_big
    mass = w.coeffs[flat]
    stiffness = (freqs.omega @ freqs.omega.T) * mass

    try:
        scipy.linalg.cholesky(mass)
    except scipy.linalg.LinAlgError as exc:
        raise DiscretizationError(
            "mass matrix is not positive definite; increase the oversample factor"
        ) from exc
    return SpectralPencil(freqs, stiffness, mass, float(alpha), density)


@dataclass(frozen=True)
class EigenSystem:
    """Full weighted eigendecomposition: ascending eigenvalues, M-orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    pencil: SpectralPencil

    def __post_init__(self) -> None:
        lam, g = self.eigenvalues, self.eigenvectors
        if len(lam) > 1 and np.any(np.diff(lam) < -1e-9 * (1.0 + np.abs(lam[:-1]))):
            raise ValueError("eigenvalues must be nondecreasing")
        if abs(lam[0]) > 1e-8:
            raise ValueError(f"lowest eigenvalue should vanish, got {lam[0]:.3e}")
        m = self.pencil.mass
        gram = g.conj().T @ m @ g
        if np.abs(gram - np.eye(len(lam))).max() > 1e-10:
            raise ValueError("eigenvectors are not weighted-orthonormal")
        resid = self.pencil.stiffness @ g - m @ g * lam[None, :]
        norms = np.linalg.norm(resid, axis=0)
        if np.any(norms > 1e-8 * (1.0 + np.abs(lam))):
            worst = int(np.argmax(norms / (1.0 + np.abs(lam))))
            raise ValueError(f"eigen residual {norms[worst]:.3e} too large at index {worst}")

    def __len__(self) -> int:
        return len(self.eigenvalues)


def _tie_sorted(lam: np.ndarray, vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # stable order inside numerically equal groups: lattice index of the dominant coefficient
    order = np.arange(len(lam))
    i = 0
    while i < len(lam):
        j = i + 1
        while j < len(lam) and lam[j] - lam[i] <= 1e-11 * (1.0 + abs(lam[i])):
            j += 1
        if j - i > 1:
            dom = [int(np.argmax(np.abs(vecs[:, c]))) for c in order[i:j]]
            order[i:j] = order[i:j][np.argsort(dom, kind="stable")]
        i = j
    return lam[order], vecs[:, order]


def solve_spectrum(pencil: SpectralPencil) -> EigenSystem:
    """Dense generalized Hermitian eigensolve; ties broken by dominant lattice index."""
    try:
        lam, vecs = scipy.linalg.eigh(pencil.stiffness, pencil.mass)
    except scipy.linalg.LinAlgError as exc:
        cond = np.linalg.cond(pencil.mass)
        raise DiscretizationError(f"eigensolve failed; cond(M) = {cond:.3e}") from exc
    lam, vecs = _tie_sorted(lam, vecs)
    if not pencil._eig_cache:
        pencil._eig_cache.append(lam)
    return EigenSystem(lam, vecs, pencil)


# --- resolvent and contours ---------------------------------------------------


@dataclass(frozen=True)
class Contour:
    """Counterclockwise circle in the spectral plane, trapezoid-discretized."""

    center: complex
    radius: float
    nodes: int = 64

    def __post_init__(self) -> None:
        if not (self.radius > 0):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.nodes < 4:
            raise ValueError(f"need at least 4 trapezoid nodes, got {self.nodes}")

    def points(self) -> np.ndarray:
        theta = 2.0 * np.pi * np.arange(self.nodes) / self.nodes
        return self.center + self.radius * np.exp(1j * theta)

    def distance_to(self, values: np.ndarray) -> np.ndarray:
        """Distance from the circle to each value: | |v - center| - radius |."""
        return np.abs(np.abs(np.asarray(values) - self.center) - self.radius)

    def encloses(self, values: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(values) - self.center) < self.radius


def resolvent_apply(
    pencil: SpectralPencil,
    z: complex,
    rhs: FourierField,
    margin: float = 1e-8,
) -> FourierField:
    """(z + Delta_f)^{-1} rhs via the pencil solve (zM - S)c = M rhs."""
    lam = pencil.eigenvalues_only()
    dist = np.abs(z - lam)
    if dist.min() <= margin:
        bad = lam[int(np.argmin(dist))]
        raise NearSingularError(f"z = {z} is within {margin:g} of eigenvalue {bad:.9g}")
    if rhs.freqs != pencil.freqs:
        raise ValueError("rhs band does not match the pencil basis")
    sol = scipy.linalg.solve(z * pencil.mass - pencil.stiffness, pencil.mass @ rhs.coeffs)
    return FourierField(pencil.freqs, sol)


def check_contour_margin(pencil: SpectralPencil, contour: Contour, margin_factor: float = 1e-3) -> None:
    lam = pencil.eigenvalues_only()
    dist = contour.distance_to(lam)
    bad = dist < margin_factor * contour.radius
    if np.any(bad):
        offenders = ", ".join(f"{v:.9g}" for v in lam[bad][:5])
        raise IllPosedContourError(
            f"eigenvalues [{offenders}] are within {margin_factor:g}*radius of the contour"
        )


def contour_quadrature_matrix(
    pencil: SpectralPencil,
    contour: Contour,
    margin_factor: float = 1e-3,
) -> np.ndarray:
    """Trapezoid discretization of (1/2 pi i) contour-int (z + Delta_f)^{-1} dz.

    Returns the projector in coefficient space: (r/nodes) sum_j e^{i theta_j}
    (z_j M - S)^{-1} M.  Geometric accuracy in the node count once the contour
    keeps its margin from the spectrum.
    """
    check_contour_margin(pencil, contour, margin_factor)
    n = pencil.size
    acc = np.zeros((n, n), dtype=np.complex128)
    theta = 2.0 * np.pi * np.arange(contour.nodes) / contour.nodes
    for t, z in zip(theta, contour.points()):
        sol = scipy.linalg.solve(z * pencil.mass - pencil.stiffness, pencil.mass)
        acc += np.exp(1j * t) * sol
    return acc * (contour.radius / contour.nodes)


# --- clustering and export -----------------------------------------------------


def cluster_ids(eigenvalues: np.ndarray, rel_gap: float = 1e-6) -> np.ndarray:
    """Group ascending eigenvalues: a break opens where the gap exceeds rel_gap*(1+|lam|)."""
    lam = np.asarray(eigenvalues)
    ids = np.zeros(len(lam), dtype=int)
    for i in range(1, len(lam)):
        ids[i] = ids[i - 1] + (1 if lam[i] - lam[i - 1] > rel_gap * (1.0 + abs(lam[i - 1])) else 0)
    return ids


def spectrum_to_csv(system: EigenSystem, rel_gap: float = 1e-6) -> str:
    out = io.StringIO()
    out.write("index, eigenvalue, cluster_id\n")
    ids = cluster_ids(system.eigenvalues, rel_gap)
    for i, (lam, cid) in enumerate(zip(system.eigenvalues, ids)):
        out.write(f"{i}, {float(lam)!r}, {cid}\n")
    return out.getvalue()
