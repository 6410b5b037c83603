"""Measurement operators: partial coordinates (P), distances (D), density (E).

Each operator maps ``(n_atoms, 3)`` coordinates to a flat observation vector
and exposes its Jacobian action (``jvp``) and adjoint action (``vjp``).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np

from .geometry import Backbone, ca_indices
from .prior import CovarianceFactor

MODALITIES = ("P", "D", "E")
DEGENERATE_DISTANCE = 1e-8


class OutOfGridError(ValueError):
    pass


class DegenerateDistanceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class DensityGridSpec:
    """Periodic voxel grid for density rendering.

    Modes are retained when ``|k| <= 1 / resolution_cutoff`` with
    ``k = n / extent`` for integer triples ``n``. Because the density is real,
    only one of each ``+-n`` pair is kept: ``n_x > 0``, or ``n_x == 0 and
    n_y > 0``, or ``n_x == n_y == 0 and n_z >= 0``. Retained modes are listed
    in lexicographic order of ``(n_x, n_y, n_z)``; the observation vector is
    the real parts in that order followed by the imaginary parts.
    """

    origin: tuple
    shape: tuple
    spacing: float = 1.0
    atom_width: float = 0.8
    resolution_cutoff: float = 2.0
    kernel_radius: float = 5.0  # in units of atom_width

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.origin) != 3 or len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError("origin and shape must be 3-vectors with positive shape")
        if self.spacing <= 0 or self.atom_width <= 0 or self.resolution_cutoff <= 0:
            raise ValueError("spacing, atom_width and resolution_cutoff must be positive")
        if self.spacing > self.resolution_cutoff / 2:
            raise ValueError("spacing must not exceed resolution_cutoff / 2")

    @classmethod
    def covering(cls, coords, spacing=1.0, atom_width=0.8, resolution_cutoff=2.0, padding=None):
        """Grid enclosing ``coords`` with at least ``padding`` Angstrom on each side.

        The default padding is ``3 * atom_width + 4`` so that moderately
        displaced structures still satisfy the margin check.
        """
        pts = coords.coords if isinstance(coords, Backbone) else np.asarray(coords, dtype=float).reshape(-1, 3)
        pad = 3 * atom_width + 4.0 if padding is None else padding
        lo = pts.min(axis=0) - pad
        hi = pts.max(axis=0) + pad
        shape = np.ceil((hi - lo) / spacing).astype(int)
        # center the box on the structure
        origin = (lo + hi) / 2 - shape * spacing / 2
        return cls(tuple(origin), tuple(shape), spacing, atom_width, resolution_cutoff)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.shape) * self.spacing

    @property
    def margin(self) -> float:
        return 3.0 * self.atom_width

    @cached_property
    def modes(self) -> np.ndarray:
        """Retained integer frequency triples, shape ``(m, 3)``, lexicographic."""
        axes = [np.fft.fftfreq(n, 1.0 / n).astype(int) for n in self.shape]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        k = grid / self.extent
        keep = np.sum(k * k, axis=1) <= (1.0 / self.resolution_cutoff) ** 2 + 1e-12
        nx, ny, nz = grid.T
        half = (nx > 0) | ((nx == 0) & (ny > 0)) | ((nx == 0) & (ny == 0) & (nz >= 0))
        sel = grid[keep & half]
        order = np.lexsort((sel[:, 2], sel[:, 1], sel[:, 0]))
        return sel[order]

    @cached_property
    def mode_flat_index(self) -> np.ndarray:
        wrapped = np.mod(self.modes, self.shape)
        return np.ravel_multi_index(tuple(wrapped.T), self.shape)

    @property
    def frequencies(self) -> np.ndarray:
        """Retained spatial frequencies in cycles per Angstrom."""
        return self.modes / self.extent

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "shape": list(self.shape),
            "spacing": self.spacing,
            "atom_width": self.atom_width,
            "resolution_cutoff": self.resolution_cutoff,
            "kernel_radius": self.kernel_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DensityGridSpec":
        return cls(**d)


def _coords(x) -> np.ndarray:
    if isinstance(x, Backbone):
        return x.coords
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 3) if x.ndim == 1 else x


# --- P: partial coordinates ---------------------------------------------------

def _check_indices(idx, n_atoms):
    idx = np.asarray(idx, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n_atoms):
        raise IndexError(f"atom index out of range [0, {n_atoms})")
    return idx


def apply_P(x, atoms) -> np.ndarray:
    x = _coords(x)
    return x[_check_indices(atoms, len(x))].ravel()


def jvp_P(x, atoms, d) -> np.ndarray:
    return apply_P(d, atoms)


def vjp_P(x, atoms, u) -> np.ndarray:
    x = _coords(x)
    out = np.zeros_like(x)
    np.add.at(out, _check_indices(atoms, len(x)), np.asarray(u, dtype=float).reshape(-1, 3))
    return out


# --- D: pairwise distances ----------------------------------------------------

def _check_pairs(pairs, n_atoms):
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("distance pair joins an atom to itself")
    _check_indices(pairs, n_atoms)
    return pairs


def apply_D(x, pairs) -> np.ndarray:
    x = _coords(x)
    p = _check_pairs(pairs, len(x))
    return np.linalg.norm(x[p[:, 0]] - x[p[:, 1]], axis=1)


def _unit_vectors(x, pairs):
    diff = x[pairs[:, 0]] - x[pairs[:, 1]]
    dist = np.linalg.norm(diff, axis=1)
    degenerate = dist < DEGENERATE_DISTANCE
    unit = np.zeros_like(diff)
    ok = ~degenerate
    unit[ok] = diff[ok] / dist[ok, None]
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} coincident distance pair(s); zero subgradient used",
            DegenerateDistanceWarning,
            stacklevel=3,
        )
    return unit


def jvp_D(x, pairs, d) -> np.ndarray:
    x, d = _coords(x), _coords(d)
    p = _check_pairs(pairs, len(x))
    unit = _unit_vectors(x, p)
    return np.sum(unit * (d[p[:, 0]] - d[p[:, 1]]), axis=1)


def vjp_D(x, pairs, u) -> np.ndarray:
    x = _coords(x)
    p = _check_pairs(pairs, len(x))
    contrib = _unit_vectors(x, p) * np.asarray(u, dtype=float)[:, None]
    out = np.zeros_like(x)
    np.add.at(out, p[:, 0], contrib)
    np.add.at(out, p[:, 1], -contrib)
    return out


# --- E: low-pass density Fourier coefficients ---------------------------------

def _splat(x, spec: DensityGridSpec):
    """Voxel indices, displacements and kernel values for every atom.

    The isotropic kernel factorizes over axes, so it is built from three
    one-dimensional profiles per atom.
    """
    h = spec.spacing
    origin = np.asarray(spec.origin)
    r = int(np.ceil(spec.kernel_radius * spec.atom_width / h))
    o = np.arange(-r, r + 1)
    k = len(o)
    base = np.rint((x - origin) / h).astype(int)
    idx = base[:, :, None] + o  # (atoms, 3, k)
    d1 = idx * h + origin[:, None] - x[:, :, None]
    w2 = spec.atom_width**2
    e1 = np.exp(-0.5 * d1 * d1 / w2)
    norm = (2 * np.pi * w2) ** -1.5
    g = norm * (e1[:, 0, :, None, None] * e1[:, 1, None, :, None] * e1[:, 2, None, None, :])
    nx, ny, nz = spec.shape
    w = np.mod(idx, np.asarray(spec.shape)[:, None])
    flat = (w[:, 0, :, None, None] * ny + w[:, 1, None, :, None]) * nz + w[:, 2, None, None, :]
    n = len(x)
    disp = np.empty((n, k, k, k, 3))
    disp[..., 0] = d1[:, 0, :, None, None]
    disp[..., 1] = d1[:, 1, None, :, None]
    disp[..., 2] = d1[:, 2, None, None, :]
    return flat.reshape(n, -1), disp.reshape(n, -1, 3), g.reshape(n, -1)


def check_in_grid(x, spec: DensityGridSpec):
    x = _coords(x)
    lo = np.asarray(spec.origin) + spec.margin
    hi = np.asarray(spec.origin) + spec.extent - spec.margin
    bad = np.any((x < lo) | (x > hi), axis=1)
    if bad.any():
        raise OutOfGridError(
            f"{int(bad.sum())} atom(s) closer than {spec.margin:.2f} A to the grid boundary"
        )


def render_density(x, spec: DensityGridSpec) -> np.ndarray:
    """Sum of unit-mass isotropic Gaussians sampled on the periodic grid."""
    x = _coords(x)
    flat, _, g = _splat(x, spec)
    n = int(np.prod(spec.shape))
    return np.bincount(flat.ravel(), weights=g.ravel(), minlength=n).reshape(spec.shape)


def _coefficients(grid, spec):
    f = np.fft.fftn(grid).ravel()[spec.mode_flat_index] * spec.spacing**3
    return np.concatenate([f.real, f.imag])


def apply_E(x, spec: DensityGridSpec, check_bounds: bool = True) -> np.ndarray:
    """Low-pass Fourier coefficients of the rendered density.

    Scaled by the voxel volume, so the zero-frequency coefficient approximates
    the atom count.
    """
    x = _coords(x)
    if check_bounds:
        check_in_grid(x, spec)
    return _coefficients(render_density(x, spec), spec)


def jvp_E(x, spec: DensityGridSpec, d) -> np.ndarray:
    x, d = _coords(x), _coords(d)
    flat, disp, g = _splat(x, spec)
    # d/dx_a of the kernel at voxel v is g * (v - x_a) / w^2
    dg = g * np.einsum("akc,ac->ak", disp, d) / spec.atom_width**2
    n = int(np.prod(spec.shape))
    grid = np.bincount(flat.ravel(), weights=dg.ravel(), minlength=n).reshape(spec.shape)
    return _coefficients(grid, spec)


def vjp_E(x, spec: DensityGridSpec, u) -> np.ndarray:
    x = _coords(x)
    u = np.asarray(u, dtype=float)
    m = spec.n_modes
    spectrum = np.zeros(int(np.prod(spec.shape)), dtype=complex)
    spectrum[spec.mode_flat_index] = u[:m] + 1j * u[m:]
    n = spectrum.size
    q = (np.fft.ifftn(spectrum.reshape(spec.shape)).real * (n * spec.spacing**3)).ravel()
    flat, disp, g = _splat(x, spec)
    weight = q[flat] * g / spec.atom_width**2
    return np.einsum("ak,akc->ac", weight, disp)


# --- dispatch -----------------------------------------------------------------

def forward(modality, x, meta, check_bounds: bool = True) -> np.ndarray:
    if modality == "P":
        return apply_P(x, meta)
    if modality == "D":
        return apply_D(x, meta)
    if modality == "E":
        return apply_E(x, meta, check_bounds=check_bounds)
    raise ValueError(f"unknown modality {modality!r}")


def jvp(modality, x, meta, d) -> np.ndarray:
    return {"P": jvp_P, "D": jvp_D, "E": jvp_E}[modality](x, meta, d)


def gradient(modality, x, meta, residual) -> np.ndarray:
    """Adjoint Jacobian action ``J(x)^T residual`` in coordinate space."""
    residual = np.asarray(residual, dtype=float)
    expected = output_size(modality, meta)
    if residual.shape != (expected,):
        raise ValueError(f"residual length {residual.size} != observation length {expected}")
    return {"P": vjp_P, "D": vjp_D, "E": vjp_E}[modality](x, meta, residual)


def output_size(modality, meta) -> int:
    if modality == "P":
        return 3 * len(np.asarray(meta).ravel())
    if modality == "D":
        return len(np.asarray(meta).reshape(-1, 2))
    if modality == "E":
        return 2 * meta.n_modes
    raise ValueError(f"unknown modality {modality!r}")


def _kernel_gradient_bound(spec: DensityGridSpec) -> float:
    """Bound on ||J|| for a single atom, including first-order aliases."""
    k = spec.frequencies
    alias = np.stack(np.meshgrid(*[[-1, 0, 1]] * 3, indexing="ij"), axis=-1).reshape(-1, 3) / spec.spacing
    kk = k[:, None, :] + alias[None]
    mag = np.linalg.norm(kk, axis=-1)
    ghat = np.exp(-2 * np.pi**2 * spec.atom_width**2 * mag**2)
    amp = np.sum(2 * np.pi * mag * ghat, axis=1)
    return float(np.sqrt(np.sum(amp**2)))


def lipschitz_bound(modality, meta, cov: CovarianceFactor) -> float:
    """Upper bound on the Lipschitz constant of ``z -> F(R z)`` (Euclidean norms)."""
    n = cov.n_atoms
    if modality == "P":
        idx = _check_indices(meta, n).ravel()
        if idx.size == 0:
            return 0.0
        if cov.kind == "identity":
            return cov.scale
        return float(np.linalg.norm(cov.matrix()[idx], 2))
    if modality == "D":
        p = _check_pairs(meta, n)
        if len(p) == 0:
            return 0.0
        B = np.zeros((len(p), n))
        B[np.arange(len(p)), p[:, 0]] = 1.0
        B[np.arange(len(p)), p[:, 1]] = -1.0
        return float(np.linalg.norm(B @ cov.matrix(), 2))
    if modality == "E":
        return float(np.sqrt(n) * _kernel_gradient_bound(meta) * cov.norm())
    raise ValueError(f"unknown modality {modality!r}")


def entry_lipschitz(modality, meta, cov: CovarianceFactor, x=None, n_probes: int = 8, seed=0) -> float:
    """Root-mean-square row norm of the Jacobian of ``z -> F(R z)``.

    This is the per-entry gain: isotropic latent noise of variance ``tau^2``
    perturbs each observation entry by ``tau^2 * L^2`` on average. Exact for P
    and D; for E it is a Hutchinson estimate at ``x`` (default: a compact
    random cloud at the grid center).
    """
    n = cov.n_atoms
    if modality == "P":
        idx = _check_indices(meta, n).ravel()
        if idx.size == 0:
            return 0.0
        rows = _rows(cov, idx)
        return float(np.sqrt(np.mean(np.sum(rows * rows, axis=1))))
    if modality == "D":
        p = _check_pairs(meta, n)
        if len(p) == 0:
            return 0.0
        diff = _rows(cov, p[:, 0]) - _rows(cov, p[:, 1])
        return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    if modality == "E":
        rng = np.random.default_rng(seed)
        if x is None:
            mid = np.asarray(meta.origin) + meta.extent / 2
            x = mid + rng.normal(0.0, 3.0, (n, 3))
        x = _coords(x)
        total = 0.0
        for _ in range(n_probes):
            xi = rng.standard_normal((n, 3))
            jv = jvp_E(x, meta, cov.apply(xi))
            total += float(jv @ jv)
        return float(np.sqrt(total / n_probes / output_size("E", meta)))
    raise ValueError(f"unknown modality {modality!r}")


def jacobian_diag(modality, x, meta, cov: CovarianceFactor, entry_gain=None) -> np.ndarray:
    """Diagonal of ``(J R)^T (J R)`` in latent coordinates, shape ``(n_atoms, 3)``.

    Exact for P and D. For E the diagonal is replaced by its mean, taken from
    ``entry_gain`` (the per-entry gain, see :func:`entry_lipschitz`).
    """
    x = _coords(x)
    n = cov.n_atoms
    a2 = cov.scale**2
    if modality == "E":
        if entry_gain is None:
            entry_gain = entry_lipschitz("E", meta, cov, x)
        return np.full((n, 3), entry_gain**2 * output_size("E", meta) / (3 * n))
    if modality == "P":
        idx = _check_indices(meta, n).ravel()
        hits = np.zeros(n)
        np.add.at(hits, idx, 1.0)
        per_atom = hits if cov.kind == "identity" else np.cumsum(hits[::-1])[::-1]
        return a2 * np.repeat(per_atom[:, None], 3, axis=1)
    if modality == "D":
        p = _check_pairs(meta, n)
        u2 = _unit_vectors(x, p) ** 2
        out = np.zeros((n, 3))
        if cov.kind == "identity":
            np.add.at(out, p[:, 0], u2)
            np.add.at(out, p[:, 1], u2)
        else:
            # latent j moves atoms j.. together; pair (a, b) sees it iff min < j <= max
            lo, hi = p.min(axis=1), p.max(axis=1)
            np.add.at(out, lo + 1, u2)
            np.add.at(out, np.minimum(hi + 1, n - 1), -u2 * (hi + 1 < n)[:, None])
            out = np.cumsum(out, axis=0)
        return a2 * out
    raise ValueError(f"unknown modality {modality!r}")


def _rows(cov: CovarianceFactor, idx) -> np.ndarray:
    """Rows ``idx`` of R (per Cartesian axis)."""
    idx = np.asarray(idx, dtype=int)
    if cov.kind == "identity":
        rows = np.zeros((len(idx), cov.n_atoms))
        rows[np.arange(len(idx)), idx] = cov.scale
        return rows
    return cov.scale * (np.arange(cov.n_atoms)[None, :] <= idx[:, None]).astype(float)


# --- measurements -------------------------------------------------------------

@dataclass(eq=False)
class Measurement:
    """One modality's observation ``y`` with its operator descriptor ``meta``.

    ``meta`` is an atom-index array (P), a ``(k, 2)`` atom-pair array (D) or a
    DensityGridSpec (E). ``true_sigma`` is only known for simulated data.
    """

    modality: str
    y: np.ndarray
    meta: Any
    true_sigma: float | None = None
    label: str = field(default="")

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.modality == "P":
            self.meta = np.asarray(self.meta, dtype=int).ravel()
        elif self.modality == "D":
            self.meta = np.asarray(self.meta, dtype=int).reshape(-1, 2)
        elif not isinstance(self.meta, DensityGridSpec):
            raise TypeError("E-modality meta must be a DensityGridSpec")
        if self.y.size != output_size(self.modality, self.meta):
            raise ValueError(
                f"{self.modality}: y has {self.y.size} entries, meta implies {output_size(self.modality, self.meta)}"
            )
        if not self.label:
            self.label = self.modality

    def forward(self, x, check_bounds: bool = True) -> np.ndarray:
        return forward(self.modality, x, self.meta, check_bounds=check_bounds)

    def to_dict(self) -> dict:
        if self.modality == "P":
            meta = {"atoms": self.meta.tolist()}
        elif self.modality == "D":
            meta = {"pairs": self.meta.tolist()}
        else:
            meta = {"grid": self.meta.to_dict()}
        return {
            "modality": self.modality,
            "label": self.label,
            "meta": meta,
            "y": self.y.tolist(),
            "true_sigma": self.true_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Measurement":
        meta = d["meta"]
        if d["modality"] == "P":
            m = meta["atoms"]
        elif d["modality"] == "D":
            m = meta["pairs"]
        else:
            m = DensityGridSpec.from_dict(meta["grid"])
        return cls(d["modality"], d["y"], m, d.get("true_sigma"), d.get("label", ""))


def save_measurements(measurements, path):
    with open(path, "w") as fh:
        json.dump([m.to_dict() for m in measurements], fh)


def load_measurements(path) -> list[Measurement]:
    with open(path) as fh:
        return [Measurement.from_dict(d) for d in json.load(fh)]


def simulate_measurement(modality, x_true, meta, sigma: float, seed=None) -> Measurement:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    clean = forward(modality, x_true, meta)
    rng = np.random.default_rng(seed)
    y = clean + sigma * rng.standard_normal(clean.shape) if sigma > 0 else clean.copy()
    return Measurement(modality, y, meta, true_sigma=float(sigma))


def select_partial(n_residues: int, count: int, rng) -> np.ndarray:
    """Random subset of CA atom indices, sorted."""
    count = min(count, n_residues)
    res = np.sort(rng.choice(n_residues, size=count, replace=False))
    return ca_indices(n_residues)[res]


def select_pairs(n_residues: int, count: int, rng) -> np.ndarray:
    """Uniformly random distinct CA-CA pairs, as atom indices."""
    i, j = np.triu_indices(n_residues, 1)
    count = min(count, len(i))
    pick = np.sort(rng.choice(len(i), size=count, replace=False))
    ca = ca_indices(n_residues)
    return np.stack([ca[i[pick]], ca[j[pick]]], axis=1)
