"""Backbone coordinates, PDB ingestion and rigid superposition."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ATOM_NAMES = ("N", "CA", "C", "O")
ATOMS_PER_RESIDUE = len(ATOM_NAMES)


class PDBParseError(ValueError):
    """Raised on a malformed ATOM record; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyStructureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Backbone:
    """Backbone atoms of a single chain.

    ``coords`` has shape ``(4 * n_residues, 3)`` in Angstrom, residue-major
    with the fixed per-residue order N, CA, C, O.
    """

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        if coords.ndim == 1:
            if coords.size % 3:
                raise ValueError("flat coordinate vector length must be a multiple of 3")
            coords = coords.reshape(-1, 3)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (n_atoms, 3), got {coords.shape}")
        if coords.shape[0] == 0 or coords.shape[0] % ATOMS_PER_RESIDUE:
            raise ValueError(f"atom count {coords.shape[0]} is not a positive multiple of 4")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain non-finite values")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n_residues(self) -> int:
        return self.coords.shape[0] // ATOMS_PER_RESIDUE

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]

    @property
    def atom_labels(self) -> list[str]:
        return list(ATOM_NAMES) * self.n_residues

    @property
    def ca_indices(self) -> np.ndarray:
        return ca_indices(self.n_residues)

    @property
    def ca(self) -> np.ndarray:
        return self.coords[self.ca_indices]

    def flat(self) -> np.ndarray:
        return self.coords.ravel()

    def to_pdb(self, chain: str = "A") -> str:
        lines = []
        for k, (x, y, z) in enumerate(self.coords):
            res = k // ATOMS_PER_RESIDUE + 1
            name = ATOM_NAMES[k % ATOMS_PER_RESIDUE]
            lines.append(
                f"ATOM  {k + 1:5d}  {name:<3s} GLY {chain}{res:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00           {name[0]:>1s}"
            )
        lines.append("END")
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        if not isinstance(other, Backbone):
            return NotImplemented
        return np.array_equal(self.coords, other.coords)

    __hash__ = None


def ca_indices(n_residues: int) -> np.ndarray:
    return np.arange(n_residues) * ATOMS_PER_RESIDUE + 1


def _as_points(b) -> np.ndarray:
    if isinstance(b, Backbone):
        return b.coords
    pts = np.asarray(b, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 3)
    return pts


def parse_pdb(text: str) -> Backbone:
    """Read backbone atoms of the first model / first chain of PDB text.

    Residues lacking any of N, CA, C, O are dropped. Alternate locations are
    resolved by highest occupancy (first seen wins ties).
    """
    residues: dict[tuple, dict[str, tuple[float, np.ndarray]]] = {}
    order: list[tuple] = []
    chain_id = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6].strip()
        if record == "ENDMDL":
            break
        if record == "TER" and chain_id is not None:
            break
        if record != "ATOM":
            continue
        if len(line) < 54:
            raise PDBParseError("ATOM record shorter than coordinate columns", lineno)
        name = line[12:16].strip()
        altloc = line[16]
        chain = line[21]
        try:
            resseq = int(line[22:26])
            xyz = np.array([float(line[30:38]), float(line[38:46]), float(line[46:54])])
        except ValueError as exc:
            raise PDBParseError(f"bad numeric field ({exc})", lineno) from None
        occ_field = line[54:60].strip()
        try:
            occupancy = float(occ_field) if occ_field else 1.0
        except ValueError:
            raise PDBParseError(f"bad occupancy {occ_field!r}", lineno) from None
        if chain_id is None:
            chain_id = chain
        elif chain != chain_id:
            break
        if name not in ATOM_NAMES:
            continue
        key = (resseq, line[26])
        if key not in residues:
            residues[key] = {}
            order.append(key)
        atoms = residues[key]
        if name in atoms and altloc.strip() and atoms[name][0] >= occupancy:
            continue
        if name in atoms and not altloc.strip():
            continue
        atoms[name] = (occupancy, xyz)

    coords = [
        [residues[key][a][1] for a in ATOM_NAMES]
        for key in order
        if all(a in residues[key] for a in ATOM_NAMES)
    ]
    if not coords:
        raise EmptyStructureError("no residue with complete N, CA, C, O backbone")
    return Backbone(np.asarray(coords).reshape(-1, 3))


def read_pdb(path) -> Backbone:
    return parse_pdb(Path(path).read_text())


def center(b: Backbone) -> Backbone:
    c = b.coords - b.coords.mean(axis=0)
    # second pass removes the residual left by floating point summation
    return Backbone(c - c.mean(axis=0))


@dataclass(frozen=True)
class Alignment:
    """Rigid motion mapping mobile onto reference: ``x -> x @ rotation.T + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float

    def apply(self, points) -> np.ndarray:
        return _as_points(points) @ self.rotation.T + self.translation


def _select(points: np.ndarray, atom_mask) -> np.ndarray:
    if atom_mask is None:
        return points
    if isinstance(atom_mask, str):
        if atom_mask != "CA":
            raise ValueError(f"unknown atom mask {atom_mask!r}")
        return points[1::ATOMS_PER_RESIDUE]
    return points[np.asarray(atom_mask)]


def kabsch_align(mobile, reference, atom_mask=None) -> Alignment:
    """Least-squares superposition of ``mobile`` onto ``reference``.

    Both inputs may be Backbones or ``(n, 3)`` arrays. ``atom_mask`` selects
    the atoms used: ``None`` for all, ``"CA"`` for the alpha carbons of a
    backbone, or an index/boolean array.
    """
    a = _select(_as_points(mobile), atom_mask)
    b = _select(_as_points(reference), atom_mask)
    if a.shape != b.shape:
        raise ValueError(f"atom count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 3:
        raise ValueError("alignment needs at least 3 atoms")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    if np.array_equal(a, b):
        return Alignment(np.eye(3), np.zeros(3), 0.0)
    a0, b0 = a - ca, b - cb
    u, _, vt = np.linalg.svd(a0.T @ b0)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    diff = a0 @ rot.T - b0
    rmsd = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return Alignment(rot, cb - ca @ rot.T, rmsd)


def rmsd(mobile, reference, atom_mask="CA") -> float:
    """Aligned RMSD; defaults to the CA subset of two backbones."""
    return kabsch_align(mobile, reference, atom_mask=atom_mask).rmsd
