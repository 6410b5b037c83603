"""Synthetic backbones built from torsion angles, and prior-library variants."""

from __future__ import annotations

import numpy as np

from .geometry import ATOMS_PER_RESIDUE, Backbone, center

# ideal backbone geometry (Engh & Huber)
BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
BOND_C_O = 1.231
ANGLE_N_CA_C = np.deg2rad(111.2)
ANGLE_CA_C_N = np.deg2rad(116.2)
ANGLE_C_N_CA = np.deg2rad(121.7)
ANGLE_CA_C_O = np.deg2rad(120.5)

SS_TORSIONS = {
    "H": (-57.0, -47.0),
    "E": (-120.0, 130.0),
    "P": (-75.0, 145.0),
}


def _place(a, b, c, bond, angle, torsion):
    """Position of atom d given a, b, c and the internal coordinates of d."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([
        -bond * np.cos(angle),
        bond * np.sin(angle) * np.cos(torsion),
        bond * np.sin(angle) * np.sin(torsion),
    ])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def build_backbone(phi, psi, omega=None) -> Backbone:
    """Backbone from per-residue torsions in degrees, centered at the origin."""
    phi = np.deg2rad(np.asarray(phi, dtype=float))
    psi = np.deg2rad(np.asarray(psi, dtype=float))
    n = len(phi)
    if len(psi) != n or n < 1:
        raise ValueError("phi and psi must have the same positive length")
    omega = np.full(n, np.pi) if omega is None else np.deg2rad(np.asarray(omega, dtype=float))

    N = np.zeros((n, 3))
    CA = np.zeros((n, 3))
    C = np.zeros((n, 3))
    N[0] = [0.0, 0.0, 0.0]
    CA[0] = [BOND_N_CA, 0.0, 0.0]
    C[0] = CA[0] + BOND_CA_C * np.array([-np.cos(ANGLE_N_CA_C), np.sin(ANGLE_N_CA_C), 0.0])
    for i in range(1, n):
        N[i] = _place(N[i - 1], CA[i - 1], C[i - 1], BOND_C_N, ANGLE_CA_C_N, psi[i - 1])
        CA[i] = _place(CA[i - 1], C[i - 1], N[i], BOND_N_CA, ANGLE_C_N_CA, omega[i - 1])
        C[i] = _place(C[i - 1], N[i], CA[i], BOND_CA_C, ANGLE_N_CA_C, phi[i])
    O = np.zeros((n, 3))
    for i in range(n):
        # carbonyl O sits trans to the following N
        O[i] = _place(N[i], CA[i], C[i], BOND_C_O, ANGLE_CA_C_O, psi[i] + np.pi)
    coords = np.stack([N, CA, C, O], axis=1).reshape(-1, 3)
    return center(Backbone(coords))


def torsions_from_ss(ss: str, loop_torsions=None):
    """phi/psi lists for a secondary-structure string over {H, E, P, L}.

    ``L`` positions consume ``loop_torsions`` in order.
    """
    loop = iter(loop_torsions or [])
    phi, psi = [], []
    for s in ss:
        if s == "L":
            a, b = next(loop)
        else:
            a, b = SS_TORSIONS[s]
        phi.append(a)
        psi.append(b)
    return phi, psi


# Turn between antiparallel helices; the helix axes end up about 9.4 A apart.
HAIRPIN_LOOP = [(-54.0, -38.0), (137.0, 44.0), (-44.0, 1.0), (110.0, -91.0), (-87.0, 123.0)]


def helix_turn_helix(n_residues: int = 64, loop_torsions=None) -> Backbone:
    """Two alpha helices joined by a short loop; the default test protein."""
    loop = list(loop_torsions or HAIRPIN_LOOP)
    n_loop = len(loop)
    first = (n_residues - n_loop) // 2
    second = n_residues - n_loop - first
    ss = "H" * first + "L" * n_loop + "H" * second
    return build_backbone(*torsions_from_ss(ss, loop))


def helix(n_residues: int = 64) -> Backbone:
    return build_backbone(*torsions_from_ss("H" * n_residues))


def reverse_threading(b: Backbone) -> Backbone:
    """Same atom positions with residue order reversed (N and C swapped).

    The atom set is unchanged, so any density rendered from it is identical
    to that of ``b``, while residue-indexed data (coordinates, distances)
    disagree.
    """
    res = b.coords.reshape(-1, ATOMS_PER_RESIDUE, 3)[::-1]
    return Backbone(res[:, [2, 1, 0, 3]].reshape(-1, 3))


def shift_threading(b: Backbone, shift: int) -> Backbone:
    """Circularly shift residue labels by ``shift``; the atom set is unchanged."""
    res = b.coords.reshape(-1, ATOMS_PER_RESIDUE, 3)
    return Backbone(np.roll(res, -shift, axis=0).reshape(-1, 3))


def perturb_torsions(b_phi, b_psi, scale_deg: float, rng) -> Backbone:
    phi = np.asarray(b_phi) + rng.normal(0.0, scale_deg, len(b_phi))
    psi = np.asarray(b_psi) + rng.normal(0.0, scale_deg, len(b_psi))
    return build_backbone(phi, psi)


def perturb_coords(b: Backbone, scale: float, rng) -> Backbone:
    return center(Backbone(b.coords + rng.normal(0.0, scale, b.coords.shape)))


def dihedral(a, b, c, d) -> np.ndarray:
    """Signed dihedral angles in degrees for stacked point arrays."""
    b0 = a - b
    b1 = c - b
    b2 = d - c
    b1n = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    v = b0 - np.sum(b0 * b1n, axis=-1, keepdims=True) * b1n
    w = b2 - np.sum(b2 * b1n, axis=-1, keepdims=True) * b1n
    x = np.sum(v * w, axis=-1)
    y = np.sum(np.cross(b1n, v) * w, axis=-1)
    return np.degrees(np.arctan2(y, x))


def backbone_torsions(b: Backbone):
    """(phi, psi, omega) per residue in degrees.

    Undefined terminal angles (phi of the first residue, psi and omega of
    the last) are filled with the ideal helix/trans values.
    """
    res = b.coords.reshape(-1, ATOMS_PER_RESIDUE, 3)
    N, CA, C = res[:, 0], res[:, 1], res[:, 2]
    n = len(res)
    phi = np.full(n, SS_TORSIONS["H"][0])
    psi = np.full(n, SS_TORSIONS["H"][1])
    omega = np.full(n, 180.0)
    if n > 1:
        phi[1:] = dihedral(C[:-1], N[1:], CA[1:], C[1:])
        psi[:-1] = dihedral(N[:-1], CA[:-1], C[:-1], N[1:])
        omega[:-1] = dihedral(CA[:-1], C[:-1], N[1:], CA[1:])
    return phi, psi, omega
