import numpy as np
import pytest

from adampnp.forward_models import DensityGridSpec, apply_E
from adampnp.geometry import ca_indices, rmsd
from adampnp.library import LibrarySpec, build_library, load_pdb_dir
from adampnp.structures import (
    HAIRPIN_LOOP,
    backbone_torsions,
    build_backbone,
    dihedral,
    helix,
    helix_turn_helix,
    reverse_threading,
    shift_threading,
    torsions_from_ss,
)


def test_dihedral_known_values():
    a = np.array([1.0, 0, 0])
    b = np.zeros(3)
    c = np.array([0, 0, 1.0])
    for ang in (-150.0, -60.0, 0.0, 45.0, 120.0):
        t = np.deg2rad(ang)
        d = np.array([np.cos(t), np.sin(t), 1.0])
        assert dihedral(a, b, c, d) == pytest.approx(ang, abs=1e-9)


def test_bond_geometry():
    b = helix(20)
    res = b.coords.reshape(-1, 4, 3)
    n_ca = np.linalg.norm(res[:, 1] - res[:, 0], axis=1)
    ca_c = np.linalg.norm(res[:, 2] - res[:, 1], axis=1)
    c_n = np.linalg.norm(res[1:, 0] - res[:-1, 2], axis=1)
    np.testing.assert_allclose(n_ca, 1.458, atol=1e-9)
    np.testing.assert_allclose(ca_c, 1.525, atol=1e-9)
    np.testing.assert_allclose(c_n, 1.329, atol=1e-9)
    # alpha helix rises about 1.5 A per residue
    ca = b.ca
    axis_len = np.linalg.norm(ca[-1] - ca[0])
    assert 1.3 < axis_len / 19 < 1.7


def test_torsion_roundtrip():
    rng = np.random.default_rng(0)
    phi = rng.uniform(-170, -40, 30)
    psi = rng.uniform(-60, 160, 30)
    b = build_backbone(phi, psi)
    p2, s2, om = backbone_torsions(b)
    np.testing.assert_allclose(p2[1:], phi[1:], atol=1e-8)
    np.testing.assert_allclose(s2[:-1], psi[:-1], atol=1e-8)
    np.testing.assert_allclose(np.abs(om[:-1]), 180.0, atol=1e-8)
    # the last psi has no following N; only the final O depends on it
    rebuilt = build_backbone(p2, s2, om)
    assert rmsd(rebuilt.coords[:-1], b.coords[:-1], atom_mask=None) <= 1e-9


def test_helix_turn_helix_layout():
    b = helix_turn_helix(64)
    assert b.n_residues == 64
    phi, psi = torsions_from_ss("H" * 29 + "L" * 5 + "H" * 30, HAIRPIN_LOOP)
    assert rmsd(build_backbone(phi, psi), b, atom_mask=None) <= 1e-9
    ca = b.ca
    # two antiparallel helices: the termini end up close to each other
    assert np.linalg.norm(ca[0] - ca[-1]) < 20.0


def test_threading_decoys_share_density():
    b = helix_turn_helix(24)
    spec = DensityGridSpec.covering(b)
    for decoy in (shift_threading(b, 5), reverse_threading(b)):
        np.testing.assert_allclose(apply_E(decoy, spec), apply_E(b, spec), atol=1e-9)
        assert rmsd(decoy, b) > 1.0
    np.testing.assert_array_equal(shift_threading(b, 3).ca[0], b.ca[3])


def test_library_composition():
    truth = helix_turn_helix(40)
    spec = LibrarySpec(n_copies=2, register_shifts=[-3, 3], n_alt_folds=2, seed=1)
    lib = build_library(truth, spec)
    assert len(lib) == 2 * 3 + 2
    assert all(x.n_residues == 40 for x in lib)
    copies = [lib[0], lib[3]]
    for c in copies:
        assert 0.0 < rmsd(c, truth) < 2.0
    assert rmsd(lib[1], truth) > 2.0
    # deterministic in the seed
    lib2 = build_library(truth, spec)
    assert all(np.array_equal(a.coords, b.coords) for a, b in zip(lib, lib2))


def test_library_from_pdb_dir(tmp_path):
    truth = helix_turn_helix(20)
    for i, n in enumerate((20, 20, 15)):
        (tmp_path / f"m{i}.pdb").write_text(helix(n).to_pdb())
    assert [b.n_residues for b in load_pdb_dir(tmp_path)] == [20, 20, 15]
    lib = build_library(truth, LibrarySpec(n_copies=0, n_alt_folds=0, pdb_dir=str(tmp_path)))
    assert len(lib) == 2
    with pytest.raises(ValueError):
        build_library(truth, LibrarySpec(n_copies=0, n_alt_folds=0))


def test_ca_indices():
    np.testing.assert_array_equal(ca_indices(3), [1, 5, 9])
