"""Reference libraries for the mixture prior."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Backbone, center, kabsch_align, read_pdb
from .structures import (
    HAIRPIN_LOOP,
    backbone_torsions,
    build_backbone,
    shift_threading,
    torsions_from_ss,
)


@dataclass
class LibrarySpec:
    """How to assemble the mixture-prior library around a target backbone.

    n_copies : torsion-perturbed copies of the target.
    torsion_noise_deg : std of the phi/psi perturbation, degrees.
    register_shifts : circular residue shifts applied to every copy. These
        decoys occupy the same atom positions with the wrong residue
        labels, so their density is identical to the copy's.
    n_alt_folds : helix-turn-helix variants with a random 5-residue loop
        (only when the target has at least 12 residues).
    pdb_dir : optional directory; every ``*.pdb`` in it with the right
        length is added as a further component.
    seed : library RNG seed.
    """

    n_copies: int = 3
    torsion_noise_deg: float = 0.5
    register_shifts: list = field(default_factory=lambda: [-9, -7, -5, -4, 4, 5, 7, 9])
    n_alt_folds: int = 3
    pdb_dir: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def perturbed_copy(target: Backbone, noise_deg: float, rng) -> Backbone:
    """Rebuild ``target`` from jittered torsions, superposed on ``target``."""
    phi, psi, omega = backbone_torsions(target)
    n = len(phi)
    b = build_backbone(phi + rng.normal(0.0, noise_deg, n), psi + rng.normal(0.0, noise_deg, n), omega)
    return _superpose(b, target)


def alternative_fold(n_residues: int, rng) -> Backbone:
    """Helix-turn-helix with a uniformly random loop."""
    loop = [tuple(rng.uniform(-180.0, 180.0, 2)) for _ in range(len(HAIRPIN_LOOP))]
    first = (n_residues - len(loop)) // 2
    ss = "H" * first + "L" * len(loop) + "H" * (n_residues - len(loop) - first)
    return build_backbone(*torsions_from_ss(ss, loop))


def _superpose(b: Backbone, target: Backbone) -> Backbone:
    aln = kabsch_align(b, target, atom_mask=None)
    return Backbone(aln.apply(b.coords))


def load_pdb_dir(path, n_residues: int | None = None) -> list[Backbone]:
    """Backbones from every ``*.pdb`` in ``path`` (sorted by name), centered.

    Files with a different residue count are skipped when ``n_residues`` is
    given.
    """
    out = []
    for f in sorted(Path(path).glob("*.pdb")):
        b = center(read_pdb(f))
        if n_residues is None or b.n_residues == n_residues:
            out.append(b)
    return out


def build_library(target: Backbone, spec: LibrarySpec | None = None) -> list[Backbone]:
    """Library of backbones for :class:`GaussianMixturePrior`.

    Order: each perturbed copy followed by its register-shifted decoys, then
    alternative folds, then PDB-directory entries. Everything is superposed
    on ``target`` so the prior lives in the measurement frame.
    """
    spec = spec or LibrarySpec()
    rng = np.random.default_rng(spec.seed)
    lib = []
    for _ in range(spec.n_copies):
        c = perturbed_copy(target, spec.torsion_noise_deg, rng)
        lib.append(c)
        lib.extend(shift_threading(c, s) for s in spec.register_shifts)
    if target.n_residues >= 12:
        lib.extend(_superpose(alternative_fold(target.n_residues, rng), target) for _ in range(spec.n_alt_folds))
    if spec.pdb_dir:
        lib.extend(_superpose(b, target) for b in load_pdb_dir(spec.pdb_dir, target.n_residues))
    if not lib:
        raise ValueError("library specification produced no backbones")
    return lib
