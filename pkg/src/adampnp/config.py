"""JSON experiment configuration with documented defaults."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .library import LibrarySpec
from .sampler import SELECTIONS, STEP_SCALINGS


def _f(default=None, doc: str = "", factory=None):
    meta = {"doc": doc}
    if factory is not None:
        return field(default_factory=factory, metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class PriorConfig:
    component_std: float = _f(0.25, "per-coordinate std of each mixture component, whitened units")
    covariance_kind: str = _f("identity", "noise geometry R: identity or chain")
    covariance_scale: float = _f(2.0, "scale of R in Angstrom")
    library: LibrarySpec = _f(doc="mixture library built around the ground truth", factory=LibrarySpec)


@dataclass
class ScheduleConfig:
    n_steps: int = _f(200, "number of diffusion steps T")
    beta_min: float = _f(1e-4, "first beta of the linear schedule")
    beta_max: float = _f(0.05, "last beta of the linear schedule")


@dataclass
class SamplerConfig:
    eta: float = _f(1.0, "guidance step size")
    rho: float = _f(0.5, "momentum decay")
    adaptive: bool = _f(True, "estimate noise levels online")
    fixed_sigmas: Any = _f(None, "per-modality sigmas when adaptive is off; null uses the true values")
    gamma: float = _f(1.25, "strength of the denoiser-error bias correction")
    epsilon: float = _f(1e-6, "variance floor")
    ema_decay: float = _f(0.9, "EMA decay of the noise estimates")
    kappa: Any = _f(None, "median calibration constant; null means 1/0.4549")
    step_scaling: str = _f("jacobi", "none, curvature or jacobi")
    literal_sign: bool = _f(False, "ascend instead of descend the data misfit")
    n_samples: int = _f(3, "independent trajectories per reconstruction")
    selection: str = _f("profile", "profile, weighted or oracle_rmsd")


@dataclass
class ModalityConfig:
    partial_count: int = _f(45, "number of observed CA atoms for P")
    distance_count: int = _f(64, "number of observed CA-CA distances for D")
    density_sigma: float = _f(50.0, "noise std of E in Fourier-coefficient units")
    grid_spacing: float = _f(1.0, "voxel edge, Angstrom")
    atom_width: float = _f(0.8, "Gaussian std per atom, Angstrom")
    resolution_cutoff: float = _f(2.0, "E keeps modes with |k| <= 1/cutoff")
    meta_seed_offset: int = _f(1000, "selection RNG for seed s and modality k is seeded with [offset + s, k]")


@dataclass
class SparsityConfig:
    grid: list = _f(doc="paired (n_distances, n_partial) rows", factory=lambda: [
        [63, 11], [126, 16], [252, 22], [504, 32], [1008, 45], [2016, 63]
    ])
    noise_levels: list = _f(doc="sigma for P and D", factory=lambda: [0.05])
    combo: str = _f("PDE", "modality combination held fixed across the grid")
    n_samples: int = _f(1, "trajectories per cell")


@dataclass
class NoiseReportConfig:
    distance_count: int = _f(1008, "D observations used for calibration")
    noise_levels: list = _f(doc="true sigma_D values", factory=lambda: [0.05, 0.1, 0.2])
    n_samples: int = _f(1, "trajectories per cell")


@dataclass
class ReconstructConfig:
    combo: str = _f("PD", "modalities for the single reconstruction")
    sigma: float = _f(0.2, "noise std of P and D")
    measurements: Any = _f(None, "JSON file of measurements to replay instead of simulating")


@dataclass
class ExperimentConfig:
    ground_truth: Any = _f(None, "PDB path; null builds the synthetic 64-residue helix-turn-helix")
    n_residues: int = _f(64, "length of the synthetic ground truth")
    prior: PriorConfig = _f(doc="mixture prior", factory=PriorConfig)
    schedule: ScheduleConfig = _f(doc="diffusion schedule", factory=ScheduleConfig)
    sampler: SamplerConfig = _f(doc="guidance and noise estimation", factory=SamplerConfig)
    modalities: ModalityConfig = _f(doc="measurement layout", factory=ModalityConfig)
    combos: list = _f(doc="combinations for sweep-combos", factory=lambda: ["P", "D", "E", "PD", "PE", "DE", "PDE"])
    noise_levels: list = _f(doc="sigma for P and D in sweep-combos, Angstrom", factory=lambda: [0.2, 0.4, 0.6])
    seeds: list = _f(doc="random seeds", factory=lambda: [0, 1, 2])
    sparsity: SparsityConfig = _f(doc="sweep-sparsity settings", factory=SparsityConfig)
    noise_report: NoiseReportConfig = _f(doc="noise-report settings", factory=NoiseReportConfig)
    reconstruct: ReconstructConfig = _f(doc="reconstruct settings", factory=ReconstructConfig)
    output_dir: str = _f("results", "where tables and structures are written")
    threads: int = _f(1, "worker processes for sweeps")

    def __post_init__(self):
        validate_config(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

ALPHA_BAR_T_MAX = 0.05


class ConfigError(ValueError):
    pass


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"{cls.__name__} expects a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        target = _NESTED.get((cls.__name__, name))
        kwargs[name] = _build(target, value) if target is not None else value
    return cls(**kwargs)


_NESTED = {
    ("ExperimentConfig", "prior"): PriorConfig,
    ("ExperimentConfig", "schedule"): ScheduleConfig,
    ("ExperimentConfig", "sampler"): SamplerConfig,
    ("ExperimentConfig", "modalities"): ModalityConfig,
    ("ExperimentConfig", "sparsity"): SparsityConfig,
    ("ExperimentConfig", "noise_report"): NoiseReportConfig,
    ("ExperimentConfig", "reconstruct"): ReconstructConfig,
    ("PriorConfig", "library"): LibrarySpec,
}


def _combo_ok(c) -> bool:
    return isinstance(c, str) and len(c) > 0 and set(c) <= set("PDE") and len(set(c)) == len(c)


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise ConfigError on an inconsistent configuration."""
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if any(not isinstance(s, int) or isinstance(s, bool) for s in cfg.seeds):
        raise ConfigError("seeds must be integers")
    for name, levels in (
        ("noise_levels", cfg.noise_levels),
        ("sparsity.noise_levels", cfg.sparsity.noise_levels),
        ("noise_report.noise_levels", cfg.noise_report.noise_levels),
    ):
        if not levels or any(not s >= 0 for s in levels):
            raise ConfigError(f"{name} must be a nonempty list of values >= 0")
    if not cfg.combos or not all(_combo_ok(c) for c in cfg.combos):
        raise ConfigError("combos must be nonempty strings over P, D, E without repeats")
    for name, c in (("sparsity.combo", cfg.sparsity.combo), ("reconstruct.combo", cfg.reconstruct.combo)):
        if not _combo_ok(c):
            raise ConfigError(f"{name} must be a string over P, D, E")
    for row in cfg.sparsity.grid:
        if len(row) != 2 or min(row) < 0:
            raise ConfigError("sparsity.grid rows must be [n_distances, n_partial] with counts >= 0")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.prior.covariance_kind not in ("identity", "chain"):
        raise ConfigError("prior.covariance_kind must be identity or chain")
    sc = cfg.sampler
    if not sc.eta > 0:
        raise ConfigError("sampler.eta must be positive")
    if not 0 <= sc.rho < 1:
        raise ConfigError("sampler.rho must lie in [0, 1)")
    if sc.gamma < 0 or not sc.epsilon > 0 or not 0 <= sc.ema_decay < 1:
        raise ConfigError("need sampler.gamma >= 0, epsilon > 0 and ema_decay in [0, 1)")
    if sc.kappa is not None and not sc.kappa > 0:
        raise ConfigError("sampler.kappa must be positive")
    if sc.step_scaling not in STEP_SCALINGS:
        raise ConfigError(f"sampler.step_scaling must be one of {STEP_SCALINGS}")
    if sc.selection not in SELECTIONS:
        raise ConfigError(f"sampler.selection must be one of {SELECTIONS}")
    if sc.n_samples < 1 or cfg.sparsity.n_samples < 1 or cfg.noise_report.n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    sch = cfg.schedule
    if sch.n_steps < 1 or not 0 < sch.beta_min <= sch.beta_max:
        raise ConfigError("schedule needs n_steps >= 1 and 0 < beta_min <= beta_max")
    # the sampler starts from pure noise, so the forward process has to get there
    alpha_bar_T = math.exp(-0.5 * sch.n_steps * (sch.beta_min + sch.beta_max))
    if alpha_bar_T > ALPHA_BAR_T_MAX:
        raise ConfigError(
            f"schedule ends at alpha_bar_T = {alpha_bar_T:.3g} > {ALPHA_BAR_T_MAX}; "
            "raise n_steps or beta_max"
        )
    if cfg.ground_truth is None and cfg.n_residues < 8:
        raise ConfigError("synthetic ground truth needs at least 8 residues")


def _type_name(tp) -> str:
    name = tp if isinstance(tp, str) else getattr(tp, "__name__", str(tp))
    return {"float": "number", "int": "integer", "bool": "boolean", "str": "string", "list": "array"}.get(name, "any")


def config_schema(cls=ExperimentConfig) -> dict:
    """JSON-schema-like description with defaults and one line per field."""
    props = {}
    instance = cls() if cls is not ExperimentConfig else None
    for f in dataclasses.fields(cls):
        doc = f.metadata.get("doc", "")
        target = _NESTED.get((cls.__name__, f.name))
        if target is not None:
            entry = config_schema(target)
            entry["description"] = doc
        else:
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:
                default = f.default_factory()
            else:
                default = getattr(instance, f.name, None)
            entry = {"type": _type_name(f.type), "default": default, "description": doc}
        props[f.name] = entry
    return {"type": "object", "properties": props}
