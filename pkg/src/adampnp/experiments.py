"""Sweeps over modality combinations, data sparsity and noise levels."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import forward_models as fm
from .config import ExperimentConfig
from .geometry import Backbone, center, read_pdb, rmsd
from .library import build_library
from .prior import CovarianceFactor, GaussianMixturePrior, NoiseSchedule, unconditional_sample
from .sampler import AdamPnP
from .structures import helix_turn_helix
from .tables import (
    ResultRecord,
    cell_summary,
    combo_summary,
    emit_tables,
    noise_summary,
    sort_records,
    write_trace_csv,
)

MODALITY_INDEX = {"P": 0, "D": 1, "E": 2}


@dataclass
class Setup:
    truth: Backbone
    prior: GaussianMixturePrior
    cov: CovarianceFactor
    sched: NoiseSchedule
    grid: fm.DensityGridSpec


def ground_truth(cfg: ExperimentConfig) -> Backbone:
    if cfg.ground_truth is None:
        return helix_turn_helix(cfg.n_residues)
    return center(read_pdb(cfg.ground_truth))


def build_setup(cfg: ExperimentConfig) -> Setup:
    truth = ground_truth(cfg)
    cov = CovarianceFactor(cfg.prior.covariance_kind, truth.n_atoms, cfg.prior.covariance_scale)
    sched = NoiseSchedule(cfg.schedule.n_steps, cfg.schedule.beta_min, cfg.schedule.beta_max)
    prior = GaussianMixturePrior(cfg.prior.component_std, cov, sched).fit(build_library(truth, cfg.prior.library))
    mc = cfg.modalities
    grid = fm.DensityGridSpec.covering(truth, mc.grid_spacing, mc.atom_width, mc.resolution_cutoff)
    return Setup(truth, prior, cov, sched, grid)


_SETUP_CACHE: dict = {}


def _cached_setup(cfg: ExperimentConfig) -> Setup:
    key = cfg.to_json()
    if key not in _SETUP_CACHE:
        _SETUP_CACHE.clear()
        _SETUP_CACHE[key] = build_setup(cfg)
    return _SETUP_CACHE[key]


def make_metas(cfg: ExperimentConfig, setup: Setup, seed: int, n_partial=None, n_distances=None) -> dict:
    """Observation layout for one seed; independent of the noise level."""
    mc = cfg.modalities
    n_res = setup.truth.n_residues
    # one stream per modality so changing one count leaves the other layout alone
    rng_p, rng_d = (np.random.default_rng([mc.meta_seed_offset + seed, MODALITY_INDEX[k]]) for k in "PD")
    n_partial = mc.partial_count if n_partial is None else n_partial
    n_distances = mc.distance_count if n_distances is None else n_distances
    return {
        "P": fm.select_partial(n_res, min(n_partial, n_res), rng_p),
        "D": fm.select_pairs(n_res, min(n_distances, n_res * (n_res - 1) // 2), rng_d),
        "E": setup.grid,
    }


def simulate(cfg: ExperimentConfig, setup: Setup, combo: str, sigma: float, seed: int, metas: dict) -> list:
    """Measurements for ``combo``; P and D use ``sigma``, E its own level.

    Modalities whose observation count is zero are left out.
    """
    out = []
    for k in combo:
        if k != "E" and len(metas[k]) == 0:
            continue
        s = cfg.modalities.density_sigma if k == "E" else sigma
        m = fm.simulate_measurement(k, setup.truth.coords, metas[k], s, seed=10 * seed + MODALITY_INDEX[k])
        out.append(m)
    if not out:
        raise ValueError(f"combo {combo!r} has no observations")
    return out


def make_estimator(cfg: ExperimentConfig, setup: Setup, seed: int, n_samples=None, record_trace=False) -> AdamPnP:
    sc = cfg.sampler
    kw = {} if sc.kappa is None else {"kappa": sc.kappa}
    return AdamPnP(
        prior=setup.prior,
        covariance=setup.cov,
        schedule=setup.sched,
        eta=sc.eta,
        rho=sc.rho,
        adaptive=sc.adaptive,
        fixed_sigmas=sc.fixed_sigmas,
        gamma=sc.gamma,
        epsilon=sc.epsilon,
        ema_decay=sc.ema_decay,
        step_scaling=sc.step_scaling,
        literal_sign=sc.literal_sign,
        n_samples=sc.n_samples if n_samples is None else n_samples,
        selection=sc.selection,
        random_state=seed,
        record_trace=record_trace,
        **kw,
    )


@dataclass(frozen=True)
class Job:
    experiment: str
    combo: str
    sigma: float
    seed: int
    n_distances: int | None = None
    n_partial: int | None = None
    n_samples: int | None = None


def run_job(cfg: ExperimentConfig, job: Job, record_trace: bool = False):
    """One reconstruction. Failures become records with status ``failed``.

    Returns ``(record, structure or None, trace)``.
    """
    t0 = time.perf_counter()
    setup = _cached_setup(cfg)
    metas = make_metas(cfg, setup, job.seed, job.n_partial, job.n_distances)
    nd, npart = len(metas["D"]), len(metas["P"])
    rec = ResultRecord(job.experiment, job.combo, float(job.sigma), int(job.seed), nd, npart)
    try:
        ms = simulate(cfg, setup, job.combo, job.sigma, job.seed, metas)
        est = make_estimator(cfg, setup, job.seed, job.n_samples, record_trace)
        est.fit(ms, truth=setup.truth)
        rec.rmsd = rmsd(est.structure_, setup.truth)
        rec.true_sigma = {m.modality: float(m.true_sigma) for m in ms}
        rec.sigma_hat = {m.modality: float(s) for m, s in zip(ms, est.sigma_hat_)}
        structure, trace = est.structure_, est.trace_
    except Exception as exc:  # recorded, the sweep goes on
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        structure, trace = None, []
    rec.wall_time = time.perf_counter() - t0
    return rec, structure, trace


def _job_worker(args):
    cfg_dict, job, record_trace = args
    rec, structure, trace = run_job(ExperimentConfig.from_dict(cfg_dict), job, record_trace)
    return rec, (None if structure is None else structure.coords), trace


def run_jobs(cfg: ExperimentConfig, jobs, threads=None, record_trace=False):
    """Run jobs serially or on a bounded process pool; output sorted by record key."""
    threads = cfg.threads if threads is None else threads
    args = [(cfg.to_dict(), j, record_trace) for j in jobs]
    if threads <= 1 or len(jobs) <= 1:
        results = [_job_worker(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job_worker, args))
    results.sort(key=lambda r: r[0].sort_key)
    return [(rec, None if c is None else Backbone(c), tr) for rec, c, tr in results]


def _label(rec: ResultRecord) -> str:
    s = f"{rec.experiment}_{rec.combo}_sigma{rec.sigma:g}_seed{rec.seed}"
    if rec.experiment == "sparsity":
        s += f"_nd{rec.n_distances}_np{rec.n_partial}"
    return s


def dump_outputs(results, out_dir, trace: bool = False) -> list[ResultRecord]:
    """Write final structures (and traces) next to the tables."""
    out = Path(out_dir)
    records = []
    for rec, structure, tr in results:
        if structure is not None:
            f = out / "structures" / f"{_label(rec)}.pdb"
            f.parent.mkdir(parents=True, exist_ok=True)
            f.write_text(structure.to_pdb())
            rec.structure_file = str(f.relative_to(out))
        if trace and tr:
            write_trace_csv(tr, out / "traces" / f"{_label(rec)}.csv")
        records.append(rec)
    return records


def _finish(cfg, results, out_dir, name, summaries, trace):
    records = dump_outputs(results, out_dir, trace) if out_dir is not None else [r for r, _, _ in results]
    if out_dir is not None:
        emit_tables(records, out_dir, name, summaries=summaries(records))
    return sort_records(records)


def run_combo_sweep(cfg: ExperimentConfig, out_dir=None, threads=None, trace=False) -> list[ResultRecord]:
    """Every combo x noise level x seed; tables ``combos*.csv`` in ``out_dir``."""
    jobs = [Job("combos", c, s, seed) for c in cfg.combos for s in cfg.noise_levels for seed in cfg.seeds]
    results = run_jobs(cfg, jobs, threads, trace)
    return _finish(
        cfg, results, out_dir, "combos",
        lambda r: {"summary": combo_summary(r), "cells": cell_summary(r, ("combo", "sigma"))},
        trace,
    )


def run_sparsity_sweep(cfg: ExperimentConfig, out_dir=None, threads=None, trace=False) -> list[ResultRecord]:
    """Paired (n_distances, n_partial) grid at a fixed modality combination."""
    sp = cfg.sparsity
    jobs = [
        Job("sparsity", sp.combo, s, seed, nd, npart, sp.n_samples)
        for nd, npart in sp.grid for s in sp.noise_levels for seed in cfg.seeds
    ]
    results = run_jobs(cfg, jobs, threads, trace)
    return _finish(
        cfg, results, out_dir, "sparsity",
        lambda r: {"summary": cell_summary(r, ("sigma", "n_distances", "n_partial"))},
        trace,
    )


def sparsity_table(records) -> list[dict]:
    """Summary rows in grid order (ascending counts) for each sigma."""
    rows = cell_summary(records, ("sigma", "n_distances", "n_partial"))
    return sorted(rows, key=lambda r: (r["sigma"], r["n_distances"], r["n_partial"]))


def run_noise_estimation_report(cfg: ExperimentConfig, out_dir=None, threads=None, trace=False) -> list[ResultRecord]:
    """Distance-only reconstructions at known noise levels; compares sigma_hat_D to sigma."""
    if not cfg.sampler.adaptive:
        raise ValueError("the noise report needs adaptive noise estimation")
    nr = cfg.noise_report
    jobs = [
        Job("noise", "D", s, seed, nr.distance_count, 0, nr.n_samples)
        for s in nr.noise_levels for seed in cfg.seeds
    ]
    results = run_jobs(cfg, jobs, threads, trace)
    return _finish(cfg, results, out_dir, "noise", lambda r: {"summary": noise_summary(r, "D")}, trace)


def reconstruct(cfg: ExperimentConfig, seed: int, out_dir=None, trace: bool = False) -> dict:
    """Single reconstruction; simulated unless ``reconstruct.measurements`` is set."""
    setup = _cached_setup(cfg)
    rc = cfg.reconstruct
    if rc.measurements:
        ms = fm.load_measurements(rc.measurements)
    else:
        ms = simulate(cfg, setup, rc.combo, rc.sigma, seed, make_metas(cfg, setup, seed))
    est = make_estimator(cfg, setup, seed, record_trace=trace).fit(ms, truth=setup.truth)
    summary = {
        "combo": "".join(m.modality for m in ms),
        "seed": seed,
        "rmsd": rmsd(est.structure_, setup.truth),
        "sigma_hat": dict(zip(est.labels_, map(float, est.sigma_hat_))),
        "weights": dict(zip(est.labels_, map(float, est.weights_))),
        "misfit": float(est.misfit_),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reconstruction.pdb").write_text(est.structure_.to_pdb())
        fm.save_measurements(ms, out / "measurements.json")
        (out / "reconstruction.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        if trace:
            write_trace_csv(est.trace_, out / "trace.csv")
    return summary


def sample_prior(cfg: ExperimentConfig, seed: int, out_dir=None, psi: float = 0.0, lambda0: float = 1.0) -> dict:
    """Unconditional draw from the mixture prior via the reverse SDE."""
    setup = _cached_setup(cfg)
    x = unconditional_sample(
        setup.prior, setup.sched, (setup.cov.n_atoms, 3), lambda0=lambda0, psi=psi, seed=seed, cov=setup.cov
    )
    b = Backbone(x)
    lib_rmsd = [rmsd(b, Backbone(setup.cov.apply(m))) for m in setup.prior.means_]
    summary = {
        "seed": seed,
        "rmsd_to_truth": rmsd(b, setup.truth),
        "nearest_component": int(np.argmin(lib_rmsd)),
        "rmsd_to_nearest_component": float(np.min(lib_rmsd)),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prior_sample.pdb").write_text(b.to_pdb())
        (out / "prior_sample.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
