"""Result records and deterministic CSV/JSON tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MODALITY_ORDER = ("P", "D", "E")

COLUMNS = [
    "experiment", "combo", "sigma", "seed", "n_distances", "n_partial", "rmsd",
    "sigma_P", "sigma_D", "sigma_E", "sigma_hat_P", "sigma_hat_D", "sigma_hat_E",
    "status", "error",
]


@dataclass
class ResultRecord:
    """One reconstruction of a sweep.

    ``sigma`` is the noise level of the cell (P and D share it); the
    per-modality values actually used sit in ``true_sigma``. ``rmsd`` is
    ``None`` for failed runs. ``wall_time`` is kept out of the tables.
    """

    experiment: str
    combo: str
    sigma: float
    seed: int
    n_distances: int = 0
    n_partial: int = 0
    rmsd: float | None = None
    true_sigma: dict = field(default_factory=dict)
    sigma_hat: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""
    structure_file: str = ""
    wall_time: float = 0.0

    def __post_init__(self):
        if self.rmsd is not None and not self.rmsd >= 0:
            raise ValueError("rmsd must be nonnegative")

    @property
    def sort_key(self):
        return (self.experiment, self.combo, self.sigma, self.seed, self.n_distances, self.n_partial)

    def to_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(**d)

    def row(self) -> dict:
        r = {k: getattr(self, k) for k in ("experiment", "combo", "sigma", "seed", "n_distances", "n_partial", "rmsd", "status", "error")}
        for m in MODALITY_ORDER:
            r[f"sigma_{m}"] = self.true_sigma.get(m)
            r[f"sigma_hat_{m}"] = self.sigma_hat.get(m)
        return r


def sort_records(records) -> list[ResultRecord]:
    return sorted(records, key=lambda r: r.sort_key)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def records_to_csv(records) -> str:
    return _csv_text(COLUMNS, [r.row() for r in sort_records(records)])


def records_to_json(records) -> str:
    return json.dumps([r.to_dict() for r in sort_records(records)], indent=1, sort_keys=True) + "\n"


def records_from_json(text: str) -> list[ResultRecord]:
    return [ResultRecord.from_dict(d) for d in json.loads(text)]


def _mean_std(values):
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())


def _round(x, nd=4):
    return None if x is None else round(x, nd)


def combo_summary(records) -> list[dict]:
    """Per combo: mean over noise levels for each seed, then mean and std over seeds."""
    out = []
    by_combo: dict = {}
    for r in sort_records(records):
        if r.status == "ok":
            by_combo.setdefault(r.combo, {}).setdefault(r.seed, []).append(r.rmsd)
    for combo in sorted(by_combo):
        per_seed = [float(np.mean(v)) for _, v in sorted(by_combo[combo].items())]
        m, s = _mean_std(per_seed)
        out.append({"combo": combo, "n_seeds": len(per_seed), "rmsd_mean": _round(m), "rmsd_std": _round(s)})
    return out


def cell_summary(records, keys=("combo", "sigma", "n_distances", "n_partial")) -> list[dict]:
    """Mean and std of RMSD (and sigma_hat) over seeds for every cell."""
    groups: dict = {}
    for r in sort_records(records):
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        ok = [r for r in rs if r.status == "ok"]
        row = dict(zip(keys, key))
        m, s = _mean_std([r.rmsd for r in ok])
        row.update(n_ok=len(ok), n_failed=len(rs) - len(ok), rmsd_mean=_round(m), rmsd_std=_round(s))
        for mod in MODALITY_ORDER:
            hm, hs = _mean_std([r.sigma_hat.get(mod) for r in ok])
            if hm is not None:
                row[f"sigma_hat_{mod}_mean"] = _round(hm)
                row[f"sigma_hat_{mod}_std"] = _round(hs)
        out.append(row)
    return out


def noise_summary(records, modality: str = "D") -> list[dict]:
    """True sigma versus mean estimate and absolute error over runs."""
    groups: dict = {}
    for r in sort_records(records):
        if r.status == "ok" and modality in r.sigma_hat:
            groups.setdefault(r.true_sigma[modality], []).append(r.sigma_hat[modality])
    out = []
    for s in sorted(groups):
        est = np.asarray(groups[s])
        err = np.abs(est - s)
        out.append({
            "true_sigma": s,
            "sigma_hat_mean": _round(float(est.mean())),
            "sigma_hat_std": _round(float(est.std())),
            "abs_error_mean": _round(float(err.mean())),
            "abs_error_std": _round(float(err.std())),
            "n": int(est.size),
        })
    return out


def _write(path: Path, text: str):
    path.write_text(text)
    return path


def emit_tables(records, out_dir, name: str, formats=("csv", "json"), summaries=None) -> list[Path]:
    """Write ``name.csv`` / ``name.json`` plus summary tables and a timing log.

    Rows are ordered by (experiment, combo, sigma, seed, counts) regardless of
    the input order, so identical results give byte-identical files. Wall
    times go to ``name_timings.csv`` only.
    """
    records = list(records)
    if not records:
        raise ValueError("no results to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(_write(out / f"{name}.csv", records_to_csv(records)))
    if "json" in formats:
        written.append(_write(out / f"{name}.json", records_to_json(records)))
    for sname, rows in (summaries or {}).items():
        if not rows:
            continue
        cols = list(rows[0].keys())
        for r in rows:
            cols += [c for c in r if c not in cols]
        written.append(_write(out / f"{name}_{sname}.csv", _csv_text(cols, rows)))
        if "json" in formats:
            written.append(_write(out / f"{name}_{sname}.json", json.dumps(rows, indent=1, sort_keys=True) + "\n"))
    timing_rows = [
        {"combo": r.combo, "sigma": r.sigma, "seed": r.seed, "n_distances": r.n_distances,
         "n_partial": r.n_partial, "wall_time": round(r.wall_time, 3)}
        for r in sort_records(records)
    ]
    written.append(_write(out / f"{name}_timings.csv", _csv_text(list(timing_rows[0]), timing_rows)))
    return written


def write_trace_csv(trace, path) -> Path:
    """Per-step trace rows (step, t_norm, sigma_hat_*, weight_*, residual_*, rmsd)."""
    if not trace:
        raise ValueError("empty trace")
    cols = list(trace[0].keys())
    rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()} for rec in trace]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return _write(path, _csv_text(cols, rows))
