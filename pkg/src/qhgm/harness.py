"""Experiment drivers: scaling grids over (N_t, N_c), rate regression and curvature probes."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hamiltonian import flatten
from .learn import HESSIAN_MAX_PARAMS, LatentParams, TrainConfig, TrainReport, empirical_hessian, train_vqnet
from .metrics import METRIC_FIELDS
from .model import Dataset, ModelParams, SynthConfig, sample_truth, simulate
from .povm import SingleQubitPOVM, build_default_icpovm

log = logging.getLogger(__name__)

ROW_METRICS = METRIC_FIELDS + ("l2_w_err", "final_full_nll", "oracle_gap")


def derive_seed(master: int, *coords: int) -> int:
    """Deterministic 32-bit seed from a master seed and integer coordinates."""
    ss = np.random.SeedSequence([int(master), *(int(c) for c in coords)])
    return int(ss.generate_state(1, np.uint32)[0])


# -- fitting protocol ---------------------------------------------------------

@dataclass
class FitProtocol:
    """Training recipe shared by all grid cells.

    ``restarts`` independent initializations are trained and the one with the
    lowest full-data NLL is kept (selection never looks at the truth). An
    optional full-batch polish then continues from that point at a constant
    learning rate.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    restarts: int = 1
    polish_epochs: int = 0
    polish_lr: float = 0.02

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.polish_epochs < 0:
            raise ValueError("polish_epochs must be >= 0")

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "restarts": self.restarts,
                "polish_epochs": self.polish_epochs, "polish_lr": self.polish_lr}

    @classmethod
    def from_dict(cls, d: dict) -> "FitProtocol":
        d = dict(d)
        extra = set(d) - {"train", "restarts", "polish_epochs", "polish_lr"}
        if extra:
            raise ValueError(f"unknown protocol keys: {sorted(extra)}")
        train = TrainConfig.from_dict(d.pop("train", {}))
        return cls(train=train, **d)


def _latent_from_report(rep: TrainReport, n: int, cfg: TrainConfig) -> LatentParams:
    c = n * (n - 1)
    if cfg.learn_initial_state:
        return LatentParams(rep.latent[:c].copy(), rep.latent[c:c + n].copy(), rep.latent[c + n:].copy(), cfg.w_max)
    return LatentParams(rep.latent.copy(), rep.final.thetas.copy(), rep.final.phis.copy(), cfg.w_max)


def fit(dataset: Dataset, protocol: FitProtocol, povm: SingleQubitPOVM, seed: int,
        truth: ModelParams | None = None) -> TrainReport:
    best = None
    for r in range(protocol.restarts):
        cfg = TrainConfig.from_dict({**protocol.train.to_dict(), "seed": derive_seed(seed, r)})
        rep = train_vqnet(dataset, cfg, povm, truth)
        if best is None or rep.final_full_nll < best.final_full_nll:
            best, best_cfg = rep, cfg
    if protocol.polish_epochs:
        polish = TrainConfig.from_dict({**best_cfg.to_dict(), "epochs": protocol.polish_epochs,
                                        "lr_base": protocol.polish_lr, "lr_schedule": "constant",
                                        "full_batch": True})
        best = train_vqnet(dataset, polish, povm, truth, init=_latent_from_report(best, dataset.n, best_cfg))
    return best


# -- scaling grid -------------------------------------------------------------

@dataclass
class ScalingGrid:
    n_times: list[int]
    n_cells: list[int]
    seeds: list[int] = field(default_factory=lambda: list(range(5)))
    synth: SynthConfig = field(default_factory=SynthConfig)
    protocol: FitProtocol = field(default_factory=FitProtocol)
    master_seed: int = 0

    def __post_init__(self):
        if not self.n_times or not self.n_cells or not self.seeds:
            raise ValueError("grid axes and seed list must be non-empty")
        if min(self.n_times) < 1 or min(self.n_cells) < 1:
            raise ValueError("grid axes must be positive")

    def cells(self) -> list[tuple[int, int, int]]:
        return [(nt, nc, s) for nt in self.n_times for nc in self.n_cells for s in self.seeds]

    def to_dict(self) -> dict:
        return {"n_times": list(self.n_times), "n_cells": list(self.n_cells), "seeds": list(self.seeds),
                "synth": self.synth.to_dict(), "protocol": self.protocol.to_dict(),
                "master_seed": self.master_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingGrid":
        d = dict(d)
        extra = set(d) - {"n_times", "n_cells", "seeds", "synth", "protocol", "master_seed"}
        if extra:
            raise ValueError(f"unknown study keys: {sorted(extra)}")
        seeds = d.get("seeds", 5)
        return cls(
            n_times=[int(x) for x in d["n_times"]],
            n_cells=[int(x) for x in d["n_cells"]],
            seeds=list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds],
            synth=SynthConfig.from_dict(d.get("synth", {})),
            protocol=FitProtocol.from_dict(d.get("protocol", {})),
            master_seed=int(d.get("master_seed", 0)),
        )


def cell_data(grid: ScalingGrid, n_times: int, n_cells: int, seed: int,
              povm: SingleQubitPOVM) -> tuple[Dataset, ModelParams]:
    """Truth depends only on the seed index; sampled outcomes on the full cell coordinates."""
    cfg = SynthConfig.from_dict({**grid.synth.to_dict(), "n_times": n_times, "n_cells": n_cells,
                                 "seed": derive_seed(grid.master_seed, seed)})
    truth, times = sample_truth(cfg)
    ds = simulate(truth, times, n_cells, povm, derive_seed(grid.master_seed, seed, n_times, n_cells))
    return ds, truth


def run_cell(grid: ScalingGrid, n_times: int, n_cells: int, seed: int,
             povm: SingleQubitPOVM | None = None) -> dict:
    povm = povm or build_default_icpovm()
    row = {"n_times": n_times, "n_cells": n_cells, "seed": seed, "error": ""}
    try:
        ds, truth = cell_data(grid, n_times, n_cells, seed, povm)
        rep = fit(ds, grid.protocol, povm, derive_seed(grid.master_seed, seed, n_times, n_cells, 1), truth)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.warning("cell (%d, %d, %d) failed: %s", n_times, n_cells, seed, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
        row.update({k: float("nan") for k in ROW_METRICS})
        return row
    row.update(rep.final_metrics)
    row["l2_w_err"] = float(np.linalg.norm(flatten(rep.final.weights) - flatten(truth.weights)))
    row["final_full_nll"] = rep.final_full_nll
    row["oracle_gap"] = rep.final_full_nll - rep.oracle_loss if rep.oracle_loss is not None else float("nan")
    return row


def _run_cell_job(args) -> dict:
    grid_dict, nt, nc, s = args
    return run_cell(ScalingGrid.from_dict(grid_dict), nt, nc, s)


@dataclass
class StudyResult:
    grid: ScalingGrid
    rows: list[dict]

    def aggregate(self) -> list[dict]:
        """Median and interquartile range of every metric per (N_t, N_c)."""
        out = []
        for nt in self.grid.n_times:
            for nc in self.grid.n_cells:
                cell = [r for r in self.rows if r["n_times"] == nt and r["n_cells"] == nc and not r["error"]]
                agg = {"n_times": nt, "n_cells": nc, "n_ok": len(cell),
                       "n_failed": sum(1 for r in self.rows if r["n_times"] == nt and r["n_cells"] == nc) - len(cell)}
                for k in ROW_METRICS:
                    vals = np.array([r[k] for r in cell], dtype=float)
                    vals = vals[np.isfinite(vals)]
                    if vals.size:
                        q1, med, q3 = np.percentile(vals, [25, 50, 75])
                    else:
                        q1 = med = q3 = float("nan")
                    agg[f"{k}_median"] = float(med)
                    agg[f"{k}_iqr"] = float(q3 - q1)
                out.append(agg)
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "results.csv", self.rows)
        _write_csv(out / "aggregate.csv", self.aggregate())


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run_scaling_study(grid: ScalingGrid, workers: int = 1, povm: SingleQubitPOVM | None = None) -> StudyResult:
    """Train every (N_t, N_c, seed) cell; rows come back in grid order regardless of workers.

    A custom ``povm`` is only honoured in single-worker mode; worker processes
    use the default IC-POVM.
    """
    cells = grid.cells()
    if workers <= 1 or len(cells) == 1:
        rows = [run_cell(grid, nt, nc, s, povm) for nt, nc, s in cells]
    else:
        if povm is not None:
            raise ValueError("custom POVMs require workers=1")
        jobs = [(grid.to_dict(), nt, nc, s) for nt, nc, s in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_job, jobs))  # map preserves submission order
    return StudyResult(grid, rows)


def rate_slope(result: StudyResult | list[dict], n_times: int, metric: str = "l2_w_err") -> float:
    """Least-squares slope of log(median metric) against log(N_c) at fixed N_t."""
    agg = result.aggregate() if isinstance(result, StudyResult) else result
    pts = [(r["n_cells"], r[f"{metric}_median"]) for r in agg if r["n_times"] == n_times]
    x, y = np.array(pts, dtype=float).T
    if x.size < 2 or np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise ValueError("need at least two positive finite medians for a slope")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# -- curvature and variability ------------------------------------------------

@dataclass(frozen=True)
class ConvexityResult:
    min_eigenvalue: float
    asymmetry: float
    eigenvalues: np.ndarray
    n_times: int
    n_cells: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eigenvalues"] = self.eigenvalues.tolist()
        return d


def convexity_probe(dataset: Dataset, params: ModelParams, povm: SingleQubitPOVM) -> ConvexityResult:
    """Smallest eigenvalue of the symmetrized empirical NLL Hessian in the weights."""
    c = dataset.n * (dataset.n - 1)
    if c > HESSIAN_MAX_PARAMS:
        raise ValueError(f"convexity probe limited to {HESSIAN_MAX_PARAMS} weights, got {c}")
    hess = empirical_hessian(params, dataset, povm)
    eig = np.linalg.eigvalsh(hess.matrix)
    return ConvexityResult(float(eig[0]), hess.asymmetry, eig, dataset.n_times, dataset.n_cells)


def coefficient_of_variation(weights: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Entrywise std/|mean| over repeated runs; NaN where the mean is zero."""
    w = np.asarray(weights, dtype=float)
    if w.ndim < 2 or w.shape[0] < 2:
        raise ValueError("need at least two runs")
    mean = w.mean(axis=0)
    std = w.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(mean != 0, std / np.abs(mean), np.nan)


def load_study(path) -> ScalingGrid:
    return ScalingGrid.from_dict(json.loads(Path(path).read_text()))
