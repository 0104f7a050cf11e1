"""Expression discretization, pseudotime binning, dataset files and Beta dequantization."""
from __future__ import annotations

import csv
import gzip
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .codes import decode_base4, encode_base4  # noqa: F401  (re-exported)
from .model import Dataset
from .povm import SingleQubitPOVM, expression_scores

FORMAT_VERSION = 1
MANIFEST_NAME = "dataset.json"
BETA_MASS = 0.99
BETA_WINDOW = (0.025, 0.975)
BETA_C_MAX = 1e6


class DatasetFormatError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


# -- discretization ------------------------------------------------------------

@dataclass(frozen=True)
class DiscretizationBins:
    edges: np.ndarray  # (5,) with edges[0] = 0 and edges[4] = 1

    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def make_bins(scores) -> DiscretizationBins:
    """Edges at the midpoints of consecutive expression scores, closed by 0 and 1."""
    s = np.asarray(scores, dtype=float)
    if s.shape != (4,):
        raise ValueError("need four expression scores")
    if np.any(np.diff(s) <= 0) or s[0] < 0 or s[-1] > 1:
        raise ValueError(f"expression scores must be strictly increasing in [0, 1], got {s}")
    edges = np.concatenate([[0.0], 0.5 * (s[:-1] + s[1:]), [1.0]])
    return DiscretizationBins(edges)


def bins_for(povm: SingleQubitPOVM) -> DiscretizationBins:
    return make_bins(expression_scores(povm))


def discretize(values, bins: DiscretizationBins):
    """Label each value by its half-open bin ``[b_m, b_{m+1})``; 1.0 goes to label 3."""
    x = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(x)) or np.any((x < 0) | (x > 1)):
        raise ValueError("expression values must lie in [0, 1]")
    labels = np.searchsorted(bins.edges[1:4], x, side="right")
    return int(labels) if labels.ndim == 0 else labels.astype(np.uint8)


# -- pseudotime binning ----------------------------------------------------------

@dataclass(frozen=True)
class PseudotimeBinning:
    assignment: np.ndarray  # bin index per cell, input order
    members: list[np.ndarray]  # cell indices per bin, pseudotime order
    times: np.ndarray  # median pseudotime per bin

    @property
    def sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.members])


def bin_pseudotime(pseudotimes, n_bins: int) -> PseudotimeBinning:
    """Split rank-ordered cells into ``n_bins`` contiguous, equally populated groups.

    Ties keep input order (stable sort). When the cell count does not divide
    evenly the first ``C mod n_bins`` bins receive one extra cell.
    """
    pt = np.asarray(pseudotimes, dtype=float).ravel()
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if pt.size < n_bins:
        raise ValueError(f"{pt.size} cells cannot fill {n_bins} bins")
    if not np.all(np.isfinite(pt)):
        raise ValueError("pseudotimes must be finite")
    order = np.argsort(pt, kind="stable")
    base, extra = divmod(pt.size, n_bins)
    sizes = np.full(n_bins, base)
    sizes[:extra] += 1
    members = np.split(order, np.cumsum(sizes)[:-1])
    assignment = np.empty(pt.size, dtype=np.int64)
    for b, idx in enumerate(members):
        assignment[idx] = b
    times = np.array([np.median(pt[idx]) for idx in members])
    return PseudotimeBinning(assignment, members, times)


# -- Beta dequantization -----------------------------------------------------------

def _central_mass(gamma: float, c: float) -> float:
    a, b = 1 + gamma * (c - 2), 1 + (1 - gamma) * (c - 2)
    lo, hi = BETA_WINDOW
    return float(betainc(a, b, hi) - betainc(a, b, lo))


def solve_beta_concentration(gamma: float, target: float = BETA_MASS, tol: float = 1e-10) -> float:
    """Concentration ``c = alpha + beta`` placing ``target`` mass on [0.025, 0.975].

    Shapes are ``alpha = 1 + gamma (c - 2)``, ``beta = 1 + (1 - gamma)(c - 2)`` so
    the mode stays at ``gamma``. The mass grows with ``c`` for interior modes,
    so bisection over ``(2, 1e6]`` applies.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    lo, hi = 2.0, BETA_C_MAX
    if _central_mass(gamma, lo) >= target:
        raise ArithmeticError("central mass already exceeds target at c = 2")
    if _central_mass(gamma, hi) < target:
        raise ArithmeticError(f"target mass unreachable for gamma={gamma} within c <= {BETA_C_MAX:g}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _central_mass(gamma, mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return hi


@dataclass(frozen=True)
class BetaBinModel:
    gamma: float
    concentration: float

    @property
    def alpha(self) -> float:
        return 1 + self.gamma * (self.concentration - 2)

    @property
    def beta(self) -> float:
        return 1 + (1 - self.gamma) * (self.concentration - 2)

    @property
    def mode(self) -> float:
        return (self.alpha - 1) / (self.alpha + self.beta - 2)


def beta_models(bins: DiscretizationBins, scores) -> list[BetaBinModel]:
    """One Beta model per level with mode at that level's score inside its bin."""
    e = bins.edges
    models = []
    for m, tau in enumerate(np.asarray(scores, dtype=float)):
        gamma = (tau - e[m]) / (e[m + 1] - e[m])
        models.append(BetaBinModel(float(gamma), solve_beta_concentration(gamma)))
    return models


def dequantize(labels, bins: DiscretizationBins, models: list[BetaBinModel], rng) -> np.ndarray:
    """Continuous values drawn inside each label's bin from its Beta model."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(models) != 4:
        raise ValueError("need one Beta model per level")
    a = np.array([m.alpha for m in models])[labels]
    b = np.array([m.beta for m in models])[labels]
    z = rng.beta(a, b)
    lo, hi = bins.edges[labels], bins.edges[labels + 1]
    x = lo + z * (hi - lo)
    # floating-point guard: stay strictly below the upper edge of the inner bins
    upper = np.where(labels < 3, np.nextafter(hi, -np.inf), 1.0)
    return np.clip(x, lo, upper)


# -- dataset files ---------------------------------------------------------------------

def _manifest_path(path) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() or p.suffix != ".json" else p


def write_dataset(ds: Dataset, path, compress: bool = False) -> Path:
    """Write ``dataset.json`` and the CSV body into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    body_name = "dataset.csv.gz" if compress else "dataset.csv"
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": ds.n,
        "N_t": ds.n_times,
        "N_c": ds.n_cells,
        "times": ds.times.tolist(),
        "body": body_name,
    }
    nt, nc, n = ds.outcomes.shape
    ti, ci = np.meshgrid(np.arange(nt), np.arange(nc), indexing="ij")
    table = np.column_stack([ti.ravel(), ci.ravel(), ds.outcomes.reshape(-1, n)])
    buf = io.StringIO()
    buf.write(",".join(["time_index", "cell_index"] + [f"m_{k + 1}" for k in range(n)]) + "\n")
    np.savetxt(buf, table, fmt="%d", delimiter=",")
    data = buf.getvalue().encode()
    if compress:
        (out / body_name).write_bytes(gzip.compress(data, mtime=0))
    else:
        (out / body_name).write_bytes(data)
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out / MANIFEST_NAME


def read_dataset(path) -> Dataset:
    mpath = _manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"manifest not found: {mpath}", "manifest") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc}", "manifest") from None
    for key in ("format_version", "n", "N_t", "N_c", "times"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing field {key!r}", key)
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format_version {manifest['format_version']!r}", "format_version")
    n, nt, nc = int(manifest["n"]), int(manifest["N_t"]), int(manifest["N_c"])
    times = np.asarray(manifest["times"], dtype=float)
    if times.size != nt:
        raise DatasetFormatError(f"manifest lists {times.size} times but N_t={nt}", "times")

    body = mpath.parent / manifest.get("body", "dataset.csv")
    if not body.exists() and body.suffix == ".csv" and body.with_suffix(".csv.gz").exists():
        body = body.with_suffix(".csv.gz")
    raw = gzip.decompress(body.read_bytes()) if body.suffix == ".gz" else body.read_bytes()
    text = raw.decode()
    header, _, rest = text.partition("\n")
    expected = ["time_index", "cell_index"] + [f"m_{k + 1}" for k in range(n)]
    if header.strip().split(",") != expected:
        raise DatasetFormatError(f"unexpected CSV header {header.strip()!r}", "header")
    table = np.loadtxt(io.StringIO(rest), delimiter=",", dtype=np.int64, ndmin=2) if rest.strip() \
        else np.zeros((0, n + 2), dtype=np.int64)
    if table.shape[0] != nt * nc:
        raise DatasetFormatError(f"CSV has {table.shape[0]} rows, expected N_t*N_c={nt * nc}", "rows")
    labels = table[:, 2:]
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise DatasetFormatError("label out of range {0,1,2,3}", "labels")
    ti, ci = table[:, 0], table[:, 1]
    if ti.size and (ti.min() < 0 or ti.max() >= nt or ci.min() < 0 or ci.max() >= nc):
        raise DatasetFormatError("time_index or cell_index out of range", "index")
    outcomes = np.full((nt, nc, n), 255, dtype=np.uint8)
    outcomes[ti, ci] = labels
    if np.any(outcomes == 255):
        raise DatasetFormatError("missing (time_index, cell_index) rows", "rows")
    return Dataset(times, outcomes)


# -- expression CSV ingestion / export --------------------------------------------------

def read_expression_csv(path, pseudotime_column: str = "pseudotime", require_pseudotime: bool = True):
    """Return ``(gene_names, values (cells x genes), pseudotimes or None)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError("expression CSV is empty", "header")
    header = [h.strip() for h in rows[0]]
    if pseudotime_column in header:
        pcol = header.index(pseudotime_column)
    elif require_pseudotime:
        raise DatasetFormatError(f"missing pseudotime column {pseudotime_column!r}", pseudotime_column)
    else:
        pcol = None
    gene_cols = [k for k in range(len(header)) if k != pcol]
    if not gene_cols:
        raise DatasetFormatError("no gene columns", "header")
    body = rows[1:]
    if not body:
        raise DatasetFormatError("expression CSV has no cells", "rows")

    def column(k):
        cells = [r[k].strip() if k < len(r) else "" for r in body]
        if all(c == "" for c in cells):
            raise DatasetFormatError(f"column {header[k]!r} is empty", header[k])
        try:
            return np.array([float(c) for c in cells])
        except ValueError:
            raise DatasetFormatError(f"non-numeric or missing value in column {header[k]!r}", header[k]) from None

    values = np.column_stack([column(k) for k in gene_cols])
    pt = column(pcol) if pcol is not None else None
    if np.any(~np.isfinite(values)) or np.any((values < 0) | (values > 1)):
        raise DatasetFormatError("expression values must be normalized to [0, 1]", "values")
    return [header[k] for k in gene_cols], values, pt


def ingest_expression(path, povm: SingleQubitPOVM, n_times: int,
                      pseudotime_column: str = "pseudotime") -> tuple[Dataset, list[str]]:
    """Bin cells by pseudotime, discretize expression, and build a rectangular dataset.

    Bins larger than the smallest bin are truncated (latest cells in pseudotime
    order dropped) so every bin holds the same number of cells.
    """
    genes, values, pt = read_expression_csv(path, pseudotime_column)
    binning = bin_pseudotime(pt, n_times)
    if np.any(binning.times <= 0):
        raise DatasetFormatError("representative bin times must be positive; shift pseudotime upstream",
                                 pseudotime_column)
    labels = discretize(values, bins_for(povm))
    keep = binning.sizes.min()
    outcomes = np.stack([labels[idx[:keep]] for idx in binning.members])
    return Dataset(binning.times, outcomes), genes


def write_expression_csv(path, values: np.ndarray, genes: list[str] | None = None,
                         pseudotimes: np.ndarray | None = None, fmt: str = "%.10g") -> None:
    values = np.atleast_2d(values)
    genes = genes or [f"gene_{k + 1}" for k in range(values.shape[1])]
    cols = list(genes)
    table = values
    if pseudotimes is not None:
        cols.append("pseudotime")
        table = np.column_stack([values, pseudotimes])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, table, fmt=fmt, delimiter=",")


def dequantize_dataset(ds: Dataset, povm: SingleQubitPOVM, rng) -> tuple[np.ndarray, np.ndarray]:
    """Continuous expression (cells x genes) and per-cell bin time for a whole dataset."""
    bins = bins_for(povm)
    models = beta_models(bins, expression_scores(povm))
    flat = ds.outcomes.reshape(-1, ds.n)
    values = dequantize(flat, bins, models, rng)
    times = np.repeat(ds.times, ds.n_cells)
    return values, times
