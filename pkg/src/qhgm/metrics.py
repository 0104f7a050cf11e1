"""Recovery metrics comparing learned parameters with a ground truth."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .hamiltonian import flatten
from .model import ModelParams, _qubit_states

RECOVERY_TOL = 0.1
METRIC_FIELDS = ("max_abs_w_err", "recovery_rate", "rel_err_w", "rel_err_theta",
                 "rel_err_phi", "state_fidelity")


@dataclass(frozen=True)
class Metrics:
    max_abs_w_err: float
    recovery_rate: float
    rel_err_w: float
    rel_err_theta: float
    rel_err_phi: float
    state_fidelity: float

    def to_dict(self) -> dict:
        return asdict(self)


def _rel(a, b) -> float:
    denom = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    if denom == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / denom)


def initial_state_fidelity(a: ModelParams, b: ModelParams) -> float:
    """|<psi0(a)|psi0(b)>|^2, computed qubit by qubit (both are product states)."""
    qa = _qubit_states(a.thetas, a.phis)
    qb = _qubit_states(b.thetas, b.phis)
    overlaps = np.einsum("ib,ib->i", qa.conj(), qb)
    return float(min(1.0, np.prod(np.abs(overlaps) ** 2)))


def compute_metrics(learned: ModelParams, truth: ModelParams, tol: float = RECOVERY_TOL) -> Metrics:
    if learned.n != truth.n:
        raise ValueError(f"shape mismatch: learned n={learned.n}, truth n={truth.n}")
    wl, wt = flatten(learned.weights), flatten(truth.weights)
    err = np.abs(wl - wt)
    return Metrics(
        max_abs_w_err=float(err.max(initial=0.0)),
        recovery_rate=float(np.mean(err <= tol)) if err.size else 1.0,
        rel_err_w=_rel(wl, wt),
        rel_err_theta=_rel(learned.thetas, truth.thetas),
        rel_err_phi=_rel(learned.phis, truth.phis),
        state_fidelity=initial_state_fidelity(learned, truth),
    )
