"""Single-qubit four-outcome informationally complete POVMs.

Every element is ``(I + r.sigma) / 4`` for a unit Bloch vector ``r``, so each
element is rank one: ``Lambda_m = |v_m><v_m| / 2`` with ``v_m`` the +1
eigenvector of ``r_m . sigma``. Outcome amplitudes for an n-qubit product
measurement are therefore inner products with tensor products of the ``v_m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .qcore import pauli

MAX_JOINT_QUBITS = 10
_SIGMA = np.stack([pauli("X"), pauli("Y"), pauli("Z")])


class ConstructionInfeasible(ValueError):
    """No valid IC-POVM exists for the requested angles / transverse choice."""


class NotRankOne(ValueError):
    pass


@dataclass(frozen=True)
class SingleQubitPOVM:
    bloch: np.ndarray  # (4, 3)

    def __post_init__(self):
        r = np.asarray(self.bloch, dtype=float)
        if r.shape != (4, 3):
            raise ValueError(f"expected four Bloch 3-vectors, got shape {r.shape}")
        r.setflags(write=False)
        object.__setattr__(self, "bloch", r)

    @property
    def elements(self) -> np.ndarray:
        return 0.25 * (np.eye(2)[None] + np.einsum("mk,kab->mab", self.bloch, _SIGMA))

    @property
    def scores(self) -> np.ndarray:
        return expression_scores(self)

    @property
    def frame_matrix(self) -> np.ndarray:
        """The 4x4 matrix with a row of ones above the Bloch vectors as columns."""
        return np.vstack([np.ones(4), self.bloch.T])


@dataclass(frozen=True)
class Rank1Factor:
    weights: np.ndarray  # (4,)
    vectors: np.ndarray  # (4, 2) rows are |v_m>


def _check(povm: SingleQubitPOVM) -> None:
    r = povm.bloch
    if np.max(np.abs(np.linalg.norm(r, axis=1) - 1.0)) > 1e-10:
        raise ConstructionInfeasible("Bloch vectors are not unit length")
    if np.max(np.abs(r.sum(axis=0))) > 1e-10:
        raise ConstructionInfeasible("Bloch vectors do not sum to zero")
    smin = np.linalg.svd(povm.frame_matrix, compute_uv=False)[-1]
    if smin <= 1e-8:
        raise ConstructionInfeasible(f"frame matrix is rank-deficient (smallest singular value {smin:.2e})")


def build_default_icpovm() -> SingleQubitPOVM:
    s3 = np.sqrt(3.0) / 2
    r = np.array([
        [0.5, 0.0, s3],
        [-0.5, -1 / np.sqrt(2), 0.5],
        [-0.5, 1 / np.sqrt(2), -0.5],
        [0.5, 0.0, -s3],
    ])
    povm = SingleQubitPOVM(r)
    _check(povm)
    return povm


def build_icpovm_from_angles(alphas, xy=None) -> SingleQubitPOVM:
    """IC-POVM whose Bloch vectors have polar angles ``alphas``.

    With ``xy=None`` the transverse components follow a fixed pattern: the
    outer pair (m=0, 3) lies in the x-z plane with x = sin(alpha), and the inner
    pair (m=1, 2) shares the remaining x budget with opposite y components.
    ``xy`` may instead be a (4, 2) array of explicit (x, y) components.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (4,):
        raise ValueError("need exactly four angles")
    if np.any(alphas < 0) or np.any(alphas > np.pi):
        raise ValueError("polar angles must lie in [0, pi]")
    z = np.cos(alphas)
    if abs(z.sum()) > 1e-10:
        raise ConstructionInfeasible(f"z components sum to {z.sum():.3e}, zero-sum impossible")

    if xy is not None:
        xy = np.asarray(xy, dtype=float)
        if xy.shape != (4, 2):
            raise ValueError("xy must have shape (4, 2)")
        r = np.column_stack([xy, z])
    else:
        x0, x3 = np.sin(alphas[0]), np.sin(alphas[3])
        s = -(x0 + x3)  # x1 + x2
        dz = z[2] ** 2 - z[1] ** 2  # x1^2 - x2^2 when y1 = -y2
        if abs(s) < 1e-14:
            if abs(dz) > 1e-14:
                raise ConstructionInfeasible("inner pair cannot satisfy unit norm and zero sum")
            x1 = x2 = 0.0
        else:
            diff = dz / s
            x1, x2 = (s + diff) / 2, (s - diff) / 2
        y1sq = 1 - z[1] ** 2 - x1**2
        if y1sq < -1e-12:
            raise ConstructionInfeasible("inner Bloch vectors cannot be unit length")
        y = np.sqrt(max(y1sq, 0.0))
        r = np.array([[x0, 0, z[0]], [x1, -y, z[1]], [x2, y, z[2]], [x3, 0, z[3]]])
        r[np.abs(r) < 1e-15] = 0.0
    povm = SingleQubitPOVM(r)
    _check(povm)
    return povm


def build_sic_povm() -> SingleQubitPOVM:
    r = np.array([
        [0.0, 0.0, 1.0],
        [2 * np.sqrt(2) / 3, 0.0, -1 / 3],
        [-np.sqrt(2) / 3, np.sqrt(6) / 3, -1 / 3],
        [-np.sqrt(2) / 3, -np.sqrt(6) / 3, -1 / 3],
    ])
    povm = SingleQubitPOVM(r)
    _check(povm)
    return povm


def expression_scores(povm: SingleQubitPOVM) -> np.ndarray:
    """tr(|1><1| L_m) / tr(L_m), i.e. (1 - z_m) / 2 for each Bloch vector."""
    elems = povm.elements
    return np.real(elems[:, 1, 1] / np.trace(elems, axis1=1, axis2=2))


def rank1_factor(povm: SingleQubitPOVM) -> Rank1Factor:
    r = povm.bloch
    norms = np.linalg.norm(r, axis=1)
    if np.any(norms < 1 - 1e-8):
        raise NotRankOne(f"Bloch norms {norms} are not all one")
    vecs = np.empty((4, 2), dtype=complex)
    for m, (x, y, z) in enumerate(r / norms[:, None]):
        # +1 eigenvector of r.sigma; pick the chart that stays well conditioned
        if z >= 0:
            v = np.array([1 + z, x + 1j * y])
        else:
            v = np.array([x - 1j * y, 1 - z])
        vecs[m] = v / np.linalg.norm(v)
    return Rank1Factor(np.full(4, 0.5), vecs)


def product_vectors(vectors: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
    """Rows ``v_{m_0} (x) ... (x) v_{m_{n-1}}`` for each outcome row (MSB-first)."""
    outcomes = np.atleast_2d(np.asarray(outcomes, dtype=np.int64))
    s, n = outcomes.shape
    out = vectors[outcomes[:, 0]]
    for j in range(1, n):
        out = (out[:, :, None] * vectors[outcomes[:, j]][:, None, :]).reshape(s, -1)
    return out


def joint_element(povm: SingleQubitPOVM, m) -> np.ndarray:
    m = np.asarray(m, dtype=int).ravel()
    if m.size > MAX_JOINT_QUBITS:
        raise ValueError(f"joint_element limited to {MAX_JOINT_QUBITS} qubits")
    if np.any((m < 0) | (m > 3)):
        raise ValueError("outcome labels must lie in {0,1,2,3}")
    elems = povm.elements
    return reduce(np.kron, (elems[k] for k in m), np.ones((1, 1), dtype=complex))


def validation_report(povm: SingleQubitPOVM) -> dict:
    elems = povm.elements
    r = povm.bloch
    scores = expression_scores(povm)
    return {
        "bloch": r.tolist(),
        "completeness_residual": float(np.max(np.abs(elems.sum(axis=0) - np.eye(2)))),
        "min_eigenvalues": [float(np.linalg.eigvalsh(e)[0]) for e in elems],
        "bloch_norm_residual": float(np.max(np.abs(np.linalg.norm(r, axis=1) - 1))),
        "bloch_sum_residual": float(np.max(np.abs(r.sum(axis=0)))),
        "frame_min_singular_value": float(np.linalg.svd(povm.frame_matrix, compute_uv=False)[-1]),
        "scores": scores.tolist(),
        "scores_increasing": bool(np.all(np.diff(scores) > 0)),
    }
