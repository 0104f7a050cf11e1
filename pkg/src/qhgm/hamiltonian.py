"""Parameterized regulatory Hamiltonian ``H(w) = sum_{i != j} w_ij |1><1|_i (x) Y_j``."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qcore import embed_pair, pauli

PROJ1 = np.array([[0, 0], [0, 1]], dtype=complex)


@dataclass(frozen=True)
class WeightMatrix:
    w: np.ndarray
    w_max: float = 1.0

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {w.shape}")
        if np.any(np.diag(w) != 0):
            raise ValueError("self-interaction weights (diagonal) must be zero")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.max(np.abs(w), initial=0.0) > self.w_max:
            raise ValueError(f"|w_ij| exceeds w_max={self.w_max}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @classmethod
    def zeros(cls, n: int, w_max: float = 1.0) -> "WeightMatrix":
        return cls(np.zeros((n, n)), w_max)


def term_index(n: int) -> list[tuple[int, int]]:
    """Row-major ordering of off-diagonal pairs: (0,1), (0,2), ..., (1,0), (1,2), ..."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def local_term(i: int, j: int, n: int) -> np.ndarray:
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"gene indices ({i}, {j}) out of range for n={n}")
    return embed_pair(PROJ1, pauli("Y"), i, j, n)


def grn_terms(n: int) -> np.ndarray:
    """All local terms stacked in ``term_index`` order, shape ``(n(n-1), 2^n, 2^n)``."""
    d = 2**n
    pairs = term_index(n)
    if not pairs:
        return np.zeros((0, d, d), dtype=complex)
    return np.stack([local_term(i, j, n) for i, j in pairs])


def build_from_terms(coeffs, terms) -> np.ndarray:
    """Generic ``sum_k coeffs[k] * terms[k]``."""
    coeffs = np.asarray(coeffs, dtype=float)
    terms = np.asarray(terms, dtype=complex)
    if coeffs.shape[0] != terms.shape[0]:
        raise ValueError("one coefficient per term required")
    return np.tensordot(coeffs, terms, axes=1)


def build_hamiltonian(wm: WeightMatrix) -> np.ndarray:
    return build_from_terms(flatten(wm), grn_terms(wm.n))


def flatten(wm: WeightMatrix) -> np.ndarray:
    return np.array([wm.w[i, j] for i, j in term_index(wm.n)])


def unflatten(v, n: int, w_max: float = 1.0) -> WeightMatrix:
    v = np.asarray(v, dtype=float).ravel()
    if v.size != n * (n - 1):
        raise ValueError(f"expected {n * (n - 1)} weights for n={n}, got {v.size}")
    w = np.zeros((n, n))
    for val, (i, j) in zip(v, term_index(n)):
        w[i, j] = val
    return WeightMatrix(w, w_max)


# -- serialization -----------------------------------------------------------

def weights_to_dict(wm: WeightMatrix) -> dict:
    return {"n": wm.n, "w_max": wm.w_max, "weights": wm.w.tolist()}


def weights_from_dict(d: dict) -> WeightMatrix:
    try:
        w = np.array(d["weights"], dtype=float)
    except KeyError:
        raise ValueError("weight JSON missing field 'weights'") from None
    if "n" in d and w.shape != (d["n"], d["n"]):
        raise ValueError(f"weights shape {w.shape} does not match n={d['n']}")
    return WeightMatrix(w, float(d.get("w_max", 1.0)))


def write_weights_json(wm: WeightMatrix, path) -> None:
    Path(path).write_text(json.dumps(weights_to_dict(wm), indent=2))


def read_weights_json(path) -> WeightMatrix:
    return weights_from_dict(json.loads(Path(path).read_text()))


def write_weights_csv(wm: WeightMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([wm.n])
        for row in wm.w:
            out.writerow([format(x, ".17g") for x in row])


def read_weights_csv(path, w_max: float = 1.0) -> WeightMatrix:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    n = int(rows[0][0])
    body = np.array([[float(x) for x in r] for r in rows[1:]])
    if body.shape != (n, n):
        raise ValueError(f"CSV body shape {body.shape} does not match header n={n}")
    return WeightMatrix(body, w_max)
