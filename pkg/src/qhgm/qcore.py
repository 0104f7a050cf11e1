"""Dense quantum primitives.

Qubit ordering is MSB-first: qubit 0 is the most significant bit of the
computational-basis index, so ``|q0 q1 ... q_{n-1}>`` has index
``sum(q_k * 2**(n-1-k))``. Every module in the package uses this convention.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

HERMITIAN_TOL = 1e-8
NORM_TOL = 1e-10

_PAULI = {
    "I": np.array([[1, 0], [0, 1]], dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


class NotHermitianError(ValueError):
    pass


def pauli(code: str) -> np.ndarray:
    """Return the 2x2 Pauli matrix named by ``code`` (one of I, X, Y, Z)."""
    try:
        return _PAULI[code.upper()].copy()
    except KeyError:
        raise ValueError(f"unknown Pauli code {code!r}") from None


def is_hermitian(m: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.max(np.abs(m - m.conj().T), initial=0.0) <= tol)


def embed(ops: dict[int, np.ndarray], n: int) -> np.ndarray:
    """Tensor single-qubit operators into place, identity on the other qubits."""
    for q in ops:
        if not 0 <= q < n:
            raise IndexError(f"qubit index {q} out of range for n={n}")
    factors = [ops.get(q, _PAULI["I"]) for q in range(n)]
    return reduce(np.kron, factors, np.ones((1, 1), dtype=complex))


def embed_pair(a: np.ndarray, b: np.ndarray, i: int, j: int, n: int) -> np.ndarray:
    """Operator acting as ``a`` on qubit ``i`` and ``b`` on qubit ``j``."""
    if i == j:
        raise ValueError("embed_pair needs two distinct qubits")
    return embed({i: np.asarray(a, dtype=complex), j: np.asarray(b, dtype=complex)}, n)


@dataclass(frozen=True)
class QuantumState:
    n: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (2**self.n,):
            raise ValueError(f"expected {2**self.n} amplitudes, got shape {amps.shape}")
        norm = np.linalg.norm(amps)
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"state not normalized (norm={norm!r})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)


@dataclass(frozen=True)
class EigenDecomposition:
    """Hermitian eigendecomposition ``H = V diag(eigenvalues) V^dagger``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def propagator(self, t: float) -> np.ndarray:
        v = self.eigenvectors
        return (v * np.exp(-1j * t * self.eigenvalues)) @ v.conj().T


def eig_hermitian(h: np.ndarray) -> EigenDecomposition:
    """Eigendecomposition of a Hermitian matrix, eigenvalues ascending.

    Raises NotHermitianError when the symmetry residual exceeds
    ``1e-8`` relative to the largest entry.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {h.shape}")
    scale = max(np.max(np.abs(h), initial=0.0), 1.0)
    resid = np.max(np.abs(h - h.conj().T), initial=0.0)
    if resid > HERMITIAN_TOL * scale:
        raise NotHermitianError(f"symmetry residual {resid:.3e} exceeds tolerance")
    lam, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    return EigenDecomposition(lam, v)


def evolve(decomp: EigenDecomposition, t: float, psi0: QuantumState) -> QuantumState:
    """Apply ``exp(-i t H)`` to ``psi0`` using a precomputed eigendecomposition."""
    if t < 0:
        raise ValueError("evolution time must be non-negative")
    if psi0.amplitudes.shape[0] != decomp.dim:
        raise ValueError(f"dimension mismatch: state {psi0.amplitudes.shape[0]} vs H {decomp.dim}")
    out = evolve_many(decomp, np.array([t]), psi0.amplitudes)[0]
    return QuantumState(psi0.n, out)


def evolve_many(decomp: EigenDecomposition, times: np.ndarray, psi0: np.ndarray) -> np.ndarray:
    """Evolved amplitude vectors for every time, shape ``(len(times), dim)``."""
    v = decomp.eigenvectors
    coeffs = v.conj().T @ psi0
    phases = np.exp(-1j * np.outer(np.asarray(times, dtype=float), decomp.eigenvalues))
    return (phases * coeffs) @ v.T
