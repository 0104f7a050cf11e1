"""Forward model: product initial state, unitary evolution, product IC-POVM readout."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import reduce

import numpy as np

from .codes import encode_base4
from .hamiltonian import WeightMatrix, build_hamiltonian, weights_from_dict, weights_to_dict
from .povm import SingleQubitPOVM, product_vectors, rank1_factor
from .qcore import EigenDecomposition, QuantumState, eig_hermitian, evolve_many

N_ENUM = 8
_SAMPLER_CHUNK = 2**22  # complex entries held per sampling chunk


class SamplingDegeneracy(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelParams:
    weights: WeightMatrix
    thetas: np.ndarray
    phis: np.ndarray

    def __post_init__(self):
        th = np.array(self.thetas, dtype=float).ravel()
        ph = np.array(self.phis, dtype=float).ravel()
        n = self.weights.n
        if th.shape != (n,) or ph.shape != (n,):
            raise ValueError(f"need {n} thetas and {n} phis")
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(ph))):
            raise ValueError("initial-state angles must be finite")
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "phis", ph)

    @property
    def n(self) -> int:
        return self.weights.n

    def decomposition(self) -> EigenDecomposition:
        return eig_hermitian(build_hamiltonian(self.weights))

    def to_dict(self) -> dict:
        d = weights_to_dict(self.weights)
        d["thetas"] = self.thetas.tolist()
        d["phis"] = self.phis.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        for key in ("thetas", "phis"):
            if key not in d:
                raise ValueError(f"parameter JSON missing field {key!r}")
        return cls(weights_from_dict(d), d["thetas"], d["phis"])


@dataclass(frozen=True)
class Dataset:
    """Outcome labels of shape ``(N_t, N_c, n)`` with one representative time per bin."""

    times: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        out = np.array(self.outcomes)
        if out.ndim != 3:
            raise ValueError(f"outcomes must be (N_t, N_c, n), got shape {out.shape}")
        if out.shape[0] != times.size:
            raise ValueError(f"{times.size} times for {out.shape[0]} bins")
        if out.size and (out.min() < 0 or out.max() > 3):
            raise ValueError("outcome labels must lie in {0,1,2,3}")
        if np.any(times <= 0) or np.any(np.diff(times) < 0):
            raise ValueError("times must be positive and nondecreasing")
        out = out.astype(np.uint8)
        times.setflags(write=False)
        out.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", out)

    @property
    def n(self) -> int:
        return self.outcomes.shape[2]

    @property
    def n_times(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.outcomes.shape[1]

    def codes(self) -> np.ndarray:
        return encode_base4(self.outcomes)


@dataclass
class SynthConfig:
    n: int = 4
    n_times: int = 30
    n_cells: int = 2000
    t_max: float = 1.0
    w_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.n_times < 1 or self.n_cells < 1:
            raise ValueError("n, n_times and n_cells must be >= 1")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synth config keys: {sorted(extra)}")
        return cls(**d)


# -- states ------------------------------------------------------------------

def _qubit_states(thetas, phis) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float)
    phis = np.asarray(phis, dtype=float)
    return np.stack([np.cos(thetas), np.exp(1j * phis) * np.sin(thetas)], axis=1)


def product_state(thetas, phis) -> np.ndarray:
    return reduce(np.kron, _qubit_states(thetas, phis), np.ones(1, dtype=complex))


def prepare_initial_state(thetas, phis) -> QuantumState:
    thetas = np.asarray(thetas, dtype=float).ravel()
    phis = np.asarray(phis, dtype=float).ravel()
    if thetas.shape != phis.shape:
        raise ValueError("thetas and phis must have equal length")
    return QuantumState(thetas.size, product_state(thetas, phis))


def initial_state_jacobian(thetas, phis) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the product state w.r.t. each theta and each phi, each ``(n, 2^n)``."""
    q = _qubit_states(thetas, phis)
    thetas = np.asarray(thetas, dtype=float)
    phis = np.asarray(phis, dtype=float)
    dq_theta = np.stack([-np.sin(thetas), np.exp(1j * phis) * np.cos(thetas)], axis=1)
    dq_phi = np.stack([np.zeros_like(thetas, dtype=complex), 1j * np.exp(1j * phis) * np.sin(thetas)], axis=1)
    n = len(thetas)
    one = np.ones(1, dtype=complex)

    def swap(k, factor):
        return reduce(np.kron, [factor if j == k else q[j] for j in range(n)], one)

    return (np.stack([swap(k, dq_theta[k]) for k in range(n)]),
            np.stack([swap(k, dq_phi[k]) for k in range(n)]))


def evolved_states(params: ModelParams, times, decomp: EigenDecomposition | None = None) -> np.ndarray:
    decomp = decomp or params.decomposition()
    return evolve_many(decomp, np.atleast_1d(times), product_state(params.thetas, params.phis))


# -- outcome amplitudes ------------------------------------------------------

def amplitude_table(psis: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """``<v_m|psi>`` for every joint outcome, rows indexed by base-4 code.

    ``psis`` has shape ``(K, 2^n)``; the result has shape ``(K, 4^n)``.
    """
    k, d = psis.shape
    n = d.bit_length() - 1
    x = psis.reshape((k,) + (2,) * n)
    vc = vectors.conj()
    for j in range(n):
        x = np.moveaxis(np.tensordot(vc, x, axes=([1], [j + 1])), 0, j + 1)
    return x.transpose((0,) + tuple(range(n, 0, -1))).reshape(k, -1)


def adjoint_table(y: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Adjoint of ``amplitude_table``: ``sum_m y_m |v_m>`` for each row of ``y``."""
    k, big = y.shape
    n = (big.bit_length() - 1) // 2
    x = y.reshape((k,) + (4,) * n).transpose((0,) + tuple(range(n, 0, -1)))
    vt = vectors.T
    for j in range(n):
        x = np.moveaxis(np.tensordot(vt, x, axes=([1], [j + 1])), 0, j + 1)
    return x.reshape(k, -1)


def likelihood(params: ModelParams, t: float, m, povm: SingleQubitPOVM,
               decomp: EigenDecomposition | None = None) -> float:
    m = np.asarray(m, dtype=np.int64).ravel()
    if m.size != params.n or np.any((m < 0) | (m > 3)):
        raise ValueError("outcome vector must have n labels in {0,1,2,3}")
    psi = evolved_states(params, [t], decomp)[0]
    v = product_vectors(rank1_factor(povm).vectors, m[None])[0]
    return float(abs(np.vdot(v, psi)) ** 2 / 2**params.n)


def full_distribution(params: ModelParams, t: float, povm: SingleQubitPOVM,
                      n_enum: int = N_ENUM, decomp: EigenDecomposition | None = None) -> np.ndarray:
    """Probabilities of all ``4^n`` outcomes, indexed by base-4 code."""
    if params.n > n_enum:
        raise ValueError(f"enumeration limited to n <= {n_enum}")
    psi = evolved_states(params, [t], decomp)
    amps = amplitude_table(psi, rank1_factor(povm).vectors)[0]
    return np.abs(amps) ** 2 / 2**params.n


# -- sampling ----------------------------------------------------------------

def sample_from_state(psi: np.ndarray, count: int, povm: SingleQubitPOVM, rng) -> np.ndarray:
    """Draw ``count`` outcome vectors by measuring qubits one after another.

    Each qubit's four conditional probabilities come from contracting the
    current conditional state with the rank-1 measurement vectors; the chosen
    branch is projected and renormalized before moving to the next qubit.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    psi = np.asarray(psi, dtype=complex)
    d = psi.size
    n = d.bit_length() - 1
    norm0 = np.linalg.norm(psi)
    if not norm0 > 1e-140:
        raise SamplingDegeneracy("cannot sample from a zero state vector")
    vc = rank1_factor(povm).vectors.conj()
    out = np.empty((count, n), dtype=np.uint8)
    chunk = max(1, _SAMPLER_CHUNK // (4 * d))
    for start in range(0, count, chunk):
        s = min(chunk, count - start)
        states = np.broadcast_to(psi / norm0, (s, d))
        rows = np.arange(s)
        for j in range(n):
            x = states.reshape(s, 2, -1)
            branches = np.einsum("mb,sbr->smr", vc, x)
            probs = 0.5 * np.sum(np.abs(branches) ** 2, axis=2)
            total = probs.sum(axis=1)
            if np.any(total < 1e-280):
                raise SamplingDegeneracy("conditional state norm underflowed")
            cdf = np.cumsum(probs / total[:, None], axis=1)
            u = rng.random(s)
            pick = np.minimum((cdf < u[:, None]).sum(axis=1), 3)
            out[start:start + s, j] = pick
            chosen = branches[rows, pick]
            norms = np.linalg.norm(chosen, axis=1)
            if np.any(norms < 1e-140):
                raise SamplingDegeneracy("sampled a branch with vanishing amplitude")
            states = chosen / norms[:, None]
    return out


def sample_outcomes(params: ModelParams, t: float, count: int, povm: SingleQubitPOVM, rng,
                    decomp: EigenDecomposition | None = None) -> np.ndarray:
    psi = evolved_states(params, [t], decomp)[0]
    return sample_from_state(psi, count, povm, rng)


def time_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for time bin ``index``; derived only from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def sample_truth(cfg: SynthConfig) -> tuple[ModelParams, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    n = cfg.n
    w = rng.uniform(-cfg.w_max, cfg.w_max, size=(n, n))
    np.fill_diagonal(w, 0.0)
    thetas = rng.uniform(0.0, np.pi, size=n)
    phis = rng.uniform(0.0, 2 * np.pi, size=n)
    times = np.sort(cfg.t_max * (1.0 - rng.random(cfg.n_times)))  # (0, t_max]
    return ModelParams(WeightMatrix(w, cfg.w_max), thetas, phis), times


def simulate(params: ModelParams, times, n_cells: int, povm: SingleQubitPOVM, seed: int) -> Dataset:
    times = np.asarray(times, dtype=float)
    psis = evolved_states(params, times)
    outcomes = np.stack([
        sample_from_state(psis[i], n_cells, povm, time_stream(seed, i)) for i in range(times.size)
    ])
    return Dataset(times, outcomes)


def generate_synthetic(cfg: SynthConfig, povm: SingleQubitPOVM) -> tuple[Dataset, ModelParams]:
    truth, times = sample_truth(cfg)
    return simulate(truth, times, cfg.n_cells, povm, cfg.seed), truth
