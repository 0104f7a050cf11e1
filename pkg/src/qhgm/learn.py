"""Likelihood-based learning of Hamiltonian and initial-state parameters.

Gradients of outcome probabilities are evaluated in closed form in the
eigenbasis of ``H = V diag(lam) V^dagger``: with ``A_k = V^dagger H_k V`` the
derivative of the propagator is ``dU_t/dw_k = -i U_t V (A_k * F_t) V^dagger``,
where ``F_t[a, b] = (exp(i (lam_a - lam_b) t) - 1) / (i (lam_a - lam_b))`` and
``F_t[a, a] = t``. Losses that are sums over observed outcomes are
differentiated with a single adjoint pass, so one step costs one
eigendecomposition plus O(N_t d^2 + d^3 + c d^2) work regardless of the number
of cells.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .codes import decode_base4, encode_base4
from .hamiltonian import WeightMatrix, flatten, grn_terms, unflatten
from .metrics import METRIC_FIELDS, compute_metrics
from .model import (N_ENUM, Dataset, ModelParams, adjoint_table, amplitude_table,
                    full_distribution, initial_state_jacobian, product_state, sample_outcomes)
from .povm import SingleQubitPOVM, product_vectors, rank1_factor
from .qcore import eig_hermitian

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SYNTHETIC_LR = 0.85
GBMAP_LR = 0.085
HESSIAN_MAX_PARAMS = 30
_PHI_CHUNK = 2**21  # complex entries of the F_t stack held at once


# -- configuration and containers ---------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 2500
    batch_size: int = 20
    lr_base: float = SYNTHETIC_LR
    lr_schedule: str = "adaptive"
    w_max: float = 1.0
    p_floor: float = 1e-12
    learn_initial_state: bool = True
    seed: int = 0
    w_latent_init: tuple[float, float] = (-0.5, 0.5)
    theta_init: tuple[float, float] = (np.pi / 4, 3 * np.pi / 4)
    phi_init: tuple[float, float] = (np.pi / 2, 3 * np.pi / 2)
    fixed_thetas: list[float] | None = None
    fixed_phis: list[float] | None = None
    full_batch: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.p_floor <= 1e-3:
            raise ValueError("p_floor must lie in (0, 1e-3]")
        if self.lr_schedule not in ("adaptive", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not self.w_max > 0:
            raise ValueError("w_max must be positive")
        for key in ("w_latent_init", "theta_init", "phi_init"):
            object.__setattr__(self, key, tuple(float(x) for x in getattr(self, key)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("w_latent_init", "theta_init", "phi_init"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class LatentParams:
    """Unconstrained parameters; weights are ``w_max * tanh(w_latent)``."""

    w_latent: np.ndarray
    thetas: np.ndarray
    phis: np.ndarray
    w_max: float = 1.0

    def weights(self) -> np.ndarray:
        return self.w_max * np.tanh(self.w_latent)

    def to_params(self, n: int) -> ModelParams:
        return ModelParams(unflatten(self.weights(), n, self.w_max), self.thetas, self.phis)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.w_latent, self.thetas, self.phis])


@dataclass(frozen=True)
class Observations:
    """Weighted outcome codes grouped by time bin; weights sum to one."""

    times: np.ndarray
    time_index: np.ndarray
    codes: np.ndarray
    weights: np.ndarray
    n: int

    @classmethod
    def from_codes(cls, times, codes: np.ndarray, n: int) -> "Observations":
        """``codes`` has shape ``(N_t, k)``: k observed outcome codes per time bin."""
        codes = np.asarray(codes, dtype=np.int64)
        nt, k = codes.shape
        ti = np.repeat(np.arange(nt), k)
        flat = codes.ravel()
        total = nt * k
        if n <= 25:
            keys, counts = np.unique(ti * 4**n + flat, return_counts=True)
            ti, flat = keys // 4**n, keys % 4**n
            wts = counts / total
        else:
            wts = np.full(total, 1.0 / total)
        return cls(np.asarray(times, dtype=float), ti, flat, wts, n)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Observations":
        return cls.from_codes(ds.times, ds.codes(), ds.n)

    @classmethod
    def single(cls, t: float, m) -> "Observations":
        m = np.asarray(m, dtype=np.int64).ravel()
        return cls(np.array([float(t)]), np.array([0]), np.array([encode_base4(m)]), np.array([1.0]), m.size)


@dataclass
class Evaluation:
    value: float
    grad_w: np.ndarray | None = None
    grad_theta: np.ndarray | None = None
    grad_phi: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        return np.concatenate([self.grad_w, self.grad_theta, self.grad_phi])


# -- core evaluation ----------------------------------------------------------

def _use_enumeration(n: int, n_times: int, n_obs: int) -> bool:
    return n <= N_ENUM and n_times * n * 4**n <= 4 * n_obs * 2**n


def _divided_differences(lam: np.ndarray, times: np.ndarray) -> np.ndarray:
    """F_t[a, b] for each time, via t * exp(i x / 2) * sinc(x / 2) with x = (lam_a - lam_b) t.

    The sinc form is exact at coincident eigenvalues (F = t) and loses no
    precision for nearly degenerate pairs.
    """
    delta = lam[:, None] - lam[None, :]
    x = times[:, None, None] * delta[None]
    return times[:, None, None] * np.exp(0.5j * x) * np.sinc(x / (2 * np.pi))


def evaluate(terms: np.ndarray, w: np.ndarray, thetas: np.ndarray, phis: np.ndarray,
             obs: Observations, vectors: np.ndarray, objective: str = "nll",
             p_floor: float = 1e-12, grad: bool = True) -> Evaluation:
    """Weighted sum over observed outcomes of ``-log p`` (``objective='nll'``) or ``p`` ('prob').

    ``terms`` are the Hermitian local terms, ``w`` their coefficients, and
    ``vectors`` the rank-1 POVM vectors of the single-qubit measurement.
    """
    n = thetas.size
    d = 2**n
    times = obs.times
    h = np.tensordot(w, terms, axes=1) if len(w) else np.zeros((d, d), dtype=complex)
    dec = eig_hermitian(h)
    lam, v = dec.eigenvalues, dec.eigenvectors
    psi0 = product_state(thetas, phis)
    c0 = v.conj().T @ psi0
    phase = np.exp(-1j * np.outer(times, lam))
    psit = (phase * c0) @ v.T

    ti, codes, wts = obs.time_index, obs.codes, obs.weights
    enum = _use_enumeration(n, times.size, codes.size)
    if enum:
        a = amplitude_table(psit, vectors)[ti, codes]
    else:
        prod = product_vectors(vectors, decode_base4(codes, n))
        a = np.einsum("ub,ub->u", prod.conj(), psit[ti])
    p = np.abs(a) ** 2 / d

    if objective == "nll":
        clamped = p < p_floor
        value = -float(np.sum(wts * np.log(np.where(clamped, p_floor, p))))
        dvdp = np.where(clamped, 0.0, -wts / np.where(clamped, 1.0, p))
    elif objective == "prob":
        value = float(np.sum(wts * p))
        dvdp = wts
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if not grad:
        return Evaluation(value)

    y = dvdp * (2.0 / d) * a
    if enum:
        ybig = np.zeros((times.size, 4**n), dtype=complex)
        np.add.at(ybig, (ti, codes), y)
        xi = adjoint_table(ybig, vectors)
    else:
        xi = np.zeros((times.size, d), dtype=complex)
        np.add.at(xi, ti, y[:, None] * prod)
    xi_e = phase.conj() * (xi @ v.conj())  # exp(+i lam t) V^dagger xi, per time

    omega = np.zeros((d, d), dtype=complex)
    step = max(1, _PHI_CHUNK // (d * d))
    for s in range(0, times.size, step):
        f = _divided_differences(lam, times[s:s + step])
        omega += np.einsum("ta,tab->ab", xi_e[s:s + step].conj(), f)
    omega *= c0[None, :]
    g = v.conj() @ omega @ v.T
    grad_w = np.imag(np.einsum("kxy,xy->k", terms, g))

    zeta = v @ xi_e.sum(axis=0)
    d_theta, d_phi = initial_state_jacobian(thetas, phis)
    grad_theta = np.real(d_theta @ zeta.conj())
    grad_phi = np.real(d_phi @ zeta.conj())
    return Evaluation(value, grad_w, grad_theta, grad_phi)


def _vectors(povm: SingleQubitPOVM) -> np.ndarray:
    return rank1_factor(povm).vectors


def _batch_obs(batch) -> Observations:
    if isinstance(batch, Observations):
        return batch
    if isinstance(batch, Dataset):
        if batch.n_cells == 0:
            raise ValueError("batch is empty")
        return Observations.from_dataset(batch)
    raise TypeError(f"expected Dataset or Observations, got {type(batch).__name__}")


# -- public operations --------------------------------------------------------

def nll_batch(params: ModelParams, batch, povm: SingleQubitPOVM, p_floor: float = 1e-12) -> float:
    """Mean negative log-likelihood ``-1/(B N_t) sum log max(p, p_floor)``."""
    obs = _batch_obs(batch)
    return evaluate(grn_terms(params.n), flatten(params.weights), params.thetas, params.phis,
                    obs, _vectors(povm), "nll", p_floor, grad=False).value


def grad_likelihood(params: ModelParams, t: float, m, povm: SingleQubitPOVM) -> np.ndarray:
    """Gradient of ``p(m | t)`` over ``[w (term order), thetas, phis]``."""
    ev = evaluate(grn_terms(params.n), flatten(params.weights), params.thetas, params.phis,
                  Observations.single(t, m), _vectors(povm), "prob")
    return ev.vector()


def nll_and_grad(params: ModelParams, batch, povm: SingleQubitPOVM, p_floor: float = 1e-12) -> Evaluation:
    """NLL and its gradient over the constrained weights and the angles."""
    return evaluate(grn_terms(params.n), flatten(params.weights), params.thetas, params.phis,
                    _batch_obs(batch), _vectors(povm), "nll", p_floor)


def grad_nll_batch(latent: LatentParams, batch, povm: SingleQubitPOVM, p_floor: float = 1e-12) -> np.ndarray:
    """Gradient of the batch NLL over ``[w_latent, thetas, phis]``."""
    obs = _batch_obs(batch)
    ev = evaluate(grn_terms(obs.n), latent.weights(), latent.thetas, latent.phis,
                  obs, _vectors(povm), "nll", p_floor)
    dw = latent.w_max * (1.0 - np.tanh(latent.w_latent) ** 2)
    return np.concatenate([ev.grad_w * dw, ev.grad_theta, ev.grad_phi])


@dataclass(frozen=True)
class HessianEstimate:
    matrix: np.ndarray
    raw: np.ndarray

    @property
    def asymmetry(self) -> float:
        """Pre-symmetrization residual relative to the largest entry."""
        scale = np.max(np.abs(self.raw))
        return float(np.max(np.abs(self.raw - self.raw.T)) / scale) if scale else 0.0

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])


def empirical_hessian(params: ModelParams, dataset, povm: SingleQubitPOVM,
                      step: float = 1e-4, p_floor: float = 1e-12) -> HessianEstimate:
    """Hessian of the full-data NLL in the weights (angles held fixed).

    Central differences of the analytic gradient, step ``step * max(1, |w_k|)``,
    then symmetrized.
    """
    obs = _batch_obs(dataset)
    n = params.n
    terms = grn_terms(n)
    w0 = flatten(params.weights)
    c = w0.size
    if c > HESSIAN_MAX_PARAMS:
        raise ValueError(f"Hessian limited to {HESSIAN_MAX_PARAMS} weights, got {c}")
    vec = _vectors(povm)
    raw = np.empty((c, c))
    for k in range(c):
        h = step * max(1.0, abs(w0[k]))
        e = np.zeros(c)
        e[k] = h
        gp = evaluate(terms, w0 + e, params.thetas, params.phis, obs, vec, "nll", p_floor).grad_w
        gm = evaluate(terms, w0 - e, params.thetas, params.phis, obs, vec, "nll", p_floor).grad_w
        raw[:, k] = (gp - gm) / (2 * h)
    return HessianEstimate(0.5 * (raw + raw.T), raw)


@dataclass(frozen=True)
class AdamState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def start(cls, x) -> "AdamState":
        x = np.array(x, dtype=float)
        return cls(x, np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(state: AdamState, grad, lr: float) -> AdamState:
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.x.shape:
        raise ValueError("gradient shape does not match parameters")
    k = state.step + 1
    m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * grad**2
    m_hat = m / (1 - ADAM_BETA1**k)
    v_hat = v / (1 - ADAM_BETA2**k)
    x = state.x - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return AdamState(x, m, v, k)


def lr_schedule(epoch: int, base: float = SYNTHETIC_LR, kind: str = "adaptive") -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if kind == "constant":
        return base
    return base / np.sqrt(epoch / 4 + 1)


def oracle_loss(truth: ModelParams, times, povm: SingleQubitPOVM, n_enum: int = N_ENUM) -> float:
    """Mean outcome entropy (nats) at the true parameters over the given times."""
    if truth.n > n_enum:
        raise ValueError(f"exact oracle loss limited to n <= {n_enum}; use oracle_loss_mc")
    dec = truth.decomposition()
    total = 0.0
    for t in np.atleast_1d(times):
        p = full_distribution(truth, float(t), povm, n_enum, dec)
        nz = p[p > 0]
        total -= float(np.sum(nz * np.log(nz)))
    return total / np.size(times)


def oracle_loss_mc(truth: ModelParams, times, povm: SingleQubitPOVM, n_samples: int,
                   seed: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate of ``oracle_loss`` with its standard error."""
    rng = np.random.default_rng(seed)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    dec = truth.decomposition()
    codes = np.stack([encode_base4(sample_outcomes(truth, float(t), n_samples, povm, rng, dec))
                      for t in times])
    psi0 = dec.eigenvectors.conj().T @ product_state(truth.thetas, truth.phis)
    psit = (np.exp(-1j * np.outer(times, dec.eigenvalues)) * psi0) @ dec.eigenvectors.T
    prod = product_vectors(_vectors(povm), decode_base4(codes.ravel(), truth.n))
    a = np.einsum("ub,ub->u", prod.conj(), np.repeat(psit, n_samples, axis=0))
    logs = -np.log(np.abs(a) ** 2 / 2**truth.n)
    per_time = logs.reshape(times.size, n_samples).mean(axis=1)
    var = logs.reshape(times.size, n_samples).var(axis=1, ddof=1) / n_samples
    return float(per_time.mean()), float(np.sqrt(var.sum()) / times.size)


# -- training -----------------------------------------------------------------

class BatchSchedule:
    """Per-bin cell selection: a full pass of sequential batches, then uniform draws.

    Each bin gets its own random permutation; batches walk it in order (the last
    partial batch wraps to the start of the permutation) until every cell has
    been used once. Afterwards cells are drawn uniformly with replacement.
    """

    def __init__(self, n_times: int, n_cells: int, batch_size: int, rng: np.random.Generator):
        if batch_size > n_cells:
            raise ValueError(f"batch size {batch_size} exceeds cells per bin {n_cells}")
        self.n_times, self.n_cells, self.batch_size = n_times, n_cells, batch_size
        self.rng = rng
        self.perms = rng.permuted(np.tile(np.arange(n_cells), (n_times, 1)), axis=1)
        self.pos = 0

    @property
    def sequential(self) -> bool:
        return self.pos < self.n_cells

    def next(self) -> np.ndarray:
        b = self.batch_size
        if self.sequential:
            idx = (self.pos + np.arange(b)) % self.n_cells
            self.pos += b
            return self.perms[:, idx]
        return self.rng.integers(0, self.n_cells, size=(self.n_times, b))


@dataclass
class TrainReport:
    losses: list[float]
    lrs: list[float]
    final: ModelParams
    latent: np.ndarray
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    final_metrics: dict | None = None
    final_full_nll: float | None = None
    oracle_loss: float | None = None
    config: dict | None = None
    wall_clock_s: float = 0.0  # kept out of the JSON so reports stay byte-identical

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "losses": self.losses,
            "final_params": self.final.to_dict(),
            "latent": self.latent.tolist(),
            "final_metrics": self.final_metrics,
            "final_full_nll": self.final_full_nll,
            "oracle_loss": self.oracle_loss,
            "config": self.config,
        }

    def epoch_rows(self) -> list[dict]:
        rows = []
        for e, (lr, loss) in enumerate(zip(self.lrs, self.losses)):
            row = {"epoch": e, "lr": lr, "batch_loss": loss}
            metrics = self.history[e] if self.history else {}
            row.update({k: metrics.get(k, "") for k in METRIC_FIELDS})
            rows.append(row)
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(out / "epochs.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "batch_loss", *METRIC_FIELDS])
            writer.writeheader()
            writer.writerows(self.epoch_rows())


def init_latent(n: int, cfg: TrainConfig, rng: np.random.Generator) -> LatentParams:
    c = n * (n - 1)
    w_lat = rng.uniform(*cfg.w_latent_init, size=c)
    if cfg.learn_initial_state:
        thetas = rng.uniform(*cfg.theta_init, size=n)
        phis = rng.uniform(*cfg.phi_init, size=n)
    else:
        # uniform superposition (|0> + |1>)/sqrt(2) on every qubit unless given
        thetas = np.array(cfg.fixed_thetas if cfg.fixed_thetas is not None else [np.pi / 4] * n, dtype=float)
        phis = np.array(cfg.fixed_phis if cfg.fixed_phis is not None else [0.0] * n, dtype=float)
        if thetas.shape != (n,) or phis.shape != (n,):
            raise ValueError(f"fixed_thetas / fixed_phis must each have {n} entries")
    return LatentParams(w_lat, thetas, phis, cfg.w_max)


def train_vqnet(dataset: Dataset, cfg: TrainConfig, povm: SingleQubitPOVM,
                truth: ModelParams | None = None, init: LatentParams | None = None,
                callback=None) -> TrainReport:
    """Mini-batch Adam on the tanh-reparameterized NLL, one step per epoch.

    Each epoch draws ``batch_size`` cells from every time bin (see
    ``BatchSchedule``), or uses every cell when ``cfg.full_batch`` is set.
    """
    n = dataset.n
    if not cfg.full_batch and cfg.batch_size > dataset.n_cells:
        raise ValueError(f"batch size {cfg.batch_size} exceeds cells per bin {dataset.n_cells}")
    if truth is not None and truth.n != n:
        raise ValueError("ground truth does not match dataset gene count")
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    latent = init if init is not None else init_latent(n, cfg, rng)
    c = n * (n - 1)
    terms = grn_terms(n)
    vec = _vectors(povm)
    codes = dataset.codes()
    full_obs = Observations.from_codes(dataset.times, codes, n)
    sched = None if cfg.full_batch else BatchSchedule(dataset.n_times, dataset.n_cells, cfg.batch_size, rng)
    learn_state = cfg.learn_initial_state
    fixed_th, fixed_ph = latent.thetas.copy(), latent.phis.copy()

    state = AdamState.start(latent.vector() if learn_state else latent.w_latent)
    losses, lrs, history = [], [], []

    def unpack(x):
        if learn_state:
            return x[:c], x[c:c + n], x[c + n:]
        return x, fixed_th, fixed_ph

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr_base, cfg.lr_schedule)
        if sched is None:
            obs = full_obs
        else:
            cells = sched.next()
            obs = Observations.from_codes(dataset.times, np.take_along_axis(codes, cells, axis=1), n)
        w_lat, th, ph = unpack(state.x)
        ev = evaluate(terms, cfg.w_max * np.tanh(w_lat), th, ph, obs, vec, "nll", cfg.p_floor)
        gw = ev.grad_w * cfg.w_max * (1.0 - np.tanh(w_lat) ** 2)
        g = np.concatenate([gw, ev.grad_theta, ev.grad_phi]) if learn_state else gw
        state = adam_step(state, g, lr)
        losses.append(ev.value)
        lrs.append(lr)
        if truth is not None:
            w_lat, th, ph = unpack(state.x)
            current = LatentParams(w_lat, th, ph, cfg.w_max).to_params(n)
            history.append(compute_metrics(current, truth).to_dict())
        if callback is not None:
            callback(epoch, ev.value, state)

    w_lat, th, ph = unpack(state.x)
    latent = LatentParams(w_lat.copy(), np.array(th), np.array(ph), cfg.w_max)
    final = latent.to_params(n)
    full_nll = evaluate(terms, latent.weights(), final.thetas, final.phis, full_obs, vec,
                        "nll", cfg.p_floor, grad=False).value
    report = TrainReport(
        losses=losses, lrs=lrs, final=final, latent=latent.vector() if learn_state else latent.w_latent,
        epochs_run=cfg.epochs, history=history, final_full_nll=full_nll, config=cfg.to_dict(),
    )
    if truth is not None:
        report.final_metrics = compute_metrics(final, truth).to_dict()
        if n <= N_ENUM:
            report.oracle_loss = oracle_loss(truth, dataset.times, povm)
    report.wall_clock_s = time.perf_counter() - started
    log.info("trained %d epochs in %.1fs, final full NLL %.5f", cfg.epochs, report.wall_clock_s, full_nll)
    return report
