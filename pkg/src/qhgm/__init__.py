"""Simulation and likelihood learning for quantum Hamiltonian gene-expression models.

Qubit ordering: qubit 0 is the most significant bit of a basis index.
Outcome codes: gene 0 is the least significant base-4 digit.
"""
from .hamiltonian import WeightMatrix, build_hamiltonian, flatten, local_term, term_index, unflatten
from .learn import TrainConfig, TrainReport, nll_batch, grad_nll_batch, oracle_loss, train_vqnet
from .metrics import Metrics, compute_metrics
from .model import Dataset, ModelParams, SynthConfig, full_distribution, generate_synthetic, likelihood
from .povm import SingleQubitPOVM, build_default_icpovm, build_icpovm_from_angles, build_sic_povm

__all__ = [
    "WeightMatrix", "build_hamiltonian", "flatten", "local_term", "term_index", "unflatten",
    "TrainConfig", "TrainReport", "nll_batch", "grad_nll_batch", "oracle_loss", "train_vqnet",
    "Metrics", "compute_metrics",
    "Dataset", "ModelParams", "SynthConfig", "full_distribution", "generate_synthetic", "likelihood",
    "SingleQubitPOVM", "build_default_icpovm", "build_icpovm_from_angles", "build_sic_povm",
]
__version__ = "0.1.0"
