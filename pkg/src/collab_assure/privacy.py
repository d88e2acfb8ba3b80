"""Gaussian label-DP: batch sensitivity, noise, and budget composition.

A mechanism ``q(D) + N(0, (dq / eps)^2)`` is eps-GLDP. Sequential
composition adds budgets in quadrature; mechanisms run on disjoint parts of
the data compose to the maximum budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BudgetExhausted",
    "PrivacyAccountant",
    "batch_sensitivity",
    "sample_noise",
    "per_epoch_budget",
    "compose_sequential",
    "compose_parallel",
    "nonneg_split",
]

TOL = 1e-12


class BudgetExhausted(RuntimeError):
    pass


def batch_sensitivity(z_grads, batch_size: int | None = None) -> float:
    """``(2/|B|) * max_{i,s} ||dz_i(s)/dw||_2`` for a ``(B, K, R)`` Jacobian stack.

    Bounds the L2 change of the mean batch gradient when one label in the
    batch is swapped for another.
    """
    z_grads = np.asarray(z_grads, dtype=float)
    if z_grads.ndim != 3 or z_grads.shape[0] == 0:
        raise ValueError("need a non-empty (B, K, R) array of logit gradients")
    b = z_grads.shape[0] if batch_size is None else int(batch_size)
    if b != z_grads.shape[0]:
        raise ValueError(f"batch_size {b} does not match {z_grads.shape[0]} samples")
    norms = np.sqrt(np.einsum("sir,sir->si", z_grads, z_grads))
    return 2.0 * float(norms.max()) / b


def sample_noise(r: int, epsilon_batch: float, rng: np.random.Generator) -> np.ndarray:
    """``N(0, sigma^2 I_R)`` with ``sigma = 1/eps`` (numpy's ziggurat sampler)."""
    if not epsilon_batch > 0:
        raise ValueError("epsilon must be positive")
    if r < 1:
        raise ValueError("R must be >= 1")
    return rng.normal(0.0, 1.0 / epsilon_batch, size=r)


def per_epoch_budget(epsilon_total: float, epochs: int) -> float:
    return epsilon_total / math.sqrt(epochs)


def compose_sequential(eps_list) -> float:
    # hypot avoids the extra rounding of summing squares
    return math.hypot(*eps_list)


def compose_parallel(eps_list) -> float:
    return max(eps_list, default=0.0)


def nonneg_split(eta):
    """Split ``eta`` into two non-negative vectors whose difference is ``eta``."""
    eta = np.asarray(eta, dtype=float)
    mag = np.abs(eta)
    return eta + mag, mag


@dataclass
class PrivacyAccountant:
    """Tracks spend per (epoch, batch).

    Batches inside an epoch are disjoint, so an epoch costs the max of its
    batch spends; epochs compose sequentially.
    """

    epsilon_total: float
    epochs: int
    ledger: list = field(default_factory=list)

    def __post_init__(self):
        if not self.epsilon_total > 0 or self.epochs < 1:
            raise ValueError("need epsilon_total > 0 and epochs >= 1")

    @property
    def epsilon_per_epoch(self) -> float:
        return per_epoch_budget(self.epsilon_total, self.epochs)

    def epoch_spend(self) -> dict:
        per = {}
        for entry in self.ledger:
            per.setdefault(entry["epoch"], []).append(entry["epsilon"])
        return {e: compose_parallel(v) for e, v in per.items()}

    def total(self) -> float:
        return compose_sequential(self.epoch_spend().values())

    def charge(self, epoch: int, batch: int, sensitivity: float) -> float:
        eps = self.epsilon_per_epoch
        spend = self.epoch_spend()
        spend[epoch] = max(spend.get(epoch, 0.0), eps)
        if compose_sequential(spend.values()) > self.epsilon_total * (1 + TOL):
            raise BudgetExhausted(
                f"charging epoch {epoch} batch {batch} would exceed epsilon={self.epsilon_total}")
        self.ledger.append({"epoch": epoch, "batch": batch, "epsilon": eps, "sensitivity": sensitivity})
        return eps

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.ledger)
