"""Diagonal Fisher importance over BN affine parameters and the quadratic penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .network import BATCH_STATS, ParamSet, backward_adaptable, forward
from .numerics import log_softmax


@dataclass(frozen=True)
class PseudoLabeledSet:
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class FisherDiag:
    omega: np.ndarray
    sample_count: int

    def __post_init__(self):
        omega = np.array(self.omega, dtype=np.float64)
        if np.any(omega < 0):
            raise ContractError("Fisher entries must be non-negative")
        omega.flags.writeable = False
        object.__setattr__(self, "omega", omega)


def pseudo_label(params_o: ParamSet, id_samples, bn_mode=BATCH_STATS) -> PseudoLabeledSet:
    """Hard labels from the original model. ``argmax`` breaks ties toward the lowest index."""
    x = np.asarray(id_samples, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ContractError("need a non-empty (Q, d) sample matrix")
    logits, _ = forward(params_o, x, bn_mode)
    return PseudoLabeledSet(features=x, labels=logits.argmax(axis=1))


def estimate_fisher(params_o: ParamSet, dset: PseudoLabeledSet, bn_mode=BATCH_STATS,
                    chunk: int = 32) -> FisherDiag:
    """Mean over samples of the squared per-sample cross-entropy gradient.

    One forward over the whole set (so batch statistics do not depend on row
    order), then per-sample backward passes stacked ``chunk`` at a time.
    Squares are taken per sample before averaging.
    """
    x = dset.features
    q = len(x)
    if q == 0:
        raise ContractError("Fisher estimation needs at least one sample")
    logits, cache = forward(params_o, x, bn_mode)
    c = logits.shape[1]
    dce = np.exp(log_softmax(logits))
    dce[np.arange(q), dset.labels] -= 1.0
    total = np.zeros(params_o.arch.n_adaptable)
    for start in range(0, q, chunk):
        idx = np.arange(start, min(start + chunk, q))
        upstream = np.zeros((len(idx), q, c))
        upstream[np.arange(len(idx)), idx] = dce[idx]
        g = backward_adaptable(cache, upstream)
        total += (g * g).sum(axis=0)
    return FisherDiag(omega=total / q, sample_count=q)


def _check(theta, theta_o, omega):
    theta = np.asarray(theta, dtype=np.float64)
    theta_o = np.asarray(theta_o, dtype=np.float64)
    omega = omega.omega if isinstance(omega, FisherDiag) else np.asarray(omega, dtype=np.float64)
    if not theta.shape == theta_o.shape == omega.shape:
        raise ContractError(f"length mismatch: {theta.shape}, {theta_o.shape}, {omega.shape}")
    return theta, theta_o, omega


def reg_penalty(theta, theta_o, omega) -> float:
    theta, theta_o, omega = _check(theta, theta_o, omega)
    d = theta - theta_o
    return float(np.dot(omega, d * d))


def reg_grad(theta, theta_o, omega) -> np.ndarray:
    theta, theta_o, omega = _check(theta, theta_o, omega)
    return 2.0 * omega * (theta - theta_o)


def fisher_for(params_o: ParamSet, id_samples, bn_mode=BATCH_STATS) -> FisherDiag:
    """Pseudo-label ``id_samples`` with ``params_o`` and estimate the Fisher diagonal."""
    return estimate_fisher(params_o, pseudo_label(params_o, id_samples, bn_mode), bn_mode)

