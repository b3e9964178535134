"""Diagonal Gaussian and categorical distribution math, in nats.

A ``DiagonalGaussian`` holds tape variables of shape ``[k]`` or ``[B, k]``.
For batched inputs every scalar returned here is the per-row quantity
(summed over dimensions) averaged over rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var
from .rng import SeededRng

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)
LOG_2PIE = math.log(2.0 * math.pi * math.e)


@dataclass
class DiagonalGaussian:
    mean: Var
    log_var: Var

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ContractError(f"DiagonalGaussian: mean {self.mean.shape} vs log_var {self.log_var.shape}")
        v = self.log_var.value
        if v.min() < LOG_VAR_MIN or v.max() > LOG_VAR_MAX:
            self.log_var = ad.clip(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def from_arrays(cls, mean, log_var, tape: Tape | None = None) -> "DiagonalGaussian":
        tape = tape if tape is not None else Tape()
        return cls(tape.constant(mean), tape.constant(log_var))

    @property
    def tape(self) -> Tape:
        return self.mean.tape

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def rows(self) -> int:
        return 1 if self.mean.value.ndim == 1 else self.mean.shape[0]

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.value)


def _ones(like: Var) -> Var:
    return like.tape.constant(np.ones(like.shape))


def _row_mean_of_sum(x: Var, rows: int) -> Var:
    return ad.scale(ad.sum(x), 1.0 / rows)


def sample_reparam(g: DiagonalGaussian, rng: SeededRng) -> Var:
    eps = g.tape.constant(rng.standard_normal(g.mean.shape))
    std = ad.exp(ad.scale(g.log_var, 0.5))
    return g.mean + ad.hadamard(std, eps)


def kl_to_standard(g: DiagonalGaussian) -> Var:
    """KL(g || N(0, I)) = 0.5 * sum(mu^2 + var - 1 - log var)."""
    inner = ad.square(g.mean) + ad.exp(g.log_var) - _ones(g.mean) - g.log_var
    return ad.scale(_row_mean_of_sum(inner, g.rows), 0.5)


def kl_between(a: DiagonalGaussian, b: DiagonalGaussian) -> Var:
    """KL(a || b) for diagonal Gaussians of equal dimension."""
    if a.mean.shape != b.mean.shape:
        raise ContractError(f"kl_between: dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    inv_var_b = ad.exp(ad.scale(b.log_var, -1.0))
    diff = a.mean - b.mean
    ratio = ad.hadamard(ad.exp(a.log_var) + ad.square(diff), inv_var_b)
    inner = b.log_var - a.log_var + ratio - _ones(a.mean)
    return ad.scale(_row_mean_of_sum(inner, a.rows), 0.5)


def entropy(g: DiagonalGaussian) -> Var:
    inner = g.log_var + g.tape.constant(np.full(g.mean.shape, LOG_2PIE))
    return ad.scale(_row_mean_of_sum(inner, g.rows), 0.5)


def gaussian_log_prob(g: DiagonalGaussian, x: Var) -> Var:
    if x.shape != g.mean.shape:
        raise ContractError(f"gaussian_log_prob: x {x.shape} vs distribution {g.mean.shape}")
    resid = ad.hadamard(ad.square(x - g.mean), ad.exp(ad.scale(g.log_var, -1.0)))
    inner = g.log_var + resid + g.tape.constant(np.full(g.mean.shape, LOG_2PI))
    return ad.scale(_row_mean_of_sum(inner, g.rows), -0.5)


# plain-array conveniences used by metrics and tests

def kl_between_arrays(mu_a, lv_a, mu_b, lv_b) -> np.ndarray:
    """Per-row KL(a || b) without a tape."""
    lv_a = np.clip(lv_a, LOG_VAR_MIN, LOG_VAR_MAX)
    lv_b = np.clip(lv_b, LOG_VAR_MIN, LOG_VAR_MAX)
    inner = lv_b - lv_a + (np.exp(lv_a) + (mu_a - mu_b) ** 2) * np.exp(-lv_b) - 1.0
    return 0.5 * inner.sum(axis=-1)


def entropy_arrays(log_var) -> np.ndarray:
    lv = np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    return 0.5 * (lv + LOG_2PIE).sum(axis=-1)


@dataclass
class CategoricalPrior:
    logits: np.ndarray

    @classmethod
    def uniform(cls, num_classes: int) -> "CategoricalPrior":
        return cls(np.zeros(num_classes))

    @property
    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    def sample(self, rng: SeededRng, n: int) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        u = rng.uniform((n,)) * cdf[-1]
        return np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1)
