"""Training objectives: the three-term cycle loss, the variational bottleneck
loss, and the entropy-steering diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var
from .distributions import (
    DiagonalGaussian,
    entropy,
    kl_to_standard,
    sample_reparam,
)
from .model import Bound, CycleOutputs, decode, embed_goal, simulate_latent
from .rng import SeededRng

SIGMA_OBS = 0.1


@dataclass
class LossWeights:
    lambda_cyc: float = 0.1
    lambda_z: float = 0.01
    beta: float = 1.0

    def __post_init__(self):
        if min(self.lambda_cyc, self.lambda_z, self.beta) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    rec: float
    loop: float
    latent: float
    total: float
    total_var: Var | None = None

    def as_row(self) -> dict[str, float]:
        return {"rec": self.rec, "loop": self.loop, "latent": self.latent, "total": self.total}


def _paired(op: str, a: Var, b: Var):
    if a.shape != b.shape:
        raise ContractError(f"{op}: dimension mismatch {a.shape} vs {b.shape}")


def rec_loss(x: Var, x_hat: Var) -> Var:
    """Squared error averaged over batch and pixels."""
    _paired("rec_loss", x, x_hat)
    return ad.mse(x, x_hat)


def loop_loss(x: Var, x_loop: Var) -> Var:
    _paired("loop_loss", x, x_loop)
    return ad.mse(x, x_loop)


def latent_align_loss(z: Var, z_cycle: Var) -> Var:
    _paired("latent_align_loss", z, z_cycle)
    return ad.mse(z, z_cycle)


def combine(rec: Var, loop: Var, latent: Var, weights: LossWeights) -> LossBreakdown:
    total = rec + ad.scale(loop, weights.lambda_cyc) + ad.scale(latent, weights.lambda_z)
    return LossBreakdown(float(rec.value), float(loop.value), float(latent.value), float(total.value), total)


def composite_loss(outputs: CycleOutputs, x, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """rec + lambda_cyc * loop + lambda_z * latent for one cycle pass.

    The latent term compares the means of the first-pass and re-encoded
    latent distributions.
    """
    tape = outputs.psi_hat.tape
    if not isinstance(x, Var):
        x = tape.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if outputs.psi_loop is None:
        raise ContractError("composite_loss needs the re-decoded loop output")
    rec = rec_loss(x, outputs.psi_hat)
    loop = loop_loss(x, outputs.psi_loop)
    latent = latent_align_loss(outputs.z_dist.mean, outputs.z2_dist.mean)
    return combine(rec, loop, latent, weights)


def gaussian_nll(psi: Var, psi_hat: Var, sigma_obs: float = SIGMA_OBS) -> Var:
    """Per-row Gaussian negative log-likelihood with fixed variance, averaged over rows."""
    _paired("gaussian_nll", psi, psi_hat)
    rows = 1 if psi.value.ndim == 1 else psi.shape[0]
    n = psi.value.size
    sq = ad.sum(ad.square(psi - psi_hat))
    const = 0.5 * n * math.log(2.0 * math.pi * sigma_obs**2) / rows
    return ad.scale(sq, 0.5 / (sigma_obs**2 * rows)) + psi.tape.constant(const)


def vb_loss(p, phi, psi, beta: float, rng: SeededRng, sigma_obs: float = SIGMA_OBS,
            return_parts: bool = False):
    """Single-sample estimate of E[-log p(psi|z)] + beta * KL(p(z|phi) || N(0, I))."""
    if beta < 0:
        raise ContractError("beta must be non-negative")
    bp = p if isinstance(p, Bound) else Bound(p)
    dist = simulate_latent(bp, phi)
    z = sample_reparam(dist, rng)
    psi_v = bp.lift(psi)
    nll = gaussian_nll(psi_v, decode(bp, z), sigma_obs)
    kl = kl_to_standard(dist)
    total = nll + ad.scale(kl, beta)
    if return_parts:
        return total, nll, kl, dist
    return total


def context_entropy_proxy(psi: np.ndarray, psi_hat: np.ndarray, sigma_obs: float = SIGMA_OBS) -> float:
    """Cross-entropy of a sigma_obs-noisy observation under N(psi_hat, sigma_obs^2).

    Equals the Gaussian entropy ``0.5 * D * log(2 pi e sigma_obs^2)`` at zero
    residual and grows with the squared residual. Averaged over rows.
    """
    psi = np.atleast_2d(psi)
    psi_hat = np.atleast_2d(psi_hat)
    D = psi.shape[1]
    resid = ((psi - psi_hat) ** 2).sum(axis=1) / sigma_obs**2
    return float(np.mean(0.5 * (D * math.log(2 * math.pi * math.e * sigma_obs**2) + resid)))


def entropy_steer_proxy(p, batch, rng: SeededRng, sigma_obs: float = SIGMA_OBS) -> float:
    """H(Psi|Z) + H(Z|Phi) estimate on a labeled batch ``(images, labels)``."""
    images, labels = batch
    if len(labels) == 0:
        raise ContractError("entropy_steer_proxy: empty batch")
    bp = p if isinstance(p, Bound) else Bound(p)
    dist = simulate_latent(bp, embed_goal(bp, labels))
    h_z = float(entropy(dist).value)
    psi_hat = decode(bp, sample_reparam(dist, rng)).value
    return context_entropy_proxy(images, psi_hat, sigma_obs) + h_z


def latent_entropy(dist: DiagonalGaussian) -> float:
    return float(entropy(dist).value)
