"""Adam, cycle-consistent training, and the wake-sleep baseline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data_io import LabeledDataset
from .distributions import DiagonalGaussian, gaussian_log_prob, kl_between, kl_to_standard, sample_reparam
from .model import (
    GENERATIVE,
    RECOGNITION,
    Bound,
    C2hmParams,
    CycleOutputs,
    ModelConfig,
    cycle_decode,
    cycle_encode,
    decode,
    embed_goal,
    full_cycle,
    init_params,
    simulate_latent,
)
from .objectives import LossBreakdown, LossWeights, composite_loss
from .rng import SeededRng

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, in place on the arrays in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 5
    min_delta: float = 1e-5
    seed: int = 7
    val_fraction: float = 0.1
    anchor_recognition: bool = True
    bottleneck_beta: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ContractError("batch_size and patience must be at least 1")


@dataclass
class EpochLog:
    epoch: int
    train: dict[str, float]
    val_total: float
    seconds: float
    steps: int = 0

    def key(self):
        """Everything except wall-clock time, for determinism checks."""
        return (self.epoch, tuple(sorted(self.train.items())), self.val_total, self.steps)


def split_validation(data: LabeledDataset, fraction: float):
    n_val = max(1, int(round(len(data) * fraction)))
    n_train = len(data) - n_val
    if n_train < 1:
        raise ContractError("dataset too small for a validation split")
    return data.subset(slice(0, n_train), "train"), data.subset(slice(n_train, None), "val")


def batches(n: int, batch_size: int, rng: SeededRng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# -- cycle-consistent training ---------------------------------------------------


@dataclass
class BatchLoss:
    bound: Bound
    outputs: CycleOutputs
    parts: LossBreakdown
    aux: ad.Var


def c2hm_batch_loss(params: C2hmParams, images, labels, weights: LossWeights, rng: SeededRng,
                    trainable=None, anchor: bool = True) -> BatchLoss:
    """Composite loss for one batch plus the detached auxiliary term.

    The auxiliary term sits outside the composite total: the cycle decoder
    learns to recover phi from the second latent, and (with ``anchor``) the
    cycle encoder learns to place real images on the content latent,
    KL(q(Z|phi) || q(Z|x)) with q(Z|phi) frozen. Its gradient reaches only
    the cycle decoder and cycle encoder.
    """
    bp = Bound(params, trainable=trainable)
    phi = embed_goal(bp, labels)
    out = full_cycle(bp, phi, rng)
    parts = composite_loss(out, images, weights)
    aux = ad.mse(cycle_decode(bp, ad.stop_gradient(out.z2)), ad.stop_gradient(phi))
    if anchor:
        target = DiagonalGaussian(ad.stop_gradient(out.z_dist.mean), ad.stop_gradient(out.z_dist.log_var))
        aux = aux + kl_between(target, cycle_encode(bp, images))
    return BatchLoss(bp, out, parts, aux)


def evaluate_c2hm(params: C2hmParams, data: LabeledDataset, weights: LossWeights, seed: int,
                  batch_size: int = 500) -> LossBreakdown:
    rng = SeededRng(seed)
    sums = np.zeros(4)
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        parts = c2hm_batch_loss(params, data.images[sl], data.labels[sl], weights, rng, trainable=()).parts
        n = len(data.labels[sl])
        sums += n * np.array([parts.rec, parts.loop, parts.latent, parts.total])
    rec, loop, latent, total = sums / len(data)
    return LossBreakdown(rec, loop, latent, total)


def _run_epochs(config: TrainConfig, train: LabeledDataset, val: LabeledDataset, params: C2hmParams,
                step_fn, eval_fn):
    if len(train) == 0:
        raise ContractError("empty training set")
    rng = SeededRng(config.seed).spawn(1)
    best, best_params, stale = np.inf, params.copy(), 0
    logs: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        steps = 0
        for idx in batches(len(train), config.batch_size, rng):
            row = step_fn(params, train.images[idx], train.labels[idx], rng)
            for key, val_ in row.items():
                sums[key] = sums.get(key, 0.0) + val_
            steps += 1
        val_total = eval_fn(params)
        if not np.isfinite(val_total):
            raise FloatingPointError(f"validation loss not finite at epoch {epoch}")
        logs.append(EpochLog(epoch, {k: v / steps for k, v in sums.items()}, val_total,
                             time.perf_counter() - t0, steps))
        log.info("epoch %d val %.6f", epoch, val_total)
        if val_total < best - config.min_delta:
            best, best_params, stale = val_total, params.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best_params, logs


def train_c2hm(config: TrainConfig, data: LabeledDataset, val: LabeledDataset | None = None,
               params: C2hmParams | None = None):
    """Train on the composite loss; returns the best-validation parameters and epoch logs.

    Without an explicit ``val`` set, the last ``val_fraction`` of ``data`` is held out.
    """
    if len(data) == 0:
        raise ContractError("empty dataset")
    train, val = (data, val) if val is not None else split_validation(data, config.val_fraction)
    params = params if params is not None else init_params(config.model, config.seed)
    opt = AdamState(lr=config.lr)
    recognition = params.names_of(RECOGNITION)

    def step(p, images, labels, rng):
        b = c2hm_batch_loss(p, images, labels, config.weights, rng, anchor=config.anchor_recognition)
        objective = b.parts.total_var
        bottleneck = kl_to_standard(b.outputs.z_dist)
        if config.bottleneck_beta > 0:
            objective = objective + ad.scale(bottleneck, config.bottleneck_beta)
        grads = b.bound.gradients(objective)
        extra = ad.backward(b.bound.tape, b.aux)
        for name in recognition:
            grads[name] = grads[name] + extra[b.bound.vars[name].id]
        adam_step(opt, p.named_tensors(), grads)
        return {**b.parts.as_row(), "aux": float(b.aux.value), "bottleneck": float(bottleneck.value)}

    def evaluate(p):
        return evaluate_c2hm(p, val, config.weights, seed=config.seed + 99).total

    return _run_epochs(config, train, val, params, step, evaluate)


# -- wake-sleep baseline ---------------------------------------------------------


def wake_phase(params: C2hmParams, images, labels, rng: SeededRng, opt: AdamState) -> float:
    """Fit the generative side (goal table, latent simulator, decoder) to recognition samples.

    The recognition networks enter as constants, so no gradient reaches them.
    Returns the reconstruction error of the batch before the update.
    """
    bp = Bound(params, trainable=params.names_of(GENERATIVE))
    x = bp.lift(images)
    z = ad.stop_gradient(sample_reparam(cycle_encode(bp, x), rng))
    rec = ad.mse(x, decode(bp, z))
    loss = rec
    if labels is not None:
        prior = simulate_latent(bp, embed_goal(bp, labels))
        loss = loss + ad.scale(gaussian_log_prob(prior, z), -1.0 / params.k)
    adam_step(opt, params.named_tensors(), bp.gradients(loss))
    return float(rec.value)


def dream(params: C2hmParams, rng: SeededRng, batch_size: int):
    """z ~ N(0, I) and the decoder's mean image for each z."""
    z = rng.standard_normal((batch_size, params.k))
    return z, decode(params, z).value


def sleep_phase(params: C2hmParams, rng: SeededRng, opt: AdamState, batch_size: int = 64) -> float:
    """Fit the recognition mean head to recover dreamed latents; generative side is frozen."""
    z, psi = dream(params, rng, batch_size)
    bp = Bound(params, trainable=params.names_of(["cyc_enc"]))
    err = ad.mse(cycle_encode(bp, psi).mean, bp.tape.constant(z))
    adam_step(opt, params.named_tensors(), bp.gradients(err))
    return float(err.value)


def evaluate_wakesleep(params: C2hmParams, data: LabeledDataset, seed: int) -> float:
    rng = SeededRng(seed)
    z = sample_reparam(cycle_encode(params, data.images), rng).value
    return float(np.mean((decode(params, z).value - data.images) ** 2))


def train_wakesleep(config: TrainConfig, data: LabeledDataset, val: LabeledDataset | None = None,
                    params: C2hmParams | None = None):
    """One wake step then one sleep step per batch; early stopping on wake reconstruction."""
    if len(data) == 0:
        raise ContractError("empty dataset")
    train, val = (data, val) if val is not None else split_validation(data, config.val_fraction)
    params = params if params is not None else init_params(config.model, config.seed)
    wake_opt, sleep_opt = AdamState(lr=config.lr), AdamState(lr=config.lr)

    def step(p, images, labels, rng):
        rec = wake_phase(p, images, labels, rng, wake_opt)
        sleep_err = sleep_phase(p, rng, sleep_opt, len(labels))
        return {"rec": rec, "sleep": sleep_err}

    def evaluate(p):
        return evaluate_wakesleep(p, val, seed=config.seed + 99)

    return _run_epochs(config, train, val, params, step, evaluate)
