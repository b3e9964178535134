"""Iterative refinement of the content code phi against an observed context.

Two step rules are provided. The gradient rule takes one descent step on
``||psi_obs - decode(mean q(Z|phi))||^2`` (with optional backtracking); the
amortized rule pushes the prediction through the cycle encoder and decoder.
``run_to_fixed_point`` iterates either rule, or any callable, and records a
trace for contraction and entropy-descent checks.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data_io import make_delta_dataset
from .distributions import kl_to_standard
from .model import Bound, C2hmParams, ModelConfig, cycle_decode, cycle_encode, decode, init_params, simulate_latent
from .objectives import SIGMA_OBS, context_entropy_proxy, vb_loss
from .rng import SeededRng

DIVERGENCE_LIMIT = 1e6
TRACE_COLUMNS = ["iter", "step_norm", "entropy_proxy", "vb_value", "latent_var_mean"]


class DivergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class TraceRecord:
    phi: np.ndarray
    step_norm: float
    entropy_proxy: float = math.nan
    vb_value: float = math.nan
    latent_var_mean: float = math.nan


@dataclass
class InferenceTrace:
    iterations: list[TraceRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.iterations)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.iterations])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# schema: trace-v1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i, r in enumerate(self.iterations):
            w.writerow([i] + [f"{v:.10g}" for v in (r.step_norm, r.entropy_proxy, r.vb_value, r.latent_var_mean)])
        return buf.getvalue()


@dataclass
class FixedPointReport:
    converged: bool
    iterations_used: int
    final_phi: np.ndarray
    estimated_gamma: float


def prediction_error(params, phi, psi_obs) -> float:
    psi_hat = decode(params, simulate_latent(params, phi).mean).value
    return float(np.sum((np.atleast_2d(psi_obs) - psi_hat) ** 2))


def _error_and_grad(params: C2hmParams, phi: np.ndarray, psi_obs: np.ndarray):
    bp = Bound(params, trainable=())
    phi_v = bp.tape.leaf(np.atleast_2d(phi))
    psi_hat = decode(bp, simulate_latent(bp, phi_v).mean)
    err = ad.sum(ad.square(bp.lift(psi_obs) - psi_hat))
    grad = ad.backward(bp.tape, err)[phi_v.id]
    return float(err.value), grad.reshape(np.shape(phi))


def half_cycle_step(params: C2hmParams, phi_t, psi_obs, eta: float, rng=None, backtrack: int = 0) -> np.ndarray:
    """phi - eta * grad ||psi_obs - psi_hat(phi)||^2 through the mean latent.

    With ``backtrack > 0`` the step is halved up to that many times until the
    error does not increase; if no trial is accepted phi is returned unchanged.
    ``rng`` is accepted for interface symmetry; the step is deterministic.
    """
    if eta < 0:
        raise ContractError("eta must be non-negative")
    phi_t = np.asarray(phi_t, dtype=np.float64)
    psi_obs = np.atleast_2d(psi_obs) if np.ndim(phi_t) == 2 else np.asarray(psi_obs, dtype=np.float64)
    if np.shape(psi_obs)[-1] != params.D:
        raise ContractError(f"psi_obs must have dimension {params.D}")
    def f(phi, with_grad=True):
        return _error_and_grad(params, phi, psi_obs) if with_grad else (prediction_error(params, phi, psi_obs), None)

    return descent_step(f, phi_t, eta, backtrack)


def descent_step(value_and_grad, phi_t, eta: float, backtrack: int = 0, max_step: float | None = None) -> np.ndarray:
    """One gradient step with optional step halving; shared by the planner.

    ``value_and_grad(phi, with_grad=True)`` returns ``(value, gradient)``.
    With ``max_step`` the step is scaled down so no coordinate moves further.
    """
    phi_t = np.asarray(phi_t, dtype=np.float64)
    err, grad = value_and_grad(phi_t)
    if eta == 0 or not np.any(grad):
        return phi_t.copy()
    step = eta
    if max_step is not None:
        step = min(step, max_step / float(np.max(np.abs(grad))))
    for _ in range(backtrack + 1):
        cand = phi_t - step * grad
        if backtrack == 0 or value_and_grad(cand, with_grad=False)[0] <= err:
            return cand
        step *= 0.5
    return phi_t.copy()


def amortized_cycle_step(params: C2hmParams, phi_t, psi_obs, rng=None, anchor: float = 0.5) -> np.ndarray:
    """cycle_decode(mean cycle_encode(psi_a)), psi_a = (1-anchor) psi_hat(phi_t) + anchor psi_obs."""
    if not 0.0 <= anchor <= 1.0:
        raise ContractError("anchor must lie in [0, 1]")
    phi_t = np.asarray(phi_t, dtype=np.float64)
    psi_hat = decode(params, simulate_latent(params, np.atleast_2d(phi_t)).mean).value
    psi_a = (1.0 - anchor) * psi_hat + anchor * np.atleast_2d(psi_obs)
    out = cycle_decode(params, cycle_encode(params, psi_a).mean).value
    return out.reshape(phi_t.shape)


def _observe(params, phi, psi_obs, beta: float = 1.0):
    """(entropy proxy, vb value, mean latent variance) at phi, all deterministic."""
    bp = Bound(params, trainable=())
    dist = simulate_latent(bp, np.atleast_2d(phi))
    psi_hat = decode(bp, dist.mean).value
    h = context_entropy_proxy(psi_obs, psi_hat)
    vb = h + beta * float(kl_to_standard(dist).value)
    return h, vb, float(np.mean(dist.variance))


def run_to_fixed_point(params, phi_0, psi_obs, step_kind="gradient", tol: float = 1e-5,
                       max_iter: int = 500, eta: float = 0.01, backtrack: int = 20,
                       anchor: float = 0.5, tail: int = 10):
    """Iterate a refinement rule until the step norm drops below ``tol``.

    ``step_kind`` is "gradient", "amortized", or a callable ``phi -> phi``.
    Returns ``(FixedPointReport, InferenceTrace)``. Record ``t`` holds the
    iterate after step ``t`` and the norm of that step.
    """
    if tol <= 0 or max_iter < 1:
        raise ContractError("need tol > 0 and max_iter >= 1")
    if callable(step_kind):
        step: Callable = step_kind
    elif step_kind == "gradient":
        step = lambda phi: half_cycle_step(params, phi, psi_obs, eta, backtrack=backtrack)  # noqa: E731
    elif step_kind == "amortized":
        step = lambda phi: amortized_cycle_step(params, phi, psi_obs, anchor=anchor)  # noqa: E731
    else:
        raise ContractError(f"unknown step kind {step_kind!r}")

    trace = InferenceTrace()
    phi = np.asarray(phi_0, dtype=np.float64).copy()
    converged = False
    for _ in range(max_iter):
        nxt = step(phi)
        norm = float(np.linalg.norm(nxt - phi))
        rec = TraceRecord(nxt.copy(), norm)
        if params is not None and psi_obs is not None:
            rec.entropy_proxy, rec.vb_value, rec.latent_var_mean = _observe(params, nxt, psi_obs)
        trace.iterations.append(rec)
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            raise DivergenceError(f"step norm {norm:.3g} exceeds {DIVERGENCE_LIMIT:g}", trace)
        phi = nxt
        if norm < tol:
            converged = True
            break
    return FixedPointReport(converged, len(trace), phi, estimate_gamma(trace, tail)), trace


def estimate_gamma(trace: InferenceTrace, tail: int = 10) -> float:
    """Max ratio of consecutive step norms over the last ``tail`` iterations."""
    norms = trace.column("step_norm")
    if len(norms) < 2:
        return math.nan
    window = norms[-(tail + 1):]
    prev, cur = window[:-1], window[1:]
    ok = prev > 0
    if not np.any(ok):
        return 0.0
    return float(np.max(cur[ok] / prev[ok]))


def entropy_descent_check(trace: InferenceTrace, slack: float = 1e-9) -> float:
    """Fraction of consecutive pairs whose entropy proxy does not increase."""
    h = trace.column("entropy_proxy")
    if len(h) < 2:
        raise ContractError("entropy_descent_check needs at least two iterations")
    return float(np.mean(h[1:] <= h[:-1] + slack))


def affine_operator(gamma: float, c, rotation: np.ndarray | None = None):
    """F(phi) = gamma * R phi + c with R orthogonal; Lipschitz constant exactly gamma."""
    c = np.asarray(c, dtype=np.float64)
    R = np.eye(len(c)) if rotation is None else rotation
    fixed = np.linalg.solve(np.eye(len(c)) - gamma * R, c)
    return (lambda phi: gamma * (R @ phi) + c), fixed


# -- delta convergence under a variational bottleneck ----------------------------


@dataclass
class DeltaConfig:
    beta: float = 1.0
    iterations: int = 300
    lr: float = 1e-2
    hidden: int = 32
    sigma_obs: float = 0.05  # matches the dataset noise
    data_seed: int = 0
    log_var_init: float = 0.0


def delta_model(config: DeltaConfig, seed: int) -> C2hmParams:
    """d=2, k=2, D=20 with a linear-output decoder and unit initial latent variance."""
    mc = ModelConfig(d=2, k=2, D=20, num_classes=1, hidden=config.hidden, depth=1,
                     sim_log_var_init=config.log_var_init)
    params = init_params(mc, seed)
    params.dec.layers[-1].activation = "identity"
    return params


def delta_convergence_run(config: DeltaConfig, rng: SeededRng) -> InferenceTrace:
    """Full-batch Adam on the bottleneck objective for the phi-conditioned simulator and decoder.

    Phi is held at the generating codes. Each record stores the parameter step
    norm and the mean per-dimension variance of q(Z|phi) after that step.
    """
    from .training import AdamState, adam_step

    data = make_delta_dataset(seed=config.data_seed)
    params = delta_model(config, int(rng.integers(0, 2**31 - 1)))
    names = params.names_of(("sim", "dec"))
    opt = AdamState(lr=config.lr)
    trace = InferenceTrace()
    phi = data.phi_true
    for _ in range(config.iterations):
        bp = Bound(params, trainable=names)
        total, nll, kl, dist = vb_loss(bp, phi, data.psi, config.beta, rng, config.sigma_obs, return_parts=True)
        grads = bp.gradients(total)
        before = {n: params.named_tensors()[n].copy() for n in names}
        adam_step(opt, params.named_tensors(), grads)
        after = params.named_tensors()
        norm = float(np.sqrt(sum(np.sum((after[n] - before[n]) ** 2) for n in names)))
        h, vb, var = _observe(params, phi, data.psi, config.beta)
        trace.iterations.append(TraceRecord(phi.mean(axis=0), norm, h, vb, var))
    return trace


def collapse_ratio(trace: InferenceTrace, initial: float = None) -> float:
    var = trace.column("latent_var_mean")
    return float(var[-1] / (initial if initial is not None else var[0]))


def non_increasing_fraction(values, burn_in: int = 10, slack: float = 1e-12) -> float:
    v = np.asarray(values)[burn_in:]
    if len(v) < 2:
        raise ContractError("need at least two values after burn-in")
    return float(np.mean(v[1:] <= v[:-1] + slack))
