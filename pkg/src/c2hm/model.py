"""The five networks and the inverted cycle phi -> z -> psi_hat -> z2 -> phi_hat.

Parameters live in plain numpy arrays (``C2hmParams``). A forward pass binds
them to a tape through ``Bound``, which decides which tensors are trainable
leaves and which are frozen constants.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var
from .distributions import DiagonalGaussian, sample_reparam
from .rng import SeededRng

ACTIVATIONS = {"sigmoid": ad.sigmoid, "tanh": ad.tanh, "identity": lambda v: v}
NETWORKS = ("sim", "dec", "cyc_enc", "cyc_dec")
GENERATIVE = ("goal_embed", "sim", "dec")
RECOGNITION = ("cyc_enc", "cyc_dec")
CHECKPOINT_MAGIC = "C2HM-CKPT v1"


@dataclass
class ModelConfig:
    d: int = 16
    k: int = 32
    D: int = 784
    num_classes: int = 10
    hidden: int = 256
    depth: int = 2
    activation: str = "tanh"
    sim_log_var_init: float = -4.0

    def __post_init__(self):
        if not (self.d <= self.k <= self.D):
            raise ContractError(f"dims must satisfy d <= k <= D, got d={self.d} k={self.k} D={self.D}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ContractError(f"layer chain broken: {a.weight.shape} -> {b.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]


def glorot(rng: SeededRng, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * a


def init_mlp(rng: SeededRng, sizes: list[int], hidden_act: str, out_act: str) -> MlpParams:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        act = out_act if i == len(sizes) - 2 else hidden_act
        layers.append(Layer(glorot(rng, n_out, n_in), np.zeros(n_out), act))
    return MlpParams(layers)


@dataclass
class C2hmParams:
    goal_embed: np.ndarray
    sim: MlpParams
    dec: MlpParams
    cyc_enc: MlpParams
    cyc_dec: MlpParams
    d: int
    k: int
    D: int

    @property
    def num_classes(self) -> int:
        return self.goal_embed.shape[0]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"goal_embed": self.goal_embed}
        for net in NETWORKS:
            for i, layer in enumerate(getattr(self, net).layers):
                out[f"{net}.{i}.weight"] = layer.weight
                out[f"{net}.{i}.bias"] = layer.bias
        return out

    def names_of(self, groups: Iterable[str]) -> list[str]:
        groups = tuple(groups)
        return [n for n in self.named_tensors() if n.split(".")[0] in groups]

    def copy(self) -> "C2hmParams":
        return copy.deepcopy(self)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.named_tensors().values())


def init_params(config: ModelConfig, seed: int) -> C2hmParams:
    rng = SeededRng(seed)
    h = [config.hidden] * config.depth
    act = config.activation
    embed = rng.standard_normal((config.num_classes, config.d))
    params = C2hmParams(
        goal_embed=embed,
        sim=init_mlp(rng, [config.d, *h, 2 * config.k], act, "identity"),
        dec=init_mlp(rng, [config.k, *h, config.D], act, "sigmoid"),
        cyc_enc=init_mlp(rng, [config.D, *h, 2 * config.k], act, "identity"),
        cyc_dec=init_mlp(rng, [config.k, *h, config.d], act, "identity"),
        d=config.d,
        k=config.k,
        D=config.D,
    )
    params.sim.layers[-1].bias[config.k:] = config.sim_log_var_init
    return params


class Bound:
    """Parameters attached to one tape.

    Tensors named in ``trainable`` (default: all) become leaves; the rest are
    constants and receive no gradient.
    """

    def __init__(self, params: C2hmParams, tape: Tape | None = None, trainable: Iterable[str] | None = None):
        self.params = params
        self.tape = tape if tape is not None else Tape()
        names = params.named_tensors()
        keep = set(names) if trainable is None else set(trainable)
        self.vars: dict[str, Var] = {}
        for name, arr in names.items():
            self.vars[name] = self.tape.leaf(arr) if name in keep else self.tape.constant(arr)
        self.trainable = [n for n in names if n in keep]

    def gradients(self, loss: Var) -> dict[str, np.ndarray]:
        grads = ad.backward(self.tape, loss)
        return {n: grads[self.vars[n].id] for n in self.trainable}

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            return x
        x = np.asarray(x, dtype=np.float64)
        return self.tape.constant(x if x.ndim == 2 else x[None, :])


def _bound(p, x=None) -> Bound:
    if isinstance(p, Bound):
        return p
    # raw parameters are frozen constants, on the input's tape when it has one
    return Bound(p, tape=x.tape if isinstance(x, Var) else None, trainable=())


def _check_dim(op: str, x: Var, want: int):
    if x.shape[-1] != want:
        raise ContractError(f"{op}: expected last dimension {want}, got shape {x.shape}")


def mlp_forward(bp: Bound, net: str, x: Var) -> Var:
    for i, layer in enumerate(getattr(bp.params, net).layers):
        w = bp.vars[f"{net}.{i}.weight"]
        b = bp.vars[f"{net}.{i}.bias"]
        x = ACTIVATIONS[layer.activation](ad.add(ad.matmul(x, ad.transpose(w)), b))
    return x


def _gaussian_head(out: Var, k: int) -> DiagonalGaussian:
    return DiagonalGaussian(ad.columns(out, 0, k), ad.columns(out, k, 2 * k))


def embed_goal(p, labels) -> Var:
    bp = _bound(p)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = bp.params.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ContractError(f"embed_goal: label out of range [0, {n})")
    return ad.rows(bp.vars["goal_embed"], labels)


def simulate_latent(p, phi) -> DiagonalGaussian:
    bp = _bound(p, phi)
    phi = bp.lift(phi)
    _check_dim("simulate_latent", phi, bp.params.d)
    return _gaussian_head(mlp_forward(bp, "sim", phi), bp.params.k)


def decode(p, z) -> Var:
    bp = _bound(p, z)
    z = bp.lift(z)
    _check_dim("decode", z, bp.params.k)
    return mlp_forward(bp, "dec", z)


def cycle_encode(p, psi) -> DiagonalGaussian:
    bp = _bound(p, psi)
    psi = bp.lift(psi)
    _check_dim("cycle_encode", psi, bp.params.D)
    return _gaussian_head(mlp_forward(bp, "cyc_enc", psi), bp.params.k)


def cycle_decode(p, z2) -> Var:
    bp = _bound(p, z2)
    z2 = bp.lift(z2)
    _check_dim("cycle_decode", z2, bp.params.k)
    return mlp_forward(bp, "cyc_dec", z2)


@dataclass
class CycleOutputs:
    phi: Var
    z_dist: DiagonalGaussian
    z: Var
    psi_hat: Var
    z2_dist: DiagonalGaussian
    z2: Var
    phi_hat: Var
    psi_loop: Var | None = field(default=None)


def full_cycle(p, phi, rng: SeededRng, loop: bool = True) -> CycleOutputs:
    """Run phi -> z -> psi_hat -> z2 -> phi_hat on one tape.

    With ``loop`` the second latent is also re-decoded (``psi_loop``), which
    the cycle-consistency loss needs.
    """
    bp = _bound(p, phi)
    phi = bp.lift(phi)
    z_dist = simulate_latent(bp, phi)
    z = sample_reparam(z_dist, rng)
    psi_hat = decode(bp, z)
    z2_dist = cycle_encode(bp, psi_hat)
    z2 = sample_reparam(z2_dist, rng)
    phi_hat = cycle_decode(bp, z2)
    psi_loop = decode(bp, z2) if loop else None
    return CycleOutputs(phi, z_dist, z, psi_hat, z2_dist, z2, phi_hat, psi_loop)


# -- checkpoint format -------------------------------------------------------


def _fmt(row: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in row)


def serialize(params: C2hmParams) -> str:
    lines = [CHECKPOINT_MAGIC, f"{params.d} {params.k} {params.D} {params.num_classes}"]
    lines.append("goal_embed 1")
    lines.append(f"{params.goal_embed.shape[0]} {params.goal_embed.shape[1]} embedding")
    lines.extend(_fmt(r) for r in params.goal_embed)
    for net in NETWORKS:
        mlp = getattr(params, net)
        lines.append(f"{net} {len(mlp.layers)}")
        for layer in mlp.layers:
            rows, cols = layer.weight.shape
            lines.append(f"{rows} {cols} {layer.activation}")
            lines.extend(_fmt(r) for r in layer.weight)
            lines.append(_fmt(layer.bias))
    return "\n".join(lines) + "\n"


class CheckpointError(ValueError):
    pass


def parse(text: str) -> C2hmParams:
    lines = iter(text.splitlines())

    def nxt() -> str:
        try:
            return next(lines)
        except StopIteration:
            raise CheckpointError("checkpoint truncated") from None

    def floats(expected: int) -> np.ndarray:
        row = np.array([float(t) for t in nxt().split()])
        if row.size != expected:
            raise CheckpointError(f"expected {expected} values, found {row.size}")
        return row

    if nxt().strip() != CHECKPOINT_MAGIC:
        raise CheckpointError("missing checkpoint header")
    d, k, D, ncls = (int(t) for t in nxt().split())
    name, count = nxt().split()
    if name != "goal_embed" or count != "1":
        raise CheckpointError(f"expected goal_embed section, found {name!r}")
    r, c, tag = nxt().split()
    embed = np.stack([floats(int(c)) for _ in range(int(r))])
    if embed.shape != (ncls, d) or tag != "embedding":
        raise CheckpointError("goal_embed shape does not match header")
    nets = {}
    for expected in NETWORKS:
        name, count = nxt().split()
        if name != expected:
            raise CheckpointError(f"expected section {expected!r}, found {name!r}")
        layers = []
        for _ in range(int(count)):
            r, c, act = nxt().split()
            if act not in ACTIVATIONS:
                raise CheckpointError(f"unknown activation {act!r}")
            w = np.stack([floats(int(c)) for _ in range(int(r))])
            layers.append(Layer(w, floats(int(r)), act))
        nets[name] = MlpParams(layers)
    return C2hmParams(goal_embed=embed, d=d, k=k, D=D, **nets)


def save_checkpoint(params: C2hmParams, path) -> Path:
    path = Path(path)
    path.write_text(serialize(params))
    return path


def load_checkpoint(path) -> C2hmParams:
    return parse(Path(path).read_text())
