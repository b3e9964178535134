"""Reconstruction error, cycle consistency, goal fidelity and latent compactness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var
from .data_io import LabeledDataset
from .distributions import entropy_arrays, kl_between_arrays
from .model import MlpParams, cycle_encode, decode, embed_goal, init_mlp, simulate_latent
from .rng import SeededRng
from .training import AdamState, adam_step, batches

METRICS_HEADER = "# schema: metrics-v1"
METRICS_COLUMNS = ["model", "seed", "re", "cc", "gf", "lc"]


class ProbeQualityError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    model: str
    seed: int
    re: float
    cc: float
    gf: float
    lc: float
    timestamp: str = ""

    def __post_init__(self):
        if not 0.0 <= self.gf <= 1.0 or self.re < 0 or self.cc < 0:
            raise ContractError(f"metric out of range: {self}")


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    buf.write("# units: re=per-pixel MSE, cc=nats, gf=fraction, lc=nats\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in records:
        w.writerow([r.model, r.seed] + [f"{v:.6g}" for v in (r.re, r.cc, r.gf, r.lc)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[MetricsRecord]:
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(rows)
    return [MetricsRecord(r["model"], int(r["seed"]), float(r["re"]), float(r["cc"]),
                          float(r["gf"]), float(r["lc"])) for r in reader]


def _require(dataset: LabeledDataset):
    if len(dataset) == 0:
        raise ContractError("metric needs a non-empty evaluation set")


def metric_re(params, dataset: LabeledDataset, rng: SeededRng) -> float:
    """Per-pixel MSE between x and a decoded sample of q(Z | phi = embed(label))."""
    _require(dataset)
    dist = simulate_latent(params, embed_goal(params, dataset.labels))
    z = dist.mean.value + np.exp(0.5 * dist.log_var.value) * rng.standard_normal(dist.mean.shape)
    return float(np.mean((decode(params, z).value - dataset.images) ** 2))


def metric_cc(params, dataset: LabeledDataset, rng: SeededRng | None = None) -> float:
    """Mean KL(q(Z|phi) || q(Z|psi)) over the set; content-to-context direction."""
    _require(dataset)
    a = simulate_latent(params, embed_goal(params, dataset.labels))
    b = cycle_encode(params, dataset.images)
    kl = kl_between_arrays(a.mean.value, a.log_var.value, b.mean.value, b.log_var.value)
    return float(np.mean(kl))


def metric_lc(params, num_classes: int | None = None) -> float:
    """Mean differential entropy (nats) of q(Z|phi) across the goal classes."""
    n = num_classes or params.num_classes
    dist = simulate_latent(params, embed_goal(params, np.arange(n)))
    return float(np.mean(entropy_arrays(dist.log_var.value)))


# -- probe classifier ------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels) -> Var:
    labels = np.asarray(labels, dtype=np.int64)
    p = softmax(logits.value)
    n = len(labels)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))

    def bw(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (float(g) * d / n,)

    return ad.custom(logits.tape, "softmax_xent", [logits], loss, bw)


@dataclass
class ProbeConfig:
    hidden: int = 128
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    min_accuracy: float = 0.92


@dataclass
class ProbeClassifier:
    net: MlpParams
    accuracy: float = field(default=0.0)

    def _forward(self, tape: Tape, x: np.ndarray, trainable: bool):
        h = tape.constant(x)
        leaves = []
        for layer in self.net.layers:
            w = tape.leaf(layer.weight) if trainable else tape.constant(layer.weight)
            b = tape.leaf(layer.bias) if trainable else tape.constant(layer.bias)
            leaves += [w, b]
            h = ad.add(ad.matmul(h, ad.transpose(w)), b)
            if layer.activation == "tanh":
                h = ad.tanh(h)
        return h, leaves

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(Tape(), np.atleast_2d(x), False)[0].value

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def score(self, data: LabeledDataset) -> float:
        return float(np.mean(self.predict(data.images) == data.labels))


def train_probe(real_train: LabeledDataset, real_test: LabeledDataset, config: ProbeConfig = ProbeConfig(),
                enforce_floor: bool = True) -> ProbeClassifier:
    """784 -> 128 -> 10 softmax classifier trained on real digits only."""
    rng = SeededRng(config.seed)
    D = real_train.images.shape[1]
    probe = ProbeClassifier(init_mlp(rng, [D, config.hidden, 10], "tanh", "identity"))
    opt = AdamState(lr=config.lr)
    for _ in range(config.epochs):
        for idx in batches(len(real_train), config.batch_size, rng):
            tape = Tape()
            logits, leaves = probe._forward(tape, real_train.images[idx], True)
            loss = softmax_cross_entropy(logits, real_train.labels[idx])
            grads = ad.backward(tape, loss)
            named = {}
            g = {}
            for i, layer in enumerate(probe.net.layers):
                named[f"{i}.w"], named[f"{i}.b"] = layer.weight, layer.bias
                g[f"{i}.w"], g[f"{i}.b"] = grads[leaves[2 * i].id], grads[leaves[2 * i + 1].id]
            adam_step(opt, named, g)
    probe.accuracy = probe.score(real_test)
    if enforce_floor and probe.accuracy < config.min_accuracy:
        raise ProbeQualityError(f"probe accuracy {probe.accuracy:.4f} below floor {config.min_accuracy}")
    return probe


def generate(params, labels, rng: SeededRng) -> np.ndarray:
    dist = simulate_latent(params, embed_goal(params, labels))
    z = dist.mean.value + np.exp(0.5 * dist.log_var.value) * rng.standard_normal(dist.mean.shape)
    return decode(params, z).value


def metric_gf(params, probe: ProbeClassifier, num_samples_per_class: int, rng: SeededRng,
              num_classes: int | None = None) -> float:
    """Fraction of goal-seeded samples that the probe assigns to their seeding class."""
    n = num_classes or params.num_classes
    labels = np.repeat(np.arange(n), num_samples_per_class)
    images = generate(params, labels, rng)
    return float(np.mean(probe.predict(images) == labels))


def evaluate_all(params, model: str, seed: int, test: LabeledDataset, probe: ProbeClassifier,
                 samples_per_class: int = 64) -> MetricsRecord:
    rng = SeededRng(seed).spawn(7)
    return MetricsRecord(
        model=model,
        seed=seed,
        re=metric_re(params, test, rng),
        cc=metric_cc(params, test),
        gf=metric_gf(params, probe, samples_per_class, rng),
        lc=metric_lc(params),
    )
