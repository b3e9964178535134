"""c2hm-lab: train models, run the synthetic experiments, plan, and verify.

Configuration precedence, lowest first: built-in defaults, ``--config``
file, ``key=value`` overrides on the command line, then ``--seed``/``--out``.
Every command prints one PASS/FAIL line per verdict, writes its CSVs into
the output directory and exits 0 only if all verdicts pass.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .data_io import (
    MIRROR_ENV,
    MNIST_FILES,
    fetch_mnist,
    load_bundled_mnist,
    load_mnist_idx,
    make_gridworld,
    mnist_splits,
    parse_scenario,
)
from .metrics import ProbeQualityError
from .planner import NoPathError
from .verify import Verdict

SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"
# acceptance criterion each check family belongs to (0: none)
CRITERIA = {"train": 1, "curse": 2, "delta": 3, "contraction": 4, "entropy": 5, "numeric": 6, "plan": 7,
            "planner": 7}


def criterion_of(check: str) -> int:
    return CRITERIA.get(check.split(".", 1)[0], 0)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 7
    out: str = "runs"
    data_dir: str = ""  # empty: the bundled 10k subset
    # training
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lambda_cyc: float = 0.1
    lambda_z: float = 0.01
    bottleneck_beta: float = 1e-3
    d: int = 16
    k: int = 32
    hidden: int = 256
    n_train: int = 8000
    n_test: int = 2000
    probe_epochs: int = 10
    samples_per_class: int = 64
    # linear-Gaussian recovery
    curse_D: int = 100
    curse_d: int = 4
    curse_k: int = 8
    curse_N: int = 10000
    curse_sigma: float = 0.1
    curse_test: int = 1000
    curse_fit_iters: int = 1000
    curse_lr: float = 2e-2
    # delta convergence
    delta_iterations: int = 300
    delta_lr: float = 1e-2
    delta_sigma_obs: float = 0.05
    delta_betas: str = "0,0.1,1"
    # planner
    plan_density: float = 0.25
    plan_waypoints: int = 8
    plan_restarts: int = 4
    plan_repair_radius: int = 3
    # verify
    verify_epochs: int = 3
    verify_contexts: int = 10


def _convert(name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if name not in fields:
        raise ConfigError(f"unknown config key {name!r}")
    kind = type(fields[name].default)
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _convert(key, value)
    return out


def build_config(config_path=None, overrides=(), seed=None, out=None) -> RunConfig:
    values = {}
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = _convert(key.strip(), value.strip())
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out
    return RunConfig(**values)


# -- shared output helpers -----------------------------------------------------------


def write_csv(path: Path, schema: str, columns: list[str], rows: list[list]) -> Path:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())
    return path


@dataclass
class ExperimentReport:
    experiment: str
    verdicts: list[Verdict] = field(default_factory=list)
    artifacts: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def write(self, out: Path) -> Path:
        rows = [[criterion_of(v.check), v.check, int(v.passed), "-" if v.volatile else float(v.value), v.threshold]
                for v in self.verdicts]
        path = write_csv(out / f"{self.experiment}-report.csv", "report-v1",
                         ["criterion", "check", "passed", "value", "threshold"], rows)
        self.artifacts.append(path)
        return path

    def print(self, stream=None):
        stream = stream or sys.stdout
        for v in self.verdicts:
            print(v.line(), file=stream)
        for p in self.artifacts:
            print(f"wrote {p}", file=stream)


def _outdir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_mnist(config: RunConfig):
    if not config.data_dir:
        data = load_bundled_mnist()
    else:
        root = Path(config.data_dir)
        official = [root / f"{name}.gz" for name in MNIST_FILES if name.startswith("train")]
        if all(p.exists() for p in official):
            images, labels = sorted(official)
            data = load_mnist_idx(images, labels)
        else:
            data = load_bundled_mnist(root)
    return mnist_splits(data, config.n_train, config.n_test)


# -- commands --------------------------------------------------------------------


def cmd_train(config: RunConfig, models=("c2hm", "wakesleep")) -> ExperimentReport:
    from .metrics import MetricsRecord, ProbeConfig, evaluate_all, metrics_csv, train_probe
    from .model import ModelConfig, save_checkpoint
    from .objectives import LossWeights
    from .training import TrainConfig, train_c2hm, train_wakesleep

    out = _outdir(config)
    train, test = load_mnist(config)
    tc = TrainConfig(
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr, seed=config.seed,
        bottleneck_beta=config.bottleneck_beta,
        weights=LossWeights(lambda_cyc=config.lambda_cyc, lambda_z=config.lambda_z),
        model=ModelConfig(d=config.d, k=config.k, hidden=config.hidden),
    )
    probe = train_probe(train, test, ProbeConfig(epochs=config.probe_epochs))
    report = ExperimentReport("train")
    records: dict[str, MetricsRecord] = {}
    for name in models:
        t0 = time.perf_counter()
        params, _ = (train_c2hm if name == "c2hm" else train_wakesleep)(tc, train)
        minutes = (time.perf_counter() - t0) / 60
        report.artifacts.append(save_checkpoint(params, out / f"{name}-seed{config.seed}.ckpt"))
        records[name] = evaluate_all(params, name, config.seed, test, probe, config.samples_per_class)
        report.verdicts.append(Verdict(f"train.{name}.runtime_minutes", minutes <= 30, minutes, "<= 30",
                                       volatile=True))
        band = (0.03, 0.08) if name == "c2hm" else (0.04, 0.09)
        re = records[name].re
        report.verdicts.append(Verdict(f"train.{name}.re_band", band[0] <= re <= band[1], re,
                                       f"in [{band[0]}, {band[1]}]"))
    path = out / "metrics.csv"
    path.write_text(metrics_csv(list(records.values())))
    report.artifacts.append(path)
    if len(records) == 2:
        a, b = records["c2hm"], records["wakesleep"]
        report.verdicts += [
            Verdict("train.order.re", a.re < b.re, a.re / b.re, "ratio < 1"),
            Verdict("train.order.cc", a.cc <= 0.1 * b.cc, a.cc / b.cc, "ratio <= 0.1"),
            Verdict("train.order.gf", a.gf > b.gf, a.gf - b.gf, "difference > 0"),
            Verdict("train.order.lc", a.lc < b.lc, a.lc - b.lc, "difference < 0"),
        ]
    return report


def cmd_exp_curse(config: RunConfig) -> ExperimentReport:
    from .experiments import CurseConfig, curse_experiment

    out = _outdir(config)
    base = CurseConfig(D=config.curse_D, d=config.curse_d, k=config.curse_k, N=config.curse_N,
                       sigma=config.curse_sigma, test=config.curse_test, fit_iters=config.curse_fit_iters,
                       lr=config.curse_lr)
    runs = {"default": curse_experiment(base, config.seed),
            "noiseless": curse_experiment(dataclasses.replace(base, sigma=0.0), config.seed)}
    rows = [[name, cfg_sigma, r.mse_bottom_up, r.mse_linear, r.mse_inverted, r.mse_oracle,
             r.inverted_vs_oracle, r.k, r.iterations, int(r.converged)]
            for (name, r), cfg_sigma in zip(runs.items(), (base.sigma, 0.0))]
    report = ExperimentReport("curse")
    report.artifacts.append(write_csv(
        out / "curse.csv", "curse-v1",
        ["variant", "sigma", "mse_bottom_up", "mse_linear", "mse_inverted", "mse_oracle",
         "inverted_vs_oracle", "k", "iterations", "converged"], rows))
    d, z = runs["default"], runs["noiseless"]
    report.verdicts += [
        Verdict("curse.ratio", d.mse_inverted <= 0.1 * d.mse_bottom_up, d.ratio, ">= 10",
                f"bottom-up {d.mse_bottom_up:.4g}, inverted {d.mse_inverted:.4g}"),
        Verdict("curse.noiseless", z.inverted_vs_oracle < 1e-4, z.inverted_vs_oracle, "< 1e-4 vs least squares"),
        Verdict("curse.runtime_seconds", d.seconds + z.seconds <= 120, d.seconds + z.seconds, "<= 120",
                volatile=True),
    ]
    return report


def cmd_exp_delta(config: RunConfig) -> ExperimentReport:
    from .inference import DeltaConfig, collapse_ratio, delta_convergence_run, non_increasing_fraction
    from .rng import SeededRng
    from .svg import line_plot

    out = _outdir(config)
    betas = [float(b) for b in config.delta_betas.split(",")]
    t0 = time.perf_counter()
    report = ExperimentReport("delta")
    rows, series = [], {}
    fractions, ratios = {}, {}
    for beta in betas:
        dc = DeltaConfig(beta=beta, iterations=config.delta_iterations, lr=config.delta_lr,
                         sigma_obs=config.delta_sigma_obs)
        trace = delta_convergence_run(dc, SeededRng(config.seed))
        var = trace.column("latent_var_mean")
        fractions[beta] = non_increasing_fraction(var)
        ratios[beta] = collapse_ratio(trace)
        series[f"beta={beta:g}"] = var
        rows.append([beta, float(var[0]), float(var[-1]), ratios[beta], fractions[beta]])
        path = out / f"delta-trace-beta{beta:g}.csv"
        path.write_text(trace.to_csv())
        report.artifacts.append(path)
    seconds = time.perf_counter() - t0
    report.artifacts.append(write_csv(out / "delta.csv", "delta-v1",
                                      ["beta", "initial_var", "final_var", "ratio", "non_increasing"], rows))
    svg = out / "delta.svg"
    svg.write_text(line_plot(series, "Latent variance under the bottleneck objective", "iteration",
                             "mean latent variance", log_y=True))
    report.artifacts.append(svg)
    main = max(betas)
    ordered = [ratios[b] for b in sorted(betas)]
    monotone = all(np.diff(ordered) >= 0) or all(np.diff(ordered) <= 0)
    report.verdicts += [
        Verdict("delta.non_increasing", fractions[main] >= 0.95, fractions[main], ">= 0.95 after 10 burn-in steps",
                f"beta={main:g}"),
        Verdict("delta.collapse", ratios[main] < 0.05, ratios[main], "final/initial < 0.05", f"beta={main:g}"),
        Verdict("delta.monotone_in_beta", bool(monotone), float(ordered[-1] - ordered[0]), "monotone over betas",
                " ".join(f"{b:g}:{ratios[b]:.4g}" for b in sorted(betas))),
        Verdict("delta.runtime_seconds", seconds <= 120, seconds, "<= 120", volatile=True),
    ]
    return report


def cmd_plan(config: RunConfig, scenarios=(), random_seed=None, count: int = 1) -> ExperimentReport:
    from .planner import PlannerConfig, bfs_shortest_path, plan_half_cycle
    from .svg import grid_overlay

    out = _outdir(config)
    pc = PlannerConfig(m_waypoints=config.plan_waypoints, restarts=config.plan_restarts,
                       repair_radius=config.plan_repair_radius)
    maps = []
    if random_seed is not None:
        maps += [(f"random{s}", make_gridworld(s, config.plan_density)) for s in range(random_seed, random_seed + count)]
    for path in scenarios or ([] if random_seed is not None else sorted(SCENARIO_DIR.glob("*.map"))):
        maps.append((Path(path).stem, parse_scenario(Path(path).read_text())))
    report = ExperimentReport("plan")
    rows, wins = [], 0
    t0 = time.perf_counter()
    for name, grid in maps:
        oracle_len, oracle_path, bfs_expanded = bfs_shortest_path(grid)
        res = plan_half_cycle(grid, pc, seed=config.seed)
        ok = res.collision_free and res.length <= 1.5 * oracle_len
        wins += ok
        rows.append([name, int(res.collision_free), res.length, oracle_len, float(res.ratio), res.expansions,
                     bfs_expanded])
        svg = out / f"plan-{name}.svg"
        svg.write_text(grid_overlay(grid.occupancy, {"bfs": oracle_path, "planned": res.path}, grid.start,
                                    grid.goal, f"{name}: planned {res.length} vs optimum {oracle_len}"))
        report.artifacts.append(svg)
        if random_seed is None or count == 1:
            report.verdicts.append(Verdict(f"plan.{name}", ok, float(res.ratio),
                                           "collision-free and length ratio <= 1.5"))
    seconds = time.perf_counter() - t0
    report.artifacts.insert(0, write_csv(
        out / "plan.csv", "plan-v1",
        ["map", "collision_free", "length", "oracle_length", "ratio", "expansions", "bfs_expanded"], rows))
    if random_seed is not None and count > 1:
        rate = wins / count
        report.verdicts.append(Verdict("plan.random_success", rate >= 0.9, rate, ">= 0.9",
                                       f"{wins}/{count} maps at density {config.plan_density:g}"))
    report.verdicts.append(Verdict("plan.runtime_seconds", seconds <= 120, seconds, "<= 120", volatile=True))
    return report


def cmd_verify(config: RunConfig) -> ExperimentReport:
    from .training import TrainConfig, train_c2hm
    from .verify import run_suite

    out = _outdir(config)
    train, test = load_mnist(config)
    params, _ = train_c2hm(TrainConfig(epochs=config.verify_epochs, seed=config.seed), train)
    report = ExperimentReport("verify", run_suite(0, (params, test), config.verify_contexts))
    return report


def cmd_fetch_mnist(config: RunConfig, mirror=None) -> ExperimentReport:
    dest = Path(config.data_dir or config.out)
    written = fetch_mnist(dest, mirror)
    return ExperimentReport("fetch-mnist", [Verdict("fetch.files", len(written) == 4, float(len(written)), "== 4")],
                            written)


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("overrides", nargs="*", metavar="key=value")

    parser = argparse.ArgumentParser(prog="c2hm-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and evaluate on MNIST; "
                   "an optional first word c2hm or wakesleep trains one model")
    sub.add_parser("exp-curse", parents=[common], help="direct regression vs inverted inference")
    sub.add_parser("exp-delta", parents=[common], help="latent collapse under the bottleneck objective")
    p = sub.add_parser("plan", parents=[common], help="plan on bundled or random grid worlds")
    p.add_argument("--scenario", action="append", default=[], help="scenario .map file (repeatable)")
    p.add_argument("--random", type=int, metavar="SEED", help="first random map seed")
    p.add_argument("--count", type=int, default=1, help="number of random maps")
    sub.add_parser("verify", parents=[common], help="run the property suite")
    p = sub.add_parser("fetch-mnist", parents=[common], help=f"download MNIST (mirror from --mirror or {MIRROR_ENV})")
    p.add_argument("--mirror")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    # overrides may follow options, which argparse leaves in the unknown list
    args, extra = parser.parse_known_args(argv)
    stray = [x for x in extra if x.startswith("-")]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    overrides = list(args.overrides) + extra
    models = ("c2hm", "wakesleep")
    if args.command == "train" and overrides and overrides[0] in models:
        models = (overrides.pop(0),)
    try:
        config = build_config(args.config, overrides, args.seed, args.out)
        report = _dispatch(args, config, models)
    except (ConfigError, ContractError, FileNotFoundError, NoPathError, ProbeQualityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report.write(_outdir(config))
    report.print()
    return 0 if report.passed else 1


def _dispatch(args, config: RunConfig, models) -> ExperimentReport:
    if args.command == "train":
        report = cmd_train(config, models)
    elif args.command == "exp-curse":
        report = cmd_exp_curse(config)
    elif args.command == "exp-delta":
        report = cmd_exp_delta(config)
    elif args.command == "plan":
        report = cmd_plan(config, args.scenario, args.random, args.count)
    elif args.command == "verify":
        report = cmd_verify(config)
    else:
        report = cmd_fetch_mnist(config, args.mirror)
    return report


if __name__ == "__main__":
    sys.exit(main())
