"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criterion 1 trains both models for 20 epochs on five seeds and dominates the
runtime of the whole suite (roughly half an hour on one core).
"""

import gzip
import time

import numpy as np
import pytest

from c2hm import cli
from c2hm.data_io import BUNDLED_DIR, BUNDLED_IMAGES, BUNDLED_LABELS, IMAGE_MAGIC, LABEL_MAGIC, parse_idx, write_idx
from c2hm.metrics import read_metrics_csv
from c2hm.model import load_checkpoint
from c2hm.verify import (
    check_bfs,
    check_gradients,
    check_kl_zero,
    contraction_checks,
    monte_carlo_checks,
    trained_model_checks,
)

SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture
def announce(capsys):
    def emit(n, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
        return passed
    return emit


def verdict_map(report):
    return {v.check: v for v in report.verdicts}


@pytest.fixture(scope="module")
def table(tmp_path_factory):
    out = tmp_path_factory.mktemp("table")
    runs = {}
    for seed in SEEDS:
        config = cli.build_config(seed=seed, out=str(out))
        runs[seed] = verdict_map(cli.cmd_train(config))
    records = read_metrics_csv((out / "metrics.csv").read_text())  # last seed only; verdicts hold the rest
    return out, runs, records


@pytest.fixture(scope="module")
def trained_model(table, mnist):
    out, _, _ = table
    return load_checkpoint(out / f"c2hm-seed{SEEDS[0]}.ckpt"), mnist[1]


def test_criterion_1_table_ordering(table, announce):
    _, runs, _ = table
    orders = ("train.order.re", "train.order.cc", "train.order.gf", "train.order.lc")
    bands = ("train.c2hm.re_band", "train.wakesleep.re_band")
    good = [s for s, v in runs.items() if all(v[k].passed for k in orders + bands)]
    minutes = max(v[k].value for v in runs.values() for k in ("train.c2hm.runtime_minutes",
                                                               "train.wakesleep.runtime_minutes"))
    detail = "; ".join(
        f"seed {s}: re {v['train.c2hm.re_band'].value:.4f}/{v['train.wakesleep.re_band'].value:.4f} "
        f"cc ratio {v['train.order.cc'].value:.3g} gf diff {v['train.order.gf'].value:.3f} "
        f"lc diff {v['train.order.lc'].value:.3f}" for s, v in runs.items())
    ok = len(good) >= 3 and minutes <= 30
    assert announce(1, ok, f"{len(good)}/5 seeds pass orderings and bands, slowest model {minutes:.1f} min ({detail})")


def test_criterion_2_curse(tmp_path, announce):
    report = cli.cmd_exp_curse(cli.build_config(out=str(tmp_path)))
    v = verdict_map(report)
    ok = report.passed
    assert announce(2, ok, f"bottom-up/inverted {v['curse.ratio'].value:.1f}x, noiseless "
                           f"{v['curse.noiseless'].value:.2e}, {v['curse.runtime_seconds'].value:.0f} s")


def test_criterion_3_delta(tmp_path, announce):
    report = cli.cmd_exp_delta(cli.build_config(out=str(tmp_path)))
    v = verdict_map(report)
    assert announce(3, report.passed, f"non-increasing {v['delta.non_increasing'].value:.3f}, final/initial "
                                      f"{v['delta.collapse'].value:.4f}, by beta {v['delta.monotone_in_beta'].detail}, "
                                      f"{v['delta.runtime_seconds'].value:.0f} s")


def test_criterion_4_contraction(trained_model, announce):
    params, test = trained_model
    affine = contraction_checks(0)
    model = trained_model_checks(params, test.images[:20])[0]
    ok = all(v.passed for v in affine) and model.passed
    gammas = ", ".join(f"{v.value:.4f}" for v in affine if "gamma" in v.check)
    assert announce(4, ok, f"gamma estimates {gammas}; envelopes "
                           f"{'hold' if all(v.passed for v in affine if 'envelope' in v.check) else 'violated'}; "
                           f"trained model {model.detail}, max {model.value:.0f} iterations")


def test_criterion_5_entropy_descent(trained_model, announce):
    params, test = trained_model
    v = trained_model_checks(params, test.images[:20])[1]
    assert announce(5, v.passed, f"non-increasing fraction {v.value:.4f} over 20 trained-model traces")


def test_criterion_6_numeric_oracles(announce):
    grad = check_gradients(0)
    mc = monte_carlo_checks(0)
    zero = check_kl_zero()
    ok = grad.passed and all(v.passed for v in mc) and zero.passed
    zs = ", ".join(f"{v.check.split('_', 1)[1]} {v.value:.2f}" for v in mc)
    assert announce(6, ok, f"worst gradient error {grad.value:.2e}; MC z-scores {zs}; KL(N(0,I)) = {zero.value}")


def test_criterion_7_planner(tmp_path, announce):
    t0 = time.perf_counter()
    config = cli.build_config(out=str(tmp_path / "s"))
    scenarios = verdict_map(cli.cmd_plan(config))
    random = verdict_map(cli.cmd_plan(cli.build_config(out=str(tmp_path / "r")), random_seed=0, count=20))
    bfs = check_bfs(0)
    seconds = time.perf_counter() - t0
    named = [scenarios["plan.short"], scenarios["plan.long"]]
    ok = all(v.passed for v in named) and random["plan.random_success"].passed and bfs.passed and seconds <= 120
    assert announce(7, ok, f"short ratio {named[0].value:.3f}, long ratio {named[1].value:.3f}, random "
                           f"{random['plan.random_success'].detail}, BFS mismatches {bfs.value:.0f}, {seconds:.0f} s")


def csvs(path):
    return {p.name: p.read_bytes() for p in sorted(path.glob("*.csv"))}


def test_criterion_8_reproducibility(tmp_path, announce):
    small_train = ["epochs=1", "hidden=64", "samples_per_class=8"]
    commands = {
        "train": ["train", "c2hm"] + small_train,
        "exp-curse": ["exp-curse"],
        "exp-delta": ["exp-delta"],
        "plan": ["plan"],
        "verify": ["verify", "verify_epochs=1", "n_train=2000", "n_test=500"],
    }
    same = {}
    for name, argv in commands.items():
        outs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            cli.main(argv + ["--out", str(out)])
            outs.append(csvs(out))
        same[name] = bool(outs[0]) and outs[0] == outs[1]

    idx_exact = True
    for fname, magic in ((BUNDLED_IMAGES, IMAGE_MAGIC), (BUNDLED_LABELS, LABEL_MAGIC)):
        raw = gzip.decompress((BUNDLED_DIR / fname).read_bytes())
        idx_exact &= write_idx(parse_idx(raw, magic)) == raw
    fixture = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    idx_exact &= np.array_equal(parse_idx(write_idx(fixture), IMAGE_MAGIC), fixture)

    ok = all(same.values()) and idx_exact
    assert announce(8, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
                    + f"; IDX round-trip {'bit-exact' if idx_exact else 'MISMATCH'}")
