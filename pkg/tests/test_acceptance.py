"""Acceptance gates: one PASS/FAIL line per criterion, printed past pytest's capture.

Run alone with ``pytest tests/test_acceptance.py -v``. The paper-scale gate runs
only when ``SNN_NCARS_ROOT`` points at an NCARS-layout dataset.
"""

import csv
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import numeric_grad, rel_err, window_sum_oracle_accuracy
from snnsweep import cli
from snnsweep.events import load_ncars_layout
from snnsweep.lif import LifParams, LifState, lif_step, run_lif
from snnsweep.network import NetworkConfig, build_network, forward
from snnsweep.runlog import load_trace
from snnsweep.stbp import AdamState, adam_step, one_hot, stbp_backward, stbp_loss, train
from snnsweep.sweep import (DEFAULT, SETTING_1, SweepPlan, compare, detect_stable_region, run_sweep)
from test_stbp import outputs_with_rates, scalar_adam
from test_sweep import brute_force_entry, ramp_then_plateau

# Setting-1 values for B, lr, v_th and w_decay with a surrogate half-width of 1.0,
# wide enough that neurons resting at 0 still receive gradient
SETTING_1_STYLE = replace(SETTING_1, surrogate_width=1.0)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_shape_contract(verdict):
    net = build_network((2, 100, 100))
    shapes = [tuple(l.out_shape) for l in net.layers]
    expected = [(2, 25, 25), (32, 25, 25), (32, 12, 12), (32, 12, 12), (32, 6, 6), (512,), (2,)]
    ok = net.flatten_size == 1152 and shapes == expected
    verdict(1, ok, f"flatten {net.flatten_size}, layers {shapes}")


def test_criterion_2_gradient_correctness(verdict):
    cfg = NetworkConfig(input_shape=(2, 8, 8), conv_channels=4, pool_windows=(1, 2, 2), hidden=8, init_gain=2.0)
    worst = {}
    for seed in range(3):
        net = build_network((2, 8, 8), LifParams(), seed, cfg)
        r = np.random.default_rng(seed)
        x = (r.random((3, 3, 2, 8, 8)) < 0.5).astype(np.float64)
        y = one_hot(r.integers(0, 2, 3))
        _, rec = forward(net, x, "smooth", 0.5)
        grads = stbp_backward(rec, y, reset_grad=True)
        f = lambda: stbp_loss(forward(net, x, "smooth", 0.5, keep=False)[0], y)  # noqa: E731
        for k, w in net.params.items():
            worst[k] = max(worst.get(k, 0.0), rel_err(grads[k], numeric_grad(f, w)))
    top = max(worst.values())
    verdict(2, top < 1e-4, f"max relative error {top:.2e} over {len(worst)} parameter tensors, T=3, 3 seeds")


def test_criterion_3_loss_oracle(verdict):
    errs = [abs(stbp_loss(outputs_with_rates(r), [[1, 0]]) - want)
            for r, want in (((1, 0), 0.0), ((0, 1), 1.0), ((0.5, 0.5), 0.25))]
    verdict(3, max(errs) <= 1e-12, f"perfect/opposite/uniform errors {errs}")


def test_criterion_4_lif_suite(verdict):
    p = LifParams(v_th=0.4, tau=0.25)
    checks = {}
    v, _ = run_lif(np.concatenate([[0.3], np.zeros(8)]).reshape(9, 1), p)
    checks["decay"] = all(v[k, 0] == 0.3 * 0.25 ** k for k in range(9))
    _, o = lif_step(LifState(np.array([0.0]), np.array([0.0])), np.array([0.4]), p)
    checks["inclusive threshold"] = o[0] == 1
    a = lif_step(LifState(np.array([5.0]), np.array([1.0])), np.array([0.1]), p)
    b = lif_step(LifState(np.array([-2.0]), np.array([1.0])), np.array([0.1]), p)
    checks["reset independence"] = a[0].v_m[0] == b[0].v_m[0] == 0.1
    r = np.random.default_rng(0)
    x = r.uniform(-1, 1, (20, 500))
    vh, oh = run_lif(x, p, "hard")
    vs, os_ = run_lif(x, p, "smooth", 1e-6)
    away = (np.abs(vh - p.v_th) > 1e-3).all(axis=0)  # neurons never near threshold
    checks["hard/smooth agreement"] = away.sum() > 100 and bool(np.all(oh[:, away] == os_[:, away]))
    verdict(4, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))


def test_criterion_5_adam_oracle(verdict):
    worst = 0.0
    for wd in (0.0, 0.5):
        r = np.random.default_rng(7)
        w0 = r.normal(size=5)
        grads = r.normal(size=(100, 5))
        params, opt = {"w": w0.copy()}, AdamState()
        for t, g in enumerate(grads):
            adam_step(params, {"w": g}, opt, 1e-2, wd)
        for i in range(5):
            ref = scalar_adam(w0[i], grads[:, i], 1e-2, wd)[-1]
            worst = max(worst, abs(params["w"][i] - ref))
    verdict(5, worst <= 1e-12, f"max deviation after 100 steps {worst:.1e} for w_decay 0 and 0.5")


def test_criterion_6_stable_region(verdict):
    const = detect_stable_region([85.0] * 20).entry_epoch
    alt = detect_stable_region([80.0, 90.0] * 15).entry_epoch
    ramp = ramp_then_plateau()
    ramp_entry, oracle = detect_stable_region(ramp).entry_epoch, brute_force_entry(ramp)
    rng = np.random.default_rng(11)
    mono = True
    for _ in range(100):
        acc = 80 + np.cumsum(rng.normal(0, 0.3, 40))
        e = [detect_stable_region(acc, std_threshold=t).entry_epoch for t in (1.0, 0.5, 0.25)]
        e = [math.inf if v is None else v for v in e]
        mono &= e == sorted(e)
    ok = const == 10 and alt is None and ramp_entry == oracle == 30 and mono
    verdict(6, ok, f"constant {const}, alternating {alt}, ramp {ramp_entry} (brute force {oracle}), "
                   f"monotone over 100 traces {mono}")


def test_criterion_7_desk_scale_learning(verdict, desk_split):
    oracle = window_sum_oracle_accuracy(desk_split)
    hp = replace(SETTING_1_STYLE, epochs=30, seed=0)
    net = build_network((2, 100, 100), hp.lif_params, hp.seed)
    start = time.perf_counter()
    trace = train(net, desk_split, hp, on_epoch=lambda row, _: row.test_acc >= 90.0)
    minutes = (time.perf_counter() - start) / 60
    best = max(trace.test_acc)
    verdict(7, best >= 90.0 and len(trace) <= 30,
            f"{best:.1f}% test accuracy at epoch {len(trace)} in {minutes:.1f} min "
            f"(B={hp.batch_size}, lr={hp.learning_rate}, v_th={hp.v_th}, a={hp.surrogate_width}); "
            f"window-sum oracle {oracle:.1f}%")


def test_criterion_8_weight_decay_degrades(verdict, desk_split, tmp_path):
    base = replace(SETTING_1_STYLE, epochs=6)
    report = run_sweep(SweepPlan(base, {"weight_decay": [0, 1, 2, 4]}), desk_split, tmp_path,
                       deterministic_trace=True)
    final = {r.trial.value: r.final_acc for r in report.results}
    ok = final[0] is not None and all(final[wd] is not None and final[wd] <= final[0] - 20 for wd in (1, 2, 4))
    # the report over the sweep directory flags every decayed trial
    code = cli.main(["report", str(tmp_path), "--out", str(tmp_path / "report"), "-q"])
    with open(tmp_path / "report" / "comparison.csv") as fh:
        flags = [row["flag"] for row in csv.DictReader(fh)]
    flagged = code == 0 and len(flags) == 4 and all("degraded" in f or "no stable region" in f for f in flags[1:])
    verdict(8, ok and flagged, "final test accuracy by w_decay " + ", ".join(f"{k:g}: {v}" for k, v in final.items())
            + f"; report flags {flags[1:]}")


def test_criterion_9_determinism(verdict, tmp_path):
    argv = ["train", "--synthetic", "--synth-n", "10", "--epochs", "3", "--deterministic-trace", "-q"]
    codes = [cli.main(argv + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    a, b = ((tmp_path / n / "trace.csv").read_bytes() for n in ("a", "b"))
    verdict(9, codes == [0, 0] and a == b and len(load_trace(tmp_path / "a")) == 3,
            f"exit codes {codes}, trace CSVs identical: {a == b} ({len(a)} bytes)")


@pytest.mark.skipif(not os.environ.get("SNN_NCARS_ROOT"), reason="set SNN_NCARS_ROOT to an NCARS-layout dataset")
def test_criterion_10_paper_scale(verdict):
    split = load_ncars_layout(os.environ["SNN_NCARS_ROOT"])
    traces = {}
    for name, hp in (("default", DEFAULT), ("setting-1", SETTING_1)):
        net = build_network((2, 100, 100), hp.lif_params, hp.seed)
        traces[name] = train(net, split, hp)
    peak_d, peak_s = max(traces["default"].test_acc), max(traces["setting-1"].test_acc)
    speedup = compare(traces["default"], traces["setting-1"]).speedup
    ok = abs(peak_d - 85) <= 2 and abs(peak_s - 86) <= 2 and speedup is not None and 1.4 <= speedup <= 2.4
    verdict(10, ok, f"peaks default {peak_d:.2f}%, setting-1 {peak_s:.2f}%, speedup {speedup}")
