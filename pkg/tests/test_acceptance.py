"""Exit criteria for the package, one test per criterion.

Each test appends a PASS/FAIL line that is printed in the terminal summary.
The end-to-end and determinism criteria share two ``crossval`` CLI runs on
the same synthetic cohort (about two minutes each on one core).
"""

import time
from collections import Counter

import numpy as np
import pytest

from _oracles import direct_conv1d, finite_difference_grads
from conftest import ACCEPTANCE_LINES, make_dataset
from gaitlrp import nn
from gaitlrp.cli import main
from gaitlrp.data import stratified_subject_kfold
from gaitlrp.eval import read_metrics, zero_rule
from gaitlrp.lrp import LrpConfig, conservation_report, lrp_explain, read_relevance_csv
from gaitlrp.nn import Conv1D

SYNTH_SEED = 7
CV_SEED = 7


def record(name, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _random_biases(net, rng):
    for layer in net.layers:
        if "bias" in layer.params:
            layer.params["bias"] = rng.normal(0, 0.1, layer.params["bias"].shape)
    return net


def _min_abs_z(net, trace):
    outs = trace.inputs[1:] + [trace.output]
    return min(np.abs(o).min() for layer, o in zip(net.layers, outs) if "weight" in layer.params)


def test_lrp_conservation():
    start = time.perf_counter()
    worst_cons = worst_acct = 0.0
    pairs = rejected = 0
    seed = 0
    while pairs < 20:
        rng = np.random.default_rng(seed)
        seed += 1
        net = nn.default_network(seed=seed, use_bias=False)
        x = rng.random((6, 100))
        trace = nn.forward(net, x)
        if _min_abs_z(net, trace) < 1e-12:
            rejected += 1
            continue
        target = int(rng.integers(3))
        rmap = lrp_explain(net, trace, target, LrpConfig(epsilon=0.0))
        worst_cons = max(worst_cons, abs(rmap.input_relevance.sum() - rmap.explained_logit)
                         / abs(rmap.explained_logit))

        biased = _random_biases(nn.default_network(seed=1000 + seed), rng)
        btrace = nn.forward(biased, x)
        report = conservation_report(lrp_explain(biased, btrace, target, LrpConfig(epsilon=1e-6)))
        worst_acct = max(worst_acct, report.accounting_error)
        pairs += 1
    elapsed = time.perf_counter() - start
    record("LRP conservation", worst_cons < 1e-9 and worst_acct < 1e-9 and elapsed < 10,
           f"{pairs} pairs ({rejected} rejected by |z|<1e-12 guard), max conservation error "
           f"{worst_cons:.2e}, max accounting error {worst_acct:.2e} (tol 1e-9), {elapsed:.1f}s (<10s)")


def test_gradient_correctness():
    start = time.perf_counter()
    worst = kink_worst = 0.0
    checked = kinks = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = _random_biases(nn.default_network(seed=seed), rng)
        x = rng.random((6, 100))
        label = int(rng.integers(3))
        trace = nn.forward(net, x)
        _, g = nn.softmax_cross_entropy(trace.logits, label)
        grads = nn.backward(net, trace, g)
        for (i, name), (fd, kink) in finite_difference_grads(net, x, label, h=1e-5).items():
            an = grads[i][name]
            # gradients below 1e-5 are compared on that absolute scale: the
            # central-difference round-off floor is ~eps*|loss|/h ~ 1e-11
            err = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-5)
            worst = max(worst, float(err[~kink].max(initial=0.0)))
            # a kink parameter's +-h evaluations switch a ReLU or pool winner, so
            # the central difference straddles a non-differentiable point and is
            # not a derivative oracle there; those are reported, not compared
            kink_worst = max(kink_worst, float(err[kink].max(initial=0.0)))
            checked += int((~kink).sum())
            kinks += int(kink.sum())
    elapsed = time.perf_counter() - start
    n_params = sum(p.size for _, _, p in nn.default_network().parameters())
    record("gradient correctness",
           worst < 1e-5 and elapsed < 60,
           f"10 seeds x {n_params} params, {checked} compared, max rel error {worst:.2e} "
           f"(tol 1e-5), {kinks} excluded at ReLU/pool kinks (max rel error there "
           f"{kink_worst:.2e}), {elapsed:.1f}s (<60s)")


def test_convolution_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    cases = 0
    for k in range(1, 5):
        for stride in (1, 2):
            for pad in range(3):
                for length in (7, 10):
                    conv = Conv1D(3, 4, k, stride, pad, weight=rng.normal(size=(4, 3, k)),
                                  bias=rng.normal(size=4))
                    x = rng.normal(size=(2, 3, length))
                    y = conv.forward(x)
                    assert y.shape[2] == (length + 2 * pad - k) // stride + 1
                    for n in range(2):
                        ref = direct_conv1d(x[n], conv.params["weight"], conv.params["bias"],
                                            stride, pad)
                        worst = max(worst, float(np.abs(y[n] - ref).max()))
                    cases += 1
    record("convolution oracle", worst < 1e-12,
           f"{cases} kernel/stride/padding/length cases, max abs deviation {worst:.2e} (tol 1e-12)")


def test_stratified_folds():
    rng = np.random.default_rng(2024)
    failures = []
    for trial in range(200):
        k = int(rng.integers(2, 11))
        per_class = [k + int(rng.integers(0, 15)) for _ in range(3)]
        ds = make_dataset(per_class, int(rng.integers(1, 4)), T=2, seed=trial)
        split = stratified_subject_kfold(ds, k, int(rng.integers(0, 2**31)))
        subjects = set(ds.subjects)
        union = set().union(*split.folds)
        disjoint = sum(len(f) for f in split.folds) == len(subjects)
        fold_of = {s: i for i, f in enumerate(split.folds) for s in f}
        intact = all(len({fold_of[ds.trials[i].subject_id] for i in idx}) == 1
                     for idx in ds.subjects.values())
        balanced = all(
            max(c) - min(c) <= 1
            for c in ([sum(ds.subject_label(s) == cls for s in f) for f in split.folds]
                      for cls in range(3)))
        if not (union == subjects and disjoint and intact and balanced):
            failures.append(trial)
    record("stratified folds", not failures,
           f"200 random datasets, {len(failures)} violating partition/integrity/balance")


def test_zero_rule():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        counts = rng.integers(0, 20, size=3)
        if counts.sum() == 0:
            continue
        ds = make_dataset(counts.tolist(), int(rng.integers(1, 5)), T=2)
        tally = Counter(int(l) for l in ds.labels)
        oracle = max(tally.values()) / sum(tally.values())
        mismatches += zero_rule(ds) != oracle
    uniform = zero_rule(make_dataset([7, 7, 7], 3, T=2))
    record("zero rule", mismatches == 0 and abs(uniform - 1 / 3) < 1e-15,
           f"{mismatches} mismatches vs counting oracle, uniform case {uniform!r}")


@pytest.fixture(scope="module")
def crossval_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance")
    data = d / "cohort.csv"
    assert main(["synth", "--per-class", "30", "--trials", "5", "--T", "100", "--noise", "0.05",
                 "--seed", str(SYNTH_SEED), "--out", str(data)]) == 0
    runs = []
    for name in ("run1", "run2"):
        start = time.perf_counter()
        code = main(["crossval", "--data", str(data), "--k", "10", "--seed", str(CV_SEED),
                     "--out", str(d / name)])
        runs.append((d / name, code, time.perf_counter() - start))
    return runs


def test_end_to_end_synthetic(crossval_runs):
    out, code, elapsed = crossval_runs[0]
    m = read_metrics(out / "metrics.txt")
    ok = (code == 0 and m["accuracy_mean"] >= 0.90 and m["zero_rule"] == 1 / 3
          and m["n_trials"] == 450 and int(m["confusion_matrix"].sum()) == 450 and elapsed < 600)
    record("end-to-end synthetic run", ok,
           f"accuracy {m['accuracy_mean']:.4f} +- {m['accuracy_sd']:.4f} (>=0.90), zero rule "
           f"{m['zero_rule']!r}, pooled total {int(m['confusion_matrix'].sum())} (450), "
           f"{elapsed:.0f}s (<600s)")


def test_relevance_localizes_second_peak(crossval_runs):
    out, _, _ = crossval_runs[0]
    profiles, total = read_relevance_csv(out / "relevance.csv")
    channels = next(iter(profiles.values())).channels
    T = total.shape[1]
    details = []
    ok = True
    for ci, (side, comp) in enumerate(channels):
        if comp != "V":
            continue
        t_max = int(np.argmax(total[ci]))
        frac = t_max / (T - 1)
        ok &= 0.60 <= frac <= 0.90
        details.append(f"{side}/V max at {100 * frac:.1f}% stance")
    record("relevance localizes planted V peak", ok and len(details) == 2,
           ", ".join(details) + " (window 60-90%)")


def test_crossval_determinism(crossval_runs):
    (a, code_a, _), (b, code_b, _) = crossval_runs
    files = sorted(p.name for p in a.iterdir())
    differing = [n for n in files if (a / n).read_bytes() != (b / n).read_bytes()]
    svgs = sum(n.endswith(".svg") for n in files)
    ok = (code_a == code_b == 0 and files == sorted(p.name for p in b.iterdir())
          and not differing and svgs == 19
          and {"metrics.txt", "relevance.csv"} <= set(files))
    record("crossval determinism", ok,
           f"{len(files)} files compared ({svgs} SVG), {len(differing)} differ")
