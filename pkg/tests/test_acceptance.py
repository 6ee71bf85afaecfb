"""Acceptance suite: one test per criterion, each recording a PASS/FAIL
line that is printed in the terminal summary.

Criterion 5 trains nine desk-scale models (three input modes by three
folds) and takes roughly half an hour on one CPU core.
"""
import csv
import json
import math
import time

import numpy as np
import oracles
import pytest

from pancdetect import dataio
from pancdetect.cli import main
from pancdetect.evaluate import (
    DetectionOutcome,
    aggregate,
    binarize,
    classify_case,
    format_mean_sd,
    mean_sd,
)
from pancdetect.model import loss, loss_gradient
from pancdetect.phantom import PhantomSpec, generate_case
from pancdetect.preprocess import (
    PreprocessConfig,
    assemble_input,
    normalize_ct,
    preprocess_case,
)
from pancdetect.train import read_history
from pancdetect.volume import Volume3D, center_of_mass, dice, overlaps


def test_criterion_1_metric_oracles(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    failures = []
    n_volumes = 100
    for i in range(n_volumes):
        shape = tuple(int(s) for s in rng.integers(2, 17, size=3))
        a = (rng.random(shape) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        b = (rng.random(shape) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        if i % 10 == 0:
            b[:] = 0
        if overlaps(a, b) != (oracles.intersection_count(a, b) > 0):
            failures.append(("overlaps", i))
        if not math.isclose(dice(a, b), oracles.dice(a, b), rel_tol=1e-5):
            failures.append(("dice", i))
        if a.any() and not np.allclose(center_of_mass(a), oracles.center_of_mass(a), rtol=1e-5, atol=0):
            failures.append(("center_of_mass", i))
        ct = rng.normal(40, 30, size=shape).astype(np.float32)
        fg = a if a.sum() >= 2 else np.ones(shape, np.uint8)
        got = normalize_ct(Volume3D(ct), fg, (0.5, 99.5)).data
        ref = oracles.normalize(ct, fg, 0.5, 99.5)
        if not np.allclose(got, ref, rtol=1e-5, atol=1e-5):
            failures.append(("normalize_ct", i))
        logits = rng.normal(0, 3, size=(2,) + shape)
        threshold = float(rng.uniform(0.1, 0.9))
        if not np.array_equal(binarize(logits, threshold), oracles.binarize(logits, threshold)):
            failures.append(("binarize", i))
    elapsed = time.time() - t0
    ok = not failures and elapsed < 60
    criterion(1, ok, f"{n_volumes} volumes x 5 kernels, {len(failures)} mismatches, {elapsed:.1f}s")
    assert not failures, failures[:10]
    assert elapsed < 60


def _mask(*points, shape=(6, 6, 6)):
    m = np.zeros(shape, np.uint8)
    for p in points:
        m[p] = 1
    return m


def test_criterion_2_rule_table(criterion):
    label = _mask((2, 2, 2), (2, 2, 3), (2, 3, 2))
    rows = [
        ("TP partial overlap", _mask((2, 2, 2), (4, 4, 4)), label, "TP"),
        ("FP on empty label", _mask((1, 1, 1)), _mask(), "FP"),
        ("FP mislocated", _mask((5, 5, 5), (5, 5, 4)), label, "FP"),
        ("FN empty prediction", _mask(), label, "FN"),
        ("TN empty/empty", _mask(), _mask(), "TN"),
    ]
    got = [(name, classify_case(pred, y, name).category, want) for name, pred, y, want in rows]
    ok = all(g == w for _, g, w in got)
    criterion(2, ok, ", ".join(f"{n}={g}" for n, g, _ in got))
    assert ok, got


def test_criterion_3_loss_and_gradient(criterion):
    uniform = loss(np.zeros((2, 4, 4, 4)), np.zeros((4, 4, 4), int))
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(2, 4, 4, 4))
    y = rng.integers(0, 2, size=(4, 4, 4))
    grad = loss_gradient(logits, y)
    eps = 1e-6
    worst = 0.0
    for idx in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += eps
        minus[idx] -= eps
        fd = (loss(plus, y) - loss(minus, y)) / (2 * eps)
        worst = max(worst, abs(grad[idx] - fd) / abs(fd))
    ok = abs(uniform - math.log(2)) <= 1e-6 and worst <= 1e-3
    criterion(3, ok, f"|L - ln2| = {abs(uniform - math.log(2)):.2e}, max rel grad err = {worst:.2e}")
    assert abs(uniform - math.log(2)) <= 1e-6
    assert worst <= 1e-3


def test_criterion_4_shape_contract(criterion):
    case = generate_case(PhantomSpec(seed=21), case_id="shape")
    prepared = preprocess_case(case, PreprocessConfig(crop_dims=(48, 64, 64), input_mode="full"))
    full = assemble_input(prepared, "full")
    x, y = full.x.as_array(), full.y.data
    ok = x.shape == (4, 48, 64, 64) and y.shape == (48, 64, 64)
    criterion(4, ok, f"X {x.shape}, Y {y.shape}")
    assert x.shape == (4, 48, 64, 64)
    assert y.shape == (48, 64, 64)


def _summary(path):
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            out[(row["mode"], row["metric"])] = None if row["mean"] == "NA" else float(row["mean"])
    return out


@pytest.mark.slow
def test_criterion_5_desk_reproduction(criterion, tmp_path):
    work = tmp_path / "desk"
    t0 = time.time()
    code = main(["reproduce", "--workdir", str(work), "--seed", "0", "--n-tumor", "30", "--n-control", "30"])
    hours = (time.time() - t0) / 3600
    assert code == 0
    s = _summary(work / "summary.tsv")
    sens, spec = s[("full", "sensitivity")], s[("full", "specificity")]
    ct_spec = s[("ct_only", "specificity")]
    gap = spec - ct_spec
    ok = sens >= 0.90 and spec >= 0.90 and gap >= 0.15 and hours <= 8
    criterion(
        5,
        ok,
        f"full sens {sens:.3f} spec {spec:.3f}; ct_only spec {ct_spec:.3f} (gap {gap:.3f}); "
        f"binary_ducts spec {s[('binary_ducts', 'specificity')]:.3f}; {hours * 60:.0f} min",
    )
    assert sens >= 0.90
    assert spec >= 0.90
    assert gap >= 0.15
    assert hours <= 8


def _reproduce_once(root, seed):
    args = ["reproduce", "--workdir", str(root), "--seed", str(seed), "--epochs", "1", "--no-figures"]
    assert main(args) == 0


def test_criterion_6_reproducibility(criterion, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _reproduce_once(a, 11)
    _reproduce_once(b, 11)
    modes = ("ct_only", "binary_ducts", "full")
    folds_equal = all(
        json.loads((a / "runs" / m / "folds.json").read_text()) == json.loads((b / "runs" / m / "folds.json").read_text())
        for m in modes
    )
    bytes_equal = True
    for cid, _ in dataio.read_manifest(a / "raw"):
        ca, cb = dataio.read_case(a / "raw" / cid), dataio.read_case(b / "raw" / cid)
        for name in ca.x.channel_names:
            bytes_equal &= ca.x[name].data.tobytes() == cb.x[name].data.tobytes()
        bytes_equal &= ca.y.data.tobytes() == cb.y.data.tobytes()
    worst = 0.0
    for m in modes:
        for k in range(3):
            ha = read_history(a / "runs" / m / f"fold{k}" / "history.tsv")[0]
            hb = read_history(b / "runs" / m / f"fold{k}" / "history.tsv")[0]
            worst = max(worst, abs(ha["train_loss"] - hb["train_loss"]), abs(ha["val_loss"] - hb["val_loss"]))
    ok = folds_equal and bytes_equal and worst <= 1e-6
    criterion(6, ok, f"folds equal {folds_equal}, phantom bytes equal {bytes_equal}, max epoch-1 loss diff {worst:.1e}")
    assert folds_equal
    assert bytes_equal
    assert worst <= 1e-6


def _fold(n_tp, n_fn):
    cats = ["TP"] * n_tp + ["FN"] * n_fn
    return aggregate(DetectionOutcome(f"c{i}", c == "TP", True, c == "TP", None, c) for i, c in enumerate(cats))


def test_criterion_7_cross_validation_accounting(criterion):
    reports = [_fold(28, 0), _fold(28, 0), _fold(27, 1)]
    sens = [r.sensitivity for r in reports]
    mean, sd = mean_sd(sens)
    pct = format_mean_sd(sens, percent=True)
    dec = format_mean_sd(sens)
    ok = (
        [round(100 * s, 2) for s in sens] == [100.0, 100.0, 96.43]
        and pct == "99±2%"
        and dec == "0.99 ± 0.02"
    )
    criterion(7, ok, f"fold sensitivities {[round(s, 4) for s in sens]} -> {pct} ({dec}); mean {mean:.4f} sd {sd:.4f}")
    assert pct == "99±2%"
    assert dec == "0.99 ± 0.02"
