"""Cross-validated training: fold construction, the Adam training loop,
per-fold evaluation, and the experiment driver shared by all input modes.

Seeds: every random stream is derived from ``TrainConfig.seed`` with
:func:`pancdetect.seeding.derive_seed` under a stage name (``folds``,
``init``, ``order``, ``augment``), so one integer reproduces a run.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .augment import AugmentPolicy, augment_case
from .errors import DataMissing, InvalidConfig, NonFiniteLoss, TooFewCases
from .evaluate import (
    aggregate,
    binarize,
    classify_case,
    format_mean_sd,
    mean_sd,
    write_report,
)
from .model import UNetConfig, build, load_checkpoint, loss, save_checkpoint
from .preprocess import INPUT_MODES, PreprocessConfig, assemble_input, round_half_away
from .seeding import derive_seed

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_sensitivity", "val_specificity", "val_dice")


@dataclass
class TrainConfig:
    folds: int = 3
    split: float = 0.70
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    seed: int = 0
    stratify: bool = True
    threshold: float = 0.5
    class_weights: tuple | None = None
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise InvalidConfig(f"split must lie in (0, 1), got {self.split}")
        if self.folds < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("folds and batch_size must be >= 1, epochs >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise InvalidConfig("lr and weight_decay must be non-negative")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["class_weights"] = list(self.class_weights) if self.class_weights else None
        d["augment"] = self.augment.to_dict()
        d["preprocess"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.preprocess).items()}
        d["unet"] = self.unet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train config keys: {sorted(unknown)}")
        try:
            if "augment" in d:
                d["augment"] = AugmentPolicy.from_dict(d["augment"] or {})
            if "preprocess" in d:
                d["preprocess"] = PreprocessConfig(**(d["preprocess"] or {}))
            if "unet" in d:
                d["unet"] = UNetConfig.from_dict(d["unet"] or {})
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def for_mode(self, mode):
        """Copy with the U-Net input width matched to ``mode``."""
        if mode not in INPUT_MODES:
            raise InvalidConfig(f"unknown input mode {mode!r}")
        unet = replace(self.unet, in_channels=1 if mode == "ct_only" else 4)
        return replace(self, unet=unet, preprocess=replace(self.preprocess, input_mode=mode))


# -- folds -------------------------------------------------------------------


def _allocate(sizes, total):
    """Split ``total`` across groups proportionally (largest remainder)."""
    exact = np.asarray(sizes, dtype=float) * total / max(sum(sizes), 1)
    alloc = np.floor(exact).astype(int)
    order = np.argsort(-(exact - alloc), kind="stable")
    for i in order[: total - alloc.sum()]:
        alloc[i] += 1
    return alloc


def make_folds(case_ids, folds=3, split=0.7, seed=0, labels=None):
    """``folds`` independent random train/validation splits.

    Each split puts ``round(split * N)`` cases in training. With
    ``labels`` the split is stratified: each class contributes in
    proportion to its size, and a class with two or more members keeps at
    least one case on each side when possible.
    """
    ids = list(case_ids)
    n = len(ids)
    if n < 2:
        raise TooFewCases(f"need at least 2 cases for a train/validation split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("case ids must be unique")
    n_train = int(np.clip(round_half_away(split * n), 1, n - 1))
    if labels is None:
        groups = [list(range(n))]
    else:
        labels = list(labels)
        if len(labels) != n:
            raise ValueError("labels must align with case_ids")
        groups = [[i for i in range(n) if labels[i] == v] for v in sorted(set(labels))]
    sizes = [len(g) for g in groups]
    alloc = _allocate(sizes, n_train)
    # keep both sides of every splittable class populated
    for i, size in enumerate(sizes):
        others = [j for j in range(len(sizes)) if j != i]
        if size < 2:
            continue
        if alloc[i] == 0:
            donors = [j for j in others if alloc[j] > 1]
            if donors:
                j = max(donors, key=lambda j: alloc[j])
                alloc[i], alloc[j] = alloc[i] + 1, alloc[j] - 1
        elif alloc[i] == size:
            takers = [j for j in others if alloc[j] < sizes[j] - 1]
            if takers:
                j = max(takers, key=lambda j: sizes[j] - alloc[j])
                alloc[i], alloc[j] = alloc[i] - 1, alloc[j] + 1

    out = []
    for k in range(folds):
        rng = np.random.default_rng(derive_seed(seed, "fold", k))
        train_idx = []
        for group, m in zip(groups, alloc):
            perm = rng.permutation(len(group))
            train_idx.extend(group[j] for j in perm[:m])
        train_set = set(train_idx)
        train = [ids[i] for i in sorted(train_set)]
        val = [ids[i] for i in range(n) if i not in train_set]
        out.append((train, val))
    return out


def save_folds(path, folds):
    with open(path, "w") as fh:
        json.dump([{"train": t, "val": v} for t, v in folds], fh, indent=1)


def load_folds(path):
    with open(path) as fh:
        return [(f["train"], f["val"]) for f in json.load(fh)]


# -- training ----------------------------------------------------------------


@dataclass
class FoldResult:
    model: torch.nn.Module
    history: list
    best_epoch: int
    best_val_loss: float
    metadata: dict
    checkpoint_path: Path | None = None


def load_mode_cases(data_root, case_ids, mode):
    try:
        cases = dataio.read_archive(data_root, case_ids)
    except DataMissing as exc:
        raise DataMissing(f"{exc} (run `pancdetect preprocess` first?)") from None
    return [assemble_input(c, mode) for c in cases]


def _batch(cases):
    x = torch.from_numpy(np.stack([c.x.as_array() for c in cases]))
    y = torch.from_numpy(np.stack([c.y.data.astype(np.int64) for c in cases]))
    return x, y


def predict_logits(model, case) -> torch.Tensor:
    x = torch.from_numpy(case.x.as_array()[None])
    with torch.no_grad():
        return model(x)[0]


def evaluate_model(model, cases, threshold=0.5, class_weights=None):
    """Mean per-case validation loss and the detection report."""
    model.eval()
    losses, outcomes = [], []
    try:
        for case in cases:
            logits = predict_logits(model, case)
            y = torch.from_numpy(case.y.data.astype(np.int64))
            losses.append(float(loss(logits, y, class_weights)))
            pred = binarize(logits.numpy(), threshold)
            outcomes.append(classify_case(pred, case.y, case.case_id))
    finally:
        model.train()
    return float(np.mean(losses)), aggregate(outcomes)


def train_fold(fold, cfg: TrainConfig, data_root, mode=None, fold_id=0, out_dir=None, cases=None):
    """Train one fold and return the best-validation-loss model.

    ``cases`` (a dict id -> assembled case) skips reading ``data_root``.
    When ``out_dir`` is given the checkpoint and history are written there.
    """
    mode = mode or cfg.preprocess.input_mode
    cfg = cfg.for_mode(mode)
    train_ids, val_ids = list(fold[0]), list(fold[1])
    if not train_ids or not val_ids:
        raise TooFewCases("fold needs non-empty training and validation sets")
    if cases is None:
        loaded = load_mode_cases(data_root, train_ids + val_ids, mode)
        cases = {c.case_id: c for c in loaded}
    missing = [cid for cid in train_ids + val_ids if cid not in cases]
    if missing:
        raise DataMissing(f"cases not found in {data_root}: {missing[:5]}")
    train_cases = [cases[c] for c in train_ids]
    val_cases = [cases[c] for c in val_ids]
    dims = train_cases[0].shape
    unet_cfg = replace(cfg.unet, seed=derive_seed(cfg.seed, "init", fold_id))
    model = build(unet_cfg, input_dims=dims)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    policy = replace(cfg.augment, seed=derive_seed(cfg.seed, "augment"))

    history = []
    best = (math.inf, 0, copy.deepcopy(model.state_dict()))
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        model.train()
        order = np.random.default_rng(derive_seed(cfg.seed, "order", fold_id, epoch)).permutation(len(train_cases))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [
                augment_case(train_cases[i], policy, derive_seed(cfg.seed, "draw", fold_id, epoch, int(i)))
                for i in idx
            ]
            x, y = _batch(batch)
            value = loss(model(x), y, cfg.class_weights)
            if not torch.isfinite(value):
                raise NonFiniteLoss(
                    f"non-finite training loss at fold {fold_id} epoch {epoch} step {start // cfg.batch_size} "
                    f"(cases {[train_cases[i].case_id for i in idx]}); lower lr or check inputs"
                )
            opt.zero_grad()
            value.backward()
            opt.step()
            total += float(value.detach()) * len(idx)
            count += len(idx)
        val_loss, report = evaluate_model(model, val_cases, cfg.threshold, cfg.class_weights)
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"non-finite validation loss at fold {fold_id} epoch {epoch}")
        history.append(
            {
                "epoch": epoch,
                "train_loss": total / count,
                "val_loss": val_loss,
                "val_sensitivity": report.sensitivity,
                "val_specificity": report.specificity,
                "val_dice": report.mean_dice,
            }
        )
        log.info(
            "%s fold %d epoch %d/%d train %.5f val %.5f sens %s spec %s (%.1fs)",
            mode, fold_id, epoch, cfg.epochs, total / count, val_loss,
            report.sensitivity, report.specificity, time.time() - t0,
        )
        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(model.state_dict()))

    if not history:
        val_loss, _ = evaluate_model(model, val_cases, cfg.threshold, cfg.class_weights)
        best = (val_loss, 0, best[2])
    model.load_state_dict(best[2])
    metadata = {
        "mode": mode,
        "fold_id": fold_id,
        "epoch": best[1],
        "val_loss": best[0],
        "seed": cfg.seed,
        "train_ids": train_ids,
        "val_ids": val_ids,
        "threshold": cfg.threshold,
        "class_weights": list(cfg.class_weights) if cfg.class_weights else None,
    }
    result = FoldResult(model, history, best[1], best[0], metadata)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.checkpoint_path = save_checkpoint(out_dir / "checkpoint.npz", model, metadata)
        write_history(out_dir / "history.tsv", history)
    return result


def _cell(v):
    return "NA" if v is None else (str(v) if isinstance(v, int) else repr(float(v)))


def write_history(path, history):
    lines = ["\t".join(HISTORY_COLUMNS)]
    lines += ["\t".join(_cell(row[c]) for c in HISTORY_COLUMNS) for row in history]
    Path(path).write_text("\n".join(lines) + "\n")


def read_history(path):
    rows = Path(path).read_text().splitlines()
    header = rows[0].split("\t")
    out = []
    for row in rows[1:]:
        vals = row.split("\t")
        rec = {}
        for k, v in zip(header, vals):
            rec[k] = None if v == "NA" else (int(v) if k == "epoch" else float(v))
        out.append(rec)
    return out


# -- experiments -------------------------------------------------------------


@dataclass
class ExperimentResult:
    mode: str
    folds: list
    fold_reports: list
    fold_results: list
    test_reports: list = field(default_factory=list)

    def summary(self):
        return summarize_reports(self.fold_reports)


def summarize_reports(reports):
    out = {}
    for key, attr in (("sensitivity", "sensitivity"), ("specificity", "specificity"), ("dice", "mean_dice")):
        values = [getattr(r, attr) for r in reports]
        mean, sd = mean_sd(values)
        out[key] = {"values": values, "mean": mean, "sd": sd}
    return out


def experiment_folds(cfg: TrainConfig, data_root):
    manifest = dataio.read_manifest(data_root)
    ids = [cid for cid, _ in manifest]
    labels = [t for _, t in manifest] if cfg.stratify else None
    return make_folds(ids, cfg.folds, cfg.split, derive_seed(cfg.seed, "folds"), labels)


def run_experiment(mode, cfg: TrainConfig, data_root, out_dir, test_root=None):
    """Train and validate every fold for one input mode.

    Folds depend only on the case list and ``cfg.seed``, so different modes
    run on the same splits. With ``test_root`` every fold model is also
    applied to that held-out archive.
    """
    out_dir = Path(out_dir) / mode
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = experiment_folds(cfg, data_root)
    save_folds(out_dir / "folds.json", folds)
    all_ids = sorted({cid for tr, va in folds for cid in tr + va})
    cases = {c.case_id: c for c in load_mode_cases(data_root, all_ids, mode)}
    test_cases = load_mode_cases(test_root, None, mode) if test_root else []

    reports, results, test_reports = [], [], []
    for k, fold in enumerate(folds):
        fold_dir = out_dir / f"fold{k}"
        result = train_fold(fold, cfg, data_root, mode=mode, fold_id=k, out_dir=fold_dir, cases=cases)
        _, report = evaluate_model(result.model, [cases[c] for c in fold[1]], cfg.threshold, cfg.class_weights)
        write_report(report, fold_dir / "val_metrics.tsv")
        reports.append(report)
        results.append(result)
        if test_cases:
            _, test_report = evaluate_model(result.model, test_cases, cfg.threshold, cfg.class_weights)
            write_report(test_report, fold_dir / "test_metrics.tsv")
            test_reports.append(test_report)
    result = ExperimentResult(mode, folds, reports, results, test_reports)
    write_summary(out_dir / "summary.tsv", {mode: result.summary()})
    return result


def write_summary(path, summaries):
    """Mode-by-metric table of fold values and mean ± sd."""
    lines = ["mode\tmetric\tmean\tsd\tdisplay\tfold_values"]
    for mode, summary in summaries.items():
        for metric, s in summary.items():
            vals = ",".join(_cell(v) for v in s["values"])
            lines.append(
                f"{mode}\t{metric}\t{_cell(s['mean'])}\t{_cell(s['sd'])}\t{format_mean_sd(s['values'])}\t{vals}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def evaluate_checkpoint(checkpoint, data_root, case_ids=None):
    """Reload a checkpoint and score it on ``case_ids`` (default: its own
    validation ids). Returns ``(val_loss, report, metadata)``."""
    model, meta = load_checkpoint(checkpoint)
    ids = case_ids if case_ids is not None else meta.get("val_ids")
    if not ids:
        raise DataMissing(f"{checkpoint}: no case ids given and none stored in the checkpoint")
    cases = load_mode_cases(data_root, ids, meta.get("mode", "full"))
    weights = meta.get("class_weights")
    val_loss, report = evaluate_model(model, cases, meta.get("threshold", 0.5), weights)
    return val_loss, report, meta
