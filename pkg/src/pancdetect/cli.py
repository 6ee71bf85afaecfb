"""Command-line entry point.

Subcommands: generate, preprocess, train, evaluate, reproduce,
import-nifti, plot-case. Exit codes: 0 success, 1 usage or config error,
2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import dataio
from .config import desk_config, dump_config, load_config
from .errors import DataMissing, PancDetectError, UsageError
from .evaluate import binarize, format_mean_sd, write_report
from .model import load_checkpoint
from .phantom import SpecRanges, generate_dataset
from .preprocess import INPUT_MODES, assemble_input, preprocess_case
from .seeding import derive_seed
from .train import (
    evaluate_checkpoint,
    load_mode_cases,
    predict_logits,
    run_experiment,
    summarize_reports,
    write_summary,
)

log = logging.getLogger("pancdetect")

REPRODUCE_MODES = ("ct_only", "binary_ducts", "full")
TABLE_METRICS = ("sensitivity", "specificity", "dice")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _triple(kind):
    def parse(text):
        parts = [p for p in text.replace("x", ",").split(",") if p]
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        return tuple(kind(p) for p in parts)

    return parse


def _load(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return desk_config(), SpecRanges()


def _ranges_from_args(args, ranges: SpecRanges) -> SpecRanges:
    changes = {}
    for flag, name in (
        ("tumor_radius", "tumor_radius"),
        ("tumor_contrast", "tumor_contrast"),
        ("dilation", "duct_dilation_factor"),
        ("duct_radius", "base_duct_radius"),
        ("noise_sigma", "noise_sigma"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = tuple(value)
    if getattr(args, "mimic_probability", None) is not None:
        changes["mimic_probability"] = args.mimic_probability
    if getattr(args, "dims", None):
        changes["dims"] = args.dims
    if getattr(args, "spacing", None):
        changes["spacing"] = args.spacing
    ranges = replace(ranges, **changes)
    ranges.validate()
    return ranges


# -- commands ----------------------------------------------------------------


def generate(out, n_tumor, n_control, seed, ranges):
    cases = generate_dataset(n_tumor, n_control, ranges, seed=derive_seed(seed, "phantom"))
    dataio.write_archive(cases, out)
    log.info("wrote %d cases (%d tumor / %d control) to %s", len(cases), n_tumor, n_control, out)
    return cases


def preprocess(src, out, cfg):
    manifest = dataio.read_manifest(src)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["case_id\tz_start\tz_stop\tx_start\tx_stop\ty_start\ty_stop\tpad_z\tpad_x\tpad_y"]
    done = []
    for cid, _ in manifest:
        try:
            case = preprocess_case(dataio.read_case(Path(src) / cid), cfg.preprocess)
        except PancDetectError as exc:
            raise type(exc)(f"case {cid}: {exc}") from None
        dataio.write_case(case, out)
        window = [v for pair in case.metadata["crop_window"] for v in pair]
        rows.append("\t".join([cid] + [str(v) for v in window + case.metadata["crop_pad"]]))
        done.append((case.case_id, case.is_tumor_case))
    dataio.write_manifest(out, done)
    (out / "preprocess_log.tsv").write_text("\n".join(rows) + "\n")
    log.info("preprocessed %d cases into %s (crop %s)", len(done), out, cfg.preprocess.crop_dims)


def train(data, cfg, mode, out, test=None):
    result = run_experiment(mode, cfg, data, out, test_root=test)
    summary = result.summary()
    for metric in TABLE_METRICS:
        log.info("%s %s %s", mode, metric, format_mean_sd(summary[metric]["values"]))
    return result


def _checkpoint_paths(spec):
    paths = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.rglob("checkpoint.npz")))
        elif p.exists():
            paths.append(p)
        else:
            raise DataMissing(f"checkpoint {p} not found")
    if not paths:
        raise DataMissing(f"no checkpoint.npz under {list(spec)}")
    return paths


def evaluate(data, checkpoints, out, all_cases=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [cid for cid, _ in dataio.read_manifest(data)] if all_cases else None
    reports = []
    lines = ["checkpoint\tmode\tfold\tepoch\tval_loss\tstored_val_loss\tsensitivity\tspecificity\tdice"]
    for i, ckpt in enumerate(_checkpoint_paths(checkpoints)):
        val_loss, report, meta = evaluate_checkpoint(ckpt, data, ids)
        name = f"{meta.get('mode', 'model')}_fold{meta.get('fold_id', i)}"
        write_report(report, out / f"{name}_metrics.tsv")
        reports.append(report)
        lines.append(
            "\t".join(
                str(v)
                for v in (
                    ckpt, meta.get("mode"), meta.get("fold_id"), meta.get("epoch"), repr(val_loss),
                    repr(meta.get("val_loss")), report.sensitivity, report.specificity, report.mean_dice,
                )
            )
        )
    (out / "evaluation.tsv").write_text("\n".join(lines) + "\n")
    write_summary(out / "summary.tsv", {"evaluated": summarize_reports(reports)})
    return reports


def results_table(summaries):
    header = "mode\t" + "\t".join(TABLE_METRICS)
    rows = [header]
    for mode, s in summaries.items():
        rows.append(mode + "\t" + "\t".join(format_mean_sd(s[m]["values"]) for m in TABLE_METRICS))
    return "\n".join(rows) + "\n"


def reproduce(workdir, seed, cfg, ranges, n_tumor=30, n_control=30, modes=REPRODUCE_MODES,
              n_test=0, figures=True):
    """Phantoms -> preprocessing -> every input mode on shared folds."""
    workdir = Path(workdir)
    cfg = replace(cfg, seed=int(seed))
    with dataio.workdir_lock(workdir):
        dump_config(workdir / "config.yaml", cfg, ranges)
        generate(workdir / "raw", n_tumor, n_control, seed, ranges)
        preprocess(workdir / "raw", workdir / "prep", cfg)
        test_root = None
        if n_test:
            cases = generate_dataset(n_test, 0, ranges, seed=derive_seed(seed, "phantom-test"))
            dataio.write_archive(cases, workdir / "test_raw")
            preprocess(workdir / "test_raw", workdir / "test_prep", cfg)
            test_root = workdir / "test_prep"
        results = {}
        for mode in modes:
            results[mode] = train(workdir / "prep", cfg, mode, workdir / "runs", test=test_root)
        summaries = {m: r.summary() for m, r in results.items()}
        write_summary(workdir / "summary.tsv", summaries)
        table = results_table(summaries)
        (workdir / "results_table.tsv").write_text(table)
        if n_test:
            test_summaries = {f"test_{m}": summarize_reports(r.test_reports) for m, r in results.items()}
            write_summary(workdir / "test_summary.tsv", test_summaries)
        if figures:
            _figures(workdir, results, summaries)
    return results, table


def _figures(workdir, results, summaries):
    from . import plotting  # matplotlib is only loaded when figures are drawn

    fig_dir = Path(workdir) / "figures"
    fig_dir.mkdir(exist_ok=True)
    plotting.plot_summary(summaries, fig_dir / "metrics_by_mode.png")
    plotting.plot_histories({m: [f.history for f in r.fold_results] for m, r in results.items()}, fig_dir / "loss_curves.png")
    for mode, r in results.items():
        val_ids = r.folds[0][1]
        cases = load_mode_cases(Path(workdir) / "prep", val_ids, mode)
        model = r.fold_results[0].model
        picked = [c for c in cases if c.is_tumor_case][:1] + [c for c in cases if not c.is_tumor_case][:1]
        for case in picked:
            pred = binarize(predict_logits(model, case).numpy())
            # contours come from the full-channel case whatever the input mode
            full_case = dataio.read_case(Path(workdir) / "prep" / case.case_id)
            plotting.plot_case(full_case, fig_dir / f"{mode}_{case.case_id}.png", pred)


def import_nifti(args):
    case = dataio.import_nifti_case(
        args.case_id, args.ct, args.pancreas, args.pancreatic_duct, args.common_bile_duct, args.label,
        args.pd_dilated, args.cbd_dilated,
    )
    out = Path(args.out)
    dataio.write_case(case, out)
    entries = dataio.read_manifest(out) if (out / dataio.MANIFEST).exists() else []
    entries = [e for e in entries if e[0] != case.case_id] + [(case.case_id, case.is_tumor_case)]
    dataio.write_manifest(out, entries)
    log.info("imported %s into %s", case.case_id, out)


def plot_case_cmd(args):
    from . import plotting

    case = dataio.read_case(Path(args.data) / args.case_id)
    pred = None
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        pred = binarize(predict_logits(model, assemble_input(case, meta.get("mode", "full"))).numpy())
    plotting.plot_case(case, args.out, pred)


# -- argument parsing --------------------------------------------------------


def _add_range_flags(p):
    g = p.add_argument_group("phantom ranges (low high)")
    g.add_argument("--tumor-radius", nargs=2, type=float, metavar=("LO", "HI"))
    g.add_argument("--tumor-contrast", nargs=2, type=float, metavar=("LO", "HI"))
    g.add_argument("--dilation", nargs=2, type=float, metavar=("LO", "HI"))
    g.add_argument("--duct-radius", nargs=2, type=float, metavar=("LO", "HI"))
    g.add_argument("--noise-sigma", nargs=2, type=float, metavar=("LO", "HI"))
    g.add_argument("--mimic-probability", type=float)
    g.add_argument("--dims", type=_triple(int), help="Z,X,Y voxels")
    g.add_argument("--spacing", type=_triple(float), help="mm per voxel (z,x,y)")


def build_parser():
    parser = _Parser(prog="pancdetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a phantom case archive")
    p.add_argument("--out", required=True)
    p.add_argument("--n-tumor", type=int, default=30)
    p.add_argument("--n-control", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    _add_range_flags(p)

    p = sub.add_parser("preprocess", help="resample, normalize and crop an archive")
    p.add_argument("--in", dest="src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("train", help="cross-validated training for one input mode")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=INPUT_MODES, default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--test", help="held-out preprocessed archive to apply every fold model to")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("evaluate", help="score checkpoints on preprocessed cases")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--all-cases", action="store_true", help="score every case instead of each checkpoint's validation ids")

    p = sub.add_parser("reproduce", help="phantoms -> all three input modes -> comparison table")
    p.add_argument("--workdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--n-tumor", type=int, default=30)
    p.add_argument("--n-control", type=int, default=30)
    p.add_argument("--n-test", type=int, default=0, help="tumor-only held-out phantom test cases")
    p.add_argument("--epochs", type=int)
    p.add_argument("--modes", nargs="+", choices=INPUT_MODES, default=list(REPRODUCE_MODES))
    p.add_argument("--no-figures", action="store_true")
    _add_range_flags(p)

    p = sub.add_parser("import-nifti", help="add a NIfTI-1 case to an archive")
    p.add_argument("--out", required=True)
    p.add_argument("--case-id", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--pancreas", required=True)
    p.add_argument("--pancreatic-duct", required=True)
    p.add_argument("--common-bile-duct", required=True)
    p.add_argument("--label")
    p.add_argument("--pd-dilated", type=_bool, default=None)
    p.add_argument("--cbd-dilated", type=_bool, default=None)

    p = sub.add_parser("plot-case", help="render a case slice (and a prediction) to an image")
    p.add_argument("--data", required=True)
    p.add_argument("--case-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    return parser


def _bool(text):
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def run(args):
    if args.command == "generate":
        _, ranges = _load(args)
        generate(args.out, args.n_tumor, args.n_control, args.seed, _ranges_from_args(args, ranges))
    elif args.command == "preprocess":
        cfg, _ = _load(args)
        preprocess(args.src, args.out, cfg)
    elif args.command == "train":
        cfg, _ = _load(args)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        with dataio.workdir_lock(args.out):
            train(args.data, cfg, args.mode, args.out, args.test)
    elif args.command == "evaluate":
        evaluate(args.data, args.checkpoints, args.out, args.all_cases)
    elif args.command == "reproduce":
        cfg, ranges = _load(args)
        if args.epochs is not None:
            cfg = replace(cfg, epochs=args.epochs)
        ranges = _ranges_from_args(args, ranges)
        _, table = reproduce(
            args.workdir, args.seed, cfg, ranges, args.n_tumor, args.n_control, tuple(args.modes),
            args.n_test, figures=not args.no_figures,
        )
        sys.stdout.write(table)
    elif args.command == "import-nifti":
        import_nifti(args)
    elif args.command == "plot-case":
        plot_case_cmd(args)
    else:  # pragma: no cover - argparse enforces the choices
        raise UsageError(f"unknown command {args.command}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        run(args)
    except PancDetectError as exc:
        print(f"pancdetect {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"pancdetect {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
