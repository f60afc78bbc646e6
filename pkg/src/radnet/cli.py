"""Command-line entry point: ``radnet <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .checks import format_results, gradcheck_suite, selftest
from .dataset import Case, read_dataset, write_dataset
from .errors import ConfigError, DataError, DivergenceError, FormatError, KindError, ShapeError, UsageError
from .evaluate import (TRUTH_HEADER, benchmark_report, ct_predictions, format_report, predict_volume,
                       read_labels_csv, read_slice_predictions, write_report, write_slice_predictions)
from .io import write_volume
from .phantom import generate_phantom
from .preprocess import Volume, preprocess_volume
from .trainer import load_checkpoint, model_input, save_checkpoint, train, write_log

log = logging.getLogger("radnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3, 4
COMMANDS = ("phantom-gen", "preprocess", "train", "predict", "evaluate", "gradcheck", "selftest")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _sidecar(out: Path, cfg: dict) -> None:
    Path(str(out) + ".config.json").write_text(C.dump_config(cfg) + "\n", encoding="utf-8")


def cmd_phantom_gen(args, cfg) -> int:
    _require(args, "out")
    spec = C.phantom_spec(cfg)
    cases = generate_phantom(spec)
    write_dataset(cases, args.out)
    n_pos = sum(c.ct_label for c in cases)
    print(f"wrote {len(cases)} volumes ({n_pos} positive) to {args.out}")
    return EXIT_OK


def _preprocess_case(case: Case, cfg: dict) -> Case:
    kw = dict(center=cfg["preprocess.window_center"], width=cfg["preprocess.window_width"],
              target_spacing=cfg["preprocess.target_spacing_mm"], fov=cfg["preprocess.fov_mm"])
    image = preprocess_volume(case.volume, **kw)
    mask = preprocess_volume(case.mask, **kw)
    labels = mask.voxels.reshape(mask.dims[0], -1).any(axis=1).astype(np.int64)
    changed = int((labels != case.labels).sum())
    if changed:
        log.warning("%s: %d slice labels changed after mask resampling", case.volume_id, changed)
    mask = Volume(mask.voxels.astype(np.uint8), mask.spacing_mm, "mask")
    return Case(case.volume_id, image, mask, labels, case.ct_label)


def cmd_preprocess(args, cfg) -> int:
    _require(args, "data", "out")
    cases = read_dataset(args.data)
    for c in cases:
        if c.volume.kind != "hu":
            raise KindError(f"{c.volume_id}: preprocess needs hu volumes, got {c.volume.kind!r}")
    out = [_preprocess_case(c, cfg) for c in cases]
    write_dataset(out, args.out)
    print(f"preprocessed {len(out)} volumes into {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    _require(args, "data", "out")
    tcfg, mcfg = C.train_config(cfg), C.model_config(cfg)
    cases = read_dataset(args.data)
    val = read_dataset(cfg["train.val_data"]) if cfg["train.val_data"] else None
    ckpt, rows = train(cases, tcfg, mcfg, val_cases=val)
    out = Path(args.out)
    save_checkpoint(ckpt, out)
    write_log(rows, str(out) + ".log.csv")
    last = rows[-1]
    print(f"trained {len(rows)} epochs; final loss {last['total_loss']:.4f}, "
          f"train_acc {last['train_acc']:.3f}; checkpoint {out}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    _require(args, "ckpt", "data", "out")
    ckpt = load_checkpoint(args.ckpt)
    tcfg = ckpt.train_config
    cases = read_dataset(args.data)
    preds = {}
    for case in cases:
        sp = predict_volume(ckpt.params, ckpt.model_config, model_input(case), tcfg.seq_len, tcfg.stride,
                            threshold=cfg["eval.threshold"], with_seg=args.seg_out is not None)
        preds[case.volume_id] = sp
        if args.seg_out is not None:
            seg_dir = Path(args.seg_out)
            seg_dir.mkdir(parents=True, exist_ok=True)
            for i, logits in enumerate(sp.seg_logits, start=1):
                # sigmoid(z) >= 0.5 exactly when z >= 0
                mask = Volume((logits >= 0).astype(np.uint8), case.volume.spacing_mm, "mask")
                write_volume(mask, seg_dir / f"{case.volume_id}.aux{i}.rvol")
    write_slice_predictions(args.out, preds)
    _sidecar(Path(args.out), {**cfg, "train.seq_len": tcfg.seq_len, "train.seq_stride": tcfg.seq_stride})
    cts = ct_predictions({k: v.preds for k, v in preds.items()}, cfg["eval.min_run"])
    for vid, label in cts.items():
        print(f"{vid}\t{label}")
    return EXIT_OK


def _read_model_predictions(path: str, min_run: int) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first == ",".join(TRUTH_HEADER):
        return read_labels_csv(path)
    return ct_predictions(read_slice_predictions(path), min_run)


def cmd_evaluate(args, cfg) -> int:
    _require(args, "pred", "truth")
    truth = read_labels_csv(args.truth)
    model = _read_model_predictions(args.pred, cfg["eval.min_run"])
    raters = {}
    for path in args.radiologist or []:
        name = Path(path).stem
        if name in raters:
            raise UsageError(f"two radiologist files share the name {name!r}")
        raters[name] = read_labels_csv(path)
    rows = benchmark_report(model, truth, raters)
    print(format_report(rows))
    for r in rows:
        if r.missing:
            print(f"{r.rater}: {len(r.missing)} truth ids without a prediction: {', '.join(r.missing)}")
    if args.out is not None:
        write_report(rows, args.out)
        _sidecar(Path(args.out), cfg)
    return EXIT_OK


def _run_checks(results) -> int:
    print(format_results(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_VERIFY


def cmd_gradcheck(args, cfg) -> int:
    return _run_checks(gradcheck_suite(seed=args.seed or 0))


def cmd_selftest(args, cfg) -> int:
    return _run_checks(selftest(seed=args.seed or 0))


HANDLERS = {
    "phantom-gen": cmd_phantom_gen, "preprocess": cmd_preprocess, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radnet", description="Hemorrhage detection on CT slice sequences.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file of dotted keys, e.g. {\"train.epochs\": 60}")
    p.add_argument("--data", help="dataset directory (manifest.csv, labels.csv, volumes/, masks/)")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--ckpt", help="RCKPT1 checkpoint")
    p.add_argument("--seed", type=int, help="overrides train.seed or phantom.seed")
    p.add_argument("--pred", help="slice-prediction CSV or CT-level volume_id,label CSV")
    p.add_argument("--truth", help="CT-level ground truth CSV")
    p.add_argument("--radiologist", action="append", help="rater CSV (repeatable)")
    p.add_argument("--seg-out", help="directory for thresholded segmentation masks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        overrides = {}
        if args.seed is not None:
            overrides["phantom.seed" if args.command == "phantom-gen" else "train.seed"] = args.seed
        cfg = C.load_config(args.config, overrides)
        log.info("effective config:\n%s", C.dump_config(cfg))
        return HANDLERS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"radnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError, OSError) as exc:
        print(f"radnet: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"radnet: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
