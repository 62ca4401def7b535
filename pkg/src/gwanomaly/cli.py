"""Command-line entry point: ``gwanomaly gen | augment | train | eval | predict``.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for data,
format or numerical errors. Settings come from ``--config`` (flat
``key = value`` file), then the ``GW_SEED`` environment variable, then
``--seed`` / ``--set key=value`` flags, with the last one winning.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .augment import augment_class
from .dataio import (CLASS_LABELS, CLASS_NAMES, SAMPLE_SHAPE, LabeledDataset, ManifestEntry, SplitSpec,
                     generate_synthetic, load_manifest, read_gwad, read_manifest, split, standardize, write_gwad,
                     write_manifest)
from .errors import ConfigError, GWError, ShapeError
from .model import load_checkpoint
from .runs import RunConfig, load_run_config, parse_overrides, train_run, write_run_record
from .seeding import derive_seed
from .trainer import evaluate

log = logging.getLogger("gwanomaly")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this project reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = load_run_config(args.config, overrides, os.environ.get("GW_SEED"))
    log.info("resolved config:\n%s", cfg.to_text().rstrip())
    return cfg


def _dump_config(cfg: RunConfig, path: Path) -> Path:
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, raw = generate_synthetic(cfg.synth())
    entries, files = [], []
    for name in CLASS_NAMES:
        path = write_gwad(out / f"{name}.gwad", raw[name])
        entries.append(ManifestEntry(name, path, CLASS_LABELS[name]))
        files.append(path)
    manifest = write_manifest(out / "manifest.tsv", entries)
    files += [manifest, _dump_config(cfg, out / "config.txt")]
    write_run_record(out / "run.json", "gen", cfg, outputs=files)
    print(f"wrote {len(entries)} class files and {manifest}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _config(args)
    plan = cfg.augment()
    ratio = cfg.augment_ratio
    entries = read_manifest(args.in_manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    new_entries, files = [], []
    for e in entries:
        x = read_gwad(e.path)
        if x.size == 0:
            x = x.reshape((0,) + SAMPLE_SHAPE)
        seed = derive_seed(plan.seed, f"augment.{e.class_name}")
        if ratio is None:
            sub = type(plan)(plan.n_values, plan.count_per_n, seed, plan.include_originals)
        else:
            sub = type(plan).from_total(round(ratio * len(x)), plan.n_values, seed=seed,
                                        include_originals=plan.include_originals)
        aug = augment_class(x, sub, label=e.label).x
        rows = np.concatenate([x, aug]) if plan.include_originals else aug
        path = write_gwad(out / f"{e.class_name}.gwad", rows)
        new_entries.append(ManifestEntry(e.class_name, path, e.label))
        files.append(path)
        print(f"{e.class_name}: {len(x)} originals, {len(aug)} augmented, {len(rows)} written")
    manifest = write_manifest(out / "manifest.tsv", new_entries)
    files += [manifest, _dump_config(cfg, out / "config.txt")]
    write_run_record(out / "run.json", "augment", cfg,
                     inputs=[Path(args.in_manifest)] + [e.path for e in entries], outputs=files)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    entries = read_manifest(args.manifest)
    dataset = load_manifest(args.manifest)
    if len(set(dataset.y.tolist())) < 2:
        raise ConfigError("training needs both labels present in the manifest")
    ckpt_path = Path(args.out)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else ckpt_path.with_suffix(".history.csv")
    ckpt, history, _ = train_run(dataset, cfg, ckpt_path, history_path, args.max_epochs)
    config_path = _dump_config(cfg, ckpt_path.with_suffix(".config.txt"))
    write_run_record(ckpt_path.with_suffix(".run.json"), "train", cfg,
                     inputs=[Path(args.manifest)] + [e.path for e in entries],
                     outputs=[ckpt_path, history_path, config_path])
    last = history.records[-1] if history.records else None
    print(f"trained {len(history)} epochs; best epoch {ckpt.epoch}, best val loss {ckpt.best_val_loss:.6g}")
    if last is not None:
        print(f"last epoch: train_loss={last.train_loss:.6g} val_loss={last.val_loss:.6g} val_acc={last.val_acc:.4f}")
    return EXIT_OK


def _checkpoint_and_config(args):
    ckpt = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None) or getattr(args, "set", None):
        cfg = _config(args)
        want = cfg.model().to_dict() | {"seed": 0}
        if want != ckpt.config.to_dict() | {"seed": 0}:
            raise ConfigError("checkpoint model configuration does not match the given config")
    return ckpt


def _prep_inputs(x: np.ndarray, ckpt) -> np.ndarray:
    return standardize(x) if ckpt.meta.get("standardize") else x


def cmd_eval(args) -> int:
    ckpt = _checkpoint_and_config(args)
    dataset = load_manifest(args.manifest)
    dataset = LabeledDataset(_prep_inputs(dataset.x, ckpt), dataset.y, dataset.class_names, dataset.class_ids)
    if args.split != "all":
        info = ckpt.meta.get("split")
        if not info:
            raise ConfigError("checkpoint carries no split record; use --split all")
        parts = dict(zip(("train", "val", "test"), split(dataset, SplitSpec(**info))))
        dataset = parts[args.split]
    model = ckpt.to_model()
    both = len(set(dataset.y.tolist())) == 2
    if not both:
        log.warning("only one label present: ROC and AUC omitted")
    report = evaluate(model, dataset, args.threshold, with_roc=both)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.split}"
    report.write(out / f"{stem}.txt", out / f"{stem}_roc.csv" if both else None)
    tp, fp, tn, fn = report.tp, report.fp, report.tn, report.fn
    print(f"n={report.n} threshold={report.threshold}")
    print(f"TP={tp} FP={fp} TN={tn} FN={fn}")
    print(f"TNR={_fmt(report.tnr)} TPR={_fmt(report.tpr)} accuracy={report.accuracy:.6f}")
    if both:
        print(f"AUC={report.auc:.6f} TNR@TPR0.9={report.tnr_at_tpr90:.6f}")
    return EXIT_OK


def _fmt(v):
    return "NA" if v is None else f"{v:.6f}"


def cmd_predict(args) -> int:
    ckpt = _checkpoint_and_config(args)
    x = read_gwad(args.input)
    if x.size == 0 and x.ndim == 3:
        x = x.reshape((0,) + SAMPLE_SHAPE)
    if x.ndim != 3 or x.shape[1:] != SAMPLE_SHAPE:
        raise ShapeError(f"predict expects (N, 200, 2) input, got {x.shape}")
    scores = ckpt.to_model().predict_proba(_prep_inputs(x, ckpt)) if len(x) else np.empty(0)
    lines = ["index,score,label\n"]
    lines += [f"{i},{s:.9g},{int(s > args.threshold)}\n" for i, s in enumerate(scores)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(lines), encoding="utf-8")
    print(f"wrote {len(scores)} predictions to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gwanomaly", description="Residual-difference CNN anomaly detection on 200x2 strain windows.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            sp.add_argument("--seed", type=int, help="root seed (overrides GW_SEED and the config)")

    g = sub.add_parser("gen", help="generate the synthetic dataset")
    common(g)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("augment", help="averaging augmentation of every class file")
    common(a)
    a.add_argument("--in-manifest", required=True)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_augment)

    t = sub.add_parser("train", help="split, optionally augment, train and checkpoint")
    common(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV path (default: next to the checkpoint)")
    t.add_argument("--max-epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--out-dir", help="where report files go (default: checkpoint folder)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score every sample of a GWAD file")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GWError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
