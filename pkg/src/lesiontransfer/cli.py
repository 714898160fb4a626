"""Command-line entry point: data generation, training, evaluation,
pseudo-label export and ablation sweeps."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import config as C
from . import pseudo_labels as PL
from . import synth_data as S
from .ablation import AblationAborted, read_table, run_ablation
from .io_formats import ensure_dir, write_mask_pgms, write_pgm
from .plots import ablation_bars, loss_curves
from .trainer import Model, Trainer, TrainingDiverged
from .variants import VARIANTS, apply_variant


def synth_config_from(cfg: C.Config) -> S.SynthConfig:
    base = S.shapes_config() if cfg["synth.preset"] == "shapes" else S.default_config()
    return S.with_counts(base, n_source_train=cfg["synth.n_source_train"],
                         n_target_train=cfg["synth.n_target_train"],
                         n_source_test=cfg["synth.n_source_test"],
                         n_target_test=cfg["synth.n_target_test"])


def _load_config(path: str | None) -> C.Config:
    return C.load(path) if path else C.default_config()


def _data_K(root: str) -> int:
    return int(S.read_manifest(root)["K"])


def _report_lines(name: str, rep) -> list[str]:
    per = " ".join(f"IoU_{k}={100 * x:.2f}" for k, x in enumerate(rep.iou))
    return [f"{name}: mIoU={100 * rep.miou:.2f} {per}"]


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    scfg = synth_config_from(cfg)
    data = S.generate(scfg, args.seed)
    S.write_dataset(args.out, data, scfg, args.seed)
    d = S.histogram_distance(data[("source", "train")].images, data[("target", "train")].images)
    print(f"wrote {sum(len(v) for v in data.values())} samples to {args.out} "
          f"(digest {scfg.digest()}, histogram distance {d:.3f})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.epochs is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    data = S.read_dataset(args.data)
    ensure_dir(args.out)
    t0 = time.perf_counter()
    tr = Trainer(cfg, data, args.out, K=_data_K(args.data))
    try:
        tr.fit()
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; see {os.path.join(args.out, 'nan-dump.txt')}", file=sys.stderr)
        return 3
    loss_curves(tr.result.log, os.path.join(args.out, "loss-curves.svg"))
    lines = [f"train seconds: {time.perf_counter() - t0:.1f}"]
    for dm in ("source", "target"):
        ds = data.get((dm, "test"))
        if ds is not None and ds.seg is not None:
            lines += _report_lines(f"{dm}/test", tr.model.evaluate(ds.images, ds.seg))
    with open(os.path.join(args.out, "eval.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _load_model(ckpt: str, data_root: str) -> Model:
    rundir = os.path.dirname(os.path.abspath(ckpt))
    resolved = os.path.join(rundir, "resolved-config.txt")
    if not os.path.exists(resolved):
        raise SystemExit(f"no resolved-config.txt next to {ckpt}")
    cfg = C.load(resolved)
    return Model.load(ckpt, cfg, _data_K(data_root))


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.data)
    rows = []
    for dm in ("source", "target"):
        ds = S.read_split(args.data, dm, args.split)
        if ds.seg is None:
            print(f"{dm}/{args.split}: no pixel labels, skipped")
            continue
        rep = model.evaluate(ds.images, ds.seg)
        print("\n".join(_report_lines(f"{dm}/{args.split}", rep)))
        rows.append([dm, args.split] + [f"{100 * x:.2f}" for x in rep.iou] + [f"{100 * rep.miou:.2f}"])
    if args.csv:
        K = model.K
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["domain", "split"] + [f"IoU_{k}" for k in range(K)] + ["mIoU"])
            w.writerows(rows)
    return 0


def cmd_pseudo_label(args) -> int:
    model = _load_model(args.checkpoint, args.data)
    cfg = model.cfg
    ds = S.read_split(args.data, "target", "train")
    probs = model.predict(ds.images)
    sps = None
    if cfg["adapt.sp"]:
        sps = PL.superpixels_for(ds.images, cfg["sp.k"], cfg["sp.compactness"], cfg["sp.iters"])
    n = PL.curriculum_portion(args.epoch)
    labels, th, _ = PL.generate(list(probs), n, model.K, sps, cfg["pl.class_balanced"],
                                cfg["pl.weighted"], cfg["refine.inplace"])
    ensure_dir(args.out)
    for i, lab in enumerate(labels):
        stem = os.path.join(args.out, f"{i:05d}")
        write_mask_pgms(stem, lab.yhat, lab.v)
        if sps is not None:
            write_pgm(f"{stem}.sp.pgm", sps[i].labels, 65535)
    PL.write_threshold_report(os.path.join(args.out, "thresholds.csv"), th, labels)
    sel = float(np.mean([lab.v.mean() for lab in labels]))
    print(f"portion n={n:.2f}; lambda={np.round(th.lam, 6).tolist()}; selected fraction {sel:.3f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    if args.epochs is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    scfg = synth_config_from(cfg)
    out = ensure_dir(args.out)
    table = os.path.join(out, "ablation.csv")
    try:
        run_ablation(cfg, lambda s: S.generate(scfg, s), seeds, variants, table,
                     os.path.join(out, "runs") if args.keep_runs else None)
    except AblationAborted as exc:
        print(f"{exc}; partial table in {table}", file=sys.stderr)
        return 2
    ablation_bars(read_table(table), os.path.join(out, "ablation-miou.svg"))
    with open(table) as fh:
        print(fh.read(), end="")
    return 0


def cmd_config(args) -> int:
    print(C.documentation(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lesiontransfer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic two-domain dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config")
    t.add_argument("--variant", default="Ours")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="IoU of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=S.SPLITS)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pseudo-label", help="export target pseudo labels for a curriculum epoch")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--epoch", type=int, default=0, help="curriculum epoch (0 gives n = 25%%)")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_pseudo_label)

    a = sub.add_parser("ablate", help="train variants over seeds and tabulate target IoU")
    a.add_argument("--config")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--variants", help="comma list; default all ten table variants")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", default="ablation")
    a.add_argument("--keep-runs", action="store_true", help="write per-run logs and checkpoints")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("config", help="print every config key with its default")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
