"""Variant sweeps over seeds, reported as an IoU table."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .metrics import EvalReport
from .trainer import Trainer
from .variants import VARIANTS, apply_variant

COLUMNS = ("variant", "IoU_n", "IoU_d", "mIoU")


@dataclass
class VariantResult:
    variant: str
    reports: list = field(default_factory=list)   # one EvalReport per seed
    seconds: list = field(default_factory=list)

    def pooled(self) -> EvalReport:
        """Seed-averaged per-class IoU (each seed's report weighted equally)."""
        ious = np.array([r.iou for r in self.reports], dtype=np.float64)
        mean_iou = [float(np.nanmean(c)) if np.isfinite(c).any() else float("nan") for c in ious.T]
        mious = [r.miou for r in self.reports]
        cm = sum(r.confusion for r in self.reports)
        return EvalReport(mean_iou, float(np.mean(mious)), cm, self.reports[0].config_digest,
                          [s for r in self.reports for s in r.seeds])


class AblationAborted(RuntimeError):
    def __init__(self, variant: str, partial: list, cause: BaseException):
        super().__init__(f"variant {variant} failed: {cause}")
        self.variant, self.partial = variant, partial


def run_variant(cfg: Config, name: str, data_for_seed, seeds, split: str = "test",
                rundir: str | None = None) -> VariantResult:
    res = VariantResult(name)
    for seed in seeds:
        data = data_for_seed(seed)
        vcfg = apply_variant(cfg, name).with_overrides(seed=int(seed))
        sub = None
        if rundir:
            sub = os.path.join(rundir, name, f"seed{seed}")
            os.makedirs(sub, exist_ok=True)
        t0 = time.perf_counter()
        tr = Trainer(vcfg, data, sub)
        tr.fit()
        tgt = data[("target", split)]
        res.reports.append(tr.model.evaluate(tgt.images, tgt.seg))
        res.seconds.append(time.perf_counter() - t0)
    return res


def run_ablation(cfg: Config, data_for_seed, seeds, variants=None, out_csv: str | None = None,
                 rundir: str | None = None) -> list[VariantResult]:
    """Trains every variant on every seed. A failing run stops the sweep;
    completed variants are still written to ``out_csv`` before re-raising."""
    variants = list(variants or VARIANTS)
    done: list[VariantResult] = []
    for name in variants:
        try:
            done.append(run_variant(cfg, name, data_for_seed, seeds, rundir=rundir))
        except Exception as exc:
            if out_csv:
                write_table(out_csv, done)
            raise AblationAborted(name, done, exc) from exc
    if out_csv:
        write_table(out_csv, done)
    return done


def _pct(x: float) -> str:
    return "nan" if np.isnan(x) else f"{100.0 * x:.2f}"


def format_table(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in results:
        p = r.pooled()
        w.writerow([r.variant, _pct(p.iou_n), _pct(p.iou_d), _pct(p.miou)])
    return buf.getvalue()


def write_table(path: str, results) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_table(results))


def read_table(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

