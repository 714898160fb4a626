"""Alternating critic / segmenter optimisation with per-epoch self-training.

Each step first lifts the critic on detached features, then descends on the
segmenter objective ``L_C + L_S + eta * L_W + mu * L_T`` with the critic held
fixed, and finally commits the centroid banks. Pseudo labels and class
thresholds are refreshed once per epoch after the warm-up epochs. Every
random draw comes from its own seeded stream so that switching a module off
never perturbs the draws of the others.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import centroids as CB
from . import losses
from . import networks as N
from . import pseudo_labels as PL
from . import tensor as T
from . import transfer_gate as G
from .config import Config
from .metrics import EvalReport, iou
from .optim import Adam
from .superpixel import slic
from .tensor import Tensor

LOG_FIELDS = ("step", "L_C", "L_S", "L_W", "L_T", "total", "lr", "n_portion")
STREAMS = {"params": 0, "critic": 1, "source_order": 2, "target_order": 3, "gp": 4}
INFER_BATCH = 25


class TrainingDiverged(FloatingPointError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class EpochPseudo:
    epoch: int
    portion: float
    thresholds: PL.ClassThresholds
    yhat: np.ndarray      # (n, H, W)
    v: np.ndarray         # (n, H, W) after refinement (if enabled)
    v_initial: np.ndarray  # before refinement


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)
    steps: int = 0


class Model:
    """Segmenter and critic parameters plus the forward wiring shared by
    training, evaluation and pseudo-labelling."""

    def __init__(self, cfg: Config, K: int, K_img: int = 2, params=None, critic=None):
        self.cfg = cfg
        self.K, self.K_img = K, K_img
        self.refine = bool(cfg["refine.enabled"])
        if self.refine and K != K_img:
            raise ValueError(f"refine.enabled needs K == K_img ({K} vs {K_img}); disable it for this data")
        self.net_cfg = N.NetConfig(K=K, K_img=K_img, normalize_axis=cfg["attention.normalize_axis"],
                                   refine=self.refine, dtype=cfg["dtype"])
        seed = cfg["seed"]
        self.params = params if params is not None else N.init_segmenter(self.net_cfg, stream(seed, "params"))
        c_in = K if cfg["critic.input"] == "softmax" else self.net_cfg.feat_channels
        self.critic = critic if critic is not None else N.init_critic(c_in, stream(seed, "critic"), cfg["dtype"])
        self.use_gate = bool(cfg["adapt.qt"])

    def critic_fn(self, x: Tensor) -> Tensor:
        return N.critic_forward(x, self.critic)

    def encode(self, images: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(images, dtype=self.net_cfg.dtype))
        fm = N.backbone_forward(x, self.params)
        return N.attention_forward(fm, self.params, self.net_cfg.normalize_axis)

    def heads(self, fo: Tensor, hw, scores: Tensor | None = None):
        """Returns ``(class_probs, penultimate features, pixel probs, W)``."""
        w = None
        f = fo
        if self.use_gate and scores is not None:
            f, w = G.gate(fo, scores, self.cfg["gate.granularity"], self.cfg["gate.detach"])
        cls = N.classifier_forward(fo, self.params)
        feats = N.segmenter_features(f, self.params)
        logits = N.segmenter_logits(feats, self.params, hw)
        logits = N.classification_refine(cls, logits, self.refine)
        return cls, feats, T.softmax(logits, axis=-1), w

    def predict(self, images: np.ndarray) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), INFER_BATCH):
                batch = images[i:i + INFER_BATCH]
                fo = self.encode(batch)
                scores = self.critic_fn(fo) if self.use_gate else None
                out.append(self.heads(fo, batch.shape[1:3], scores)[2].data)
        return np.concatenate(out).astype(np.float64)

    def evaluate(self, images: np.ndarray, seg: np.ndarray) -> EvalReport:
        pred = np.argmax(self.predict(images), axis=-1)
        rep = iou(pred, seg, self.K)
        rep.config_digest = self.cfg.digest()
        rep.seeds = [self.cfg["seed"]]
        return rep

    def save(self, path) -> None:
        named = {f"net/{k}": v.data for k, v in self.params.items()}
        named.update({f"critic/{k}": v.data for k, v in self.critic.items()})
        from .io_formats import save_checkpoint
        save_checkpoint(path, named)

    @classmethod
    def load(cls, path, cfg: Config, K: int, K_img: int = 2) -> "Model":
        from .io_formats import load_checkpoint
        raw = load_checkpoint(path)
        dt = cfg["dtype"]
        net = {k[4:]: Tensor(v.astype(dt), requires_grad=True) for k, v in raw.items() if k.startswith("net/")}
        crit = {k[7:]: Tensor(v.astype(dt), requires_grad=True) for k, v in raw.items() if k.startswith("critic/")}
        return cls(cfg, K, K_img, net, crit)


def _f64(x: Tensor) -> Tensor:
    return T.astype(x, np.float64)


class Trainer:
    def __init__(self, cfg: Config, data: dict, rundir: str | None = None, reference: bool = False,
                 K: int | None = None):
        self.cfg = cfg
        self.src = data[("source", "train")]
        self.tgt = data[("target", "train")]
        self.K = K or int(max(self.src.seg.max(), 1)) + 1
        self.model = Model(cfg, self.K)
        self.rundir = rundir
        self.reference = reference
        self.opt = Adam(self.model.params, cfg["lr"], decay_rate=cfg["lr_decay_rate"],
                        decay_every=cfg["lr_decay_step"], clip_norm=cfg["clip_norm"] or None)
        self.critic_opt = Adam(self.model.critic, cfg["critic.lr"], decay_rate=cfg["lr_decay_rate"],
                               decay_every=cfg["lr_decay_step"], clip_norm=cfg["clip_norm"] or None)
        self.src_order = stream(cfg["seed"], "source_order")
        self.tgt_order = stream(cfg["seed"], "target_order")
        self.gp_rng = stream(cfg["seed"], "gp")
        D = N.ASPP_BRANCH * len(N.DILATIONS)
        self.banks = {d: CB.CentroidBank(self.K, D, cfg["gamma"], np.dtype(cfg["dtype"])) for d in ("source", "target")}
        self.superpixels = None
        self.pseudo: EpochPseudo | None = None
        self.result = TrainResult()
        self._tgt_queue: list[int] = []
        self._bank_rows = 0

    # -- switches ---------------------------------------------------------
    def _on(self, key: str) -> bool:
        return bool(self.cfg[f"adapt.{key}"]) and not self.reference

    @property
    def needs_pseudo(self) -> bool:
        return self._on("pl") or self._on("srt")

    @property
    def trains_critic(self) -> bool:
        return self._on("al") or self._on("qt")

    @property
    def needs_target(self) -> bool:
        return self.trains_critic or self.needs_pseudo or self._on("target_cls")

    # -- pseudo labels ----------------------------------------------------
    def refresh_pseudo_labels(self, epoch: int) -> EpochPseudo:
        cfg = self.cfg
        n = PL.curriculum_portion(epoch - cfg["warmup_epochs"])
        probs = self.model.predict(self.tgt.images)
        sps = None
        if self._on("sp"):
            if self.superpixels is None:
                self.superpixels = [slic(img, cfg["sp.k"], cfg["sp.compactness"], cfg["sp.iters"])
                                    for img in self.tgt.images]
            sps = self.superpixels
        labels, th, initial = PL.generate(list(probs), n, self.K, sps, cfg["pl.class_balanced"],
                                          cfg["pl.weighted"], cfg["refine.inplace"])
        self.pseudo = EpochPseudo(epoch, n, th, np.stack([p.yhat for p in labels]),
                                  np.stack([p.v for p in labels]), np.stack(initial))
        self.result.pseudo.append(self.pseudo)
        if self.rundir:
            PL.write_threshold_report(os.path.join(self.rundir, f"thresholds-epoch{epoch}.csv"), th, labels)
        return self.pseudo

    # -- batching ---------------------------------------------------------
    def _target_batch(self, b: int) -> np.ndarray:
        idx = []
        while len(idx) < b:
            if not self._tgt_queue:
                self._tgt_queue = list(self.tgt_order.permutation(len(self.tgt)))
            idx.append(self._tgt_queue.pop(0))
        return np.asarray(idx)

    # -- steps ------------------------------------------------------------
    def _supervised_step(self, xs, yss, ys_img) -> dict:
        """Source-only step with every adaptation module compiled out."""
        m = self.model
        fo_s = m.encode(xs)
        cls_s, _, prob_s, _ = m.heads(fo_s, xs.shape[1:3])
        L_C = losses.classification_loss(cls_s, ys_img)
        L_S = losses.source_segmentation_loss(prob_s, yss)
        total = T.add(_f64(L_C), _f64(L_S))
        names = self.opt.names
        grads = T.grad(total, [m.params[k] for k in names])
        lr = self.opt.step({k: g.data for k, g in zip(names, grads)})
        return {"L_C": float(_f64(L_C).item()), "L_S": float(_f64(L_S).item()), "L_W": 0.0, "L_T": 0.0,
                "total": float(total.item()), "lr": lr}

    def _critic_step(self, fo_s: Tensor, fo_t: Tensor) -> None:
        m = self.model
        obj, _, _ = losses.wasserstein_critic_objective(m.critic_fn, fo_s, fo_t, self.cfg["xi"],
                                                        self.cfg["gp.mode"], self.gp_rng)
        names = self.critic_opt.names
        grads = T.grad(T.neg(obj), [m.critic[k] for k in names])
        self.critic_opt.step({k: g.data for k, g in zip(names, grads)})

    def _step(self, xs, yss, ys_img, t_idx, srt_active: bool, pl_active: bool) -> dict:
        m, cfg = self.model, self.cfg
        hw = xs.shape[1:3]
        fo_s = m.encode(xs)
        fo_t = None
        if self.needs_target:
            xt = self.tgt.images[t_idx]
            fo_t = m.encode(xt)
        softmax_critic = cfg["critic.input"] == "softmax"

        scores_s = scores_t = None
        if self.trains_critic and not softmax_critic:
            self._critic_step(fo_s, fo_t)
            scores_s, scores_t = m.critic_fn(fo_s), m.critic_fn(fo_t)

        cls_s, feats_s, prob_s, _ = m.heads(fo_s, hw, scores_s)
        L_C = losses.classification_loss(cls_s, ys_img)
        if fo_t is not None:
            cls_t, feats_t, prob_t, _ = m.heads(fo_t, hw, scores_t)
            if self._on("target_cls"):
                L_C = losses.classification_loss(cls_s, ys_img, cls_t, self.tgt.image_labels[t_idx])

        if self.trains_critic and softmax_critic:
            self._critic_step(prob_s, prob_t)
            scores_s, scores_t = m.critic_fn(prob_s), m.critic_fn(prob_t)

        L_S = losses.source_segmentation_loss(prob_s, yss)
        if pl_active:
            p = self.pseudo
            L_S = T.add(L_S, losses.target_segmentation_loss(prob_t, p.yhat[t_idx], p.v[t_idx],
                                                             p.thresholds.lam, cfg["pl.weighted"]))
        total = T.add(_f64(L_C), _f64(L_S))
        out = {"L_C": float(_f64(L_C).item()), "L_S": float(_f64(L_S).item()), "L_W": 0.0, "L_T": 0.0}

        if self._on("al"):
            L_W = T.sub(T.mean(losses.sample_scores(lambda x: x, scores_s)),
                        T.mean(losses.sample_scores(lambda x: x, scores_t)))
            total = T.add(total, T.mul(_f64(L_W), float(cfg["eta"])))
            out["L_W"] = float(_f64(L_W).item())

        cands = None
        if srt_active:
            grid = feats_s.shape[1:3]
            lab_s = T.resize_labels(yss, grid)
            p = self.pseudo
            lab_t = T.resize_labels(np.where(p.v[t_idx] == 1, p.yhat[t_idx], -1), grid)
            norm = cfg["centroid.normalize"]
            if cfg["centroid.features"] == "unit":
                feats_s, feats_t = CB.unit_features(feats_s), CB.unit_features(feats_t)
            cs = self.banks["source"].candidate(CB.batch_centroids(feats_s, lab_s, self.K, norm))
            ct = self.banks["target"].candidate(CB.batch_centroids(feats_t, lab_t, self.K, norm))
            L_T = CB.consistence_loss(cs, ct, cfg["alpha"], cfg["centroid.absent"])
            total = T.add(total, T.mul(_f64(L_T), float(cfg["mu"])))
            out["L_T"] = float(_f64(L_T).item())
            cands = (cs, ct)

        names = self.opt.names
        grads = T.grad(total, [m.params[k] for k in names])
        out["lr"] = self.opt.step({k: g.data for k, g in zip(names, grads)})
        out["total"] = float(total.item())
        if cands is not None:
            self.banks["source"].commit(cands[0])
            self.banks["target"].commit(cands[1])
        return out

    # -- driver -----------------------------------------------------------
    def fit(self) -> TrainResult:
        cfg = self.cfg
        B = cfg["batch_size"]
        step = 0
        for epoch in range(cfg["epochs"]):
            adapt_epoch = epoch >= cfg["warmup_epochs"]
            if adapt_epoch and self.needs_pseudo:
                self.refresh_pseudo_labels(epoch)
            n_portion = self.pseudo.portion if (adapt_epoch and self.pseudo is not None) else 0.0
            order = self.src_order.permutation(len(self.src))
            for i in range(len(order) // B):
                idx = order[i * B:(i + 1) * B]
                xs, yss, yimg = self.src.images[idx], self.src.seg[idx], self.src.image_labels[idx]
                try:
                    if self.reference:
                        row = self._supervised_step(xs, yss, yimg)
                    else:
                        t_idx = self._target_batch(B) if self.needs_target else None
                        row = self._step(xs, yss, yimg, t_idx, adapt_epoch and self._on("srt"),
                                         adapt_epoch and self._on("pl"))
                except FloatingPointError as exc:
                    self._dump(step, epoch, exc)
                    raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
                row.update(step=step, n_portion=n_portion)
                self.result.log.append(row)
                step += 1
                if cfg["checkpoint_every"] and self.rundir and step % cfg["checkpoint_every"] == 0:
                    self.model.save(os.path.join(self.rundir, f"step{step}.ckpt"))
            if self.rundir and self._on("srt"):
                CB.append_norms_csv(os.path.join(self.rundir, "centroids.csv"), epoch, self.banks,
                                    header=self._bank_rows == 0)
                self._bank_rows += 1
        self.result.steps = step
        if self.rundir:
            self.write_outputs()
        return self.result

    def _dump(self, step: int, epoch: int, exc: Exception) -> None:
        if not self.rundir:
            return
        with open(os.path.join(self.rundir, "nan-dump.txt"), "w") as fh:
            fh.write(f"step = {step}\nepoch = {epoch}\nerror = {exc}\n")
            for k, p in sorted(self.model.params.items()):
                fh.write(f"param {k} finite={bool(np.all(np.isfinite(p.data)))} "
                         f"absmax={float(np.nanmax(np.abs(p.data)))}\n")
            if self.result.log:
                fh.write(f"last_log = {self.result.log[-1]}\n")

    def log_csv(self) -> str:
        return format_log(self.result.log)

    def write_outputs(self) -> None:
        with open(os.path.join(self.rundir, "train-log.csv"), "w", newline="") as fh:
            fh.write(self.log_csv())
        with open(os.path.join(self.rundir, "resolved-config.txt"), "w") as fh:
            fh.write(self.cfg.resolved())
        self.model.save(os.path.join(self.rundir, "model.ckpt"))
        for name, bank in self.banks.items():
            bank.save(os.path.join(self.rundir, f"centroids-{name}.ten"))


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def recompose(row: dict, eta: float, mu: float) -> float:
    return row["L_C"] + row["L_S"] + eta * row["L_W"] + mu * row["L_T"]
