import dataclasses as dc
import os

import numpy as np
import pytest

from lesiontransfer import config as C
from lesiontransfer import losses as L
from lesiontransfer import networks as N
from lesiontransfer import synth_data as S
from lesiontransfer import tensor as T
from lesiontransfer.optim import Adam
from lesiontransfer.superpixel import refine_weights
from lesiontransfer.trainer import Trainer, format_log, recompose, stream
from lesiontransfer.variants import apply_variant


@pytest.fixture(scope="module")
def tiny_data():
    cfg = dc.replace(S.default_config(), size=32, n_source_train=8, n_target_train=6,
                     n_source_test=4, n_target_test=4)
    return S.generate(cfg, 0)


def tiny_cfg(variant="Ours", **kw):
    base = C.default_config().with_overrides(epochs=3, warmup_epochs=1, batch_size=2, sp__k=16, sp__iters=3)
    return apply_variant(base, variant).with_overrides(**kw) if kw else apply_variant(base, variant)


def reference_source_only(cfg, data):
    """Plain supervised training written against the network and loss functions directly."""
    src = data[("source", "train")]
    net = N.NetConfig(K=2, K_img=2, normalize_axis=cfg["attention.normalize_axis"],
                      refine=cfg["refine.enabled"], dtype=cfg["dtype"])
    p = N.init_segmenter(net, stream(cfg["seed"], "params"))
    opt = Adam(p, cfg["lr"], decay_rate=cfg["lr_decay_rate"], decay_every=cfg["lr_decay_step"],
               clip_norm=cfg["clip_norm"] or None)
    order_rng = stream(cfg["seed"], "source_order")
    rows, B = [], cfg["batch_size"]
    for _ in range(cfg["epochs"]):
        order = order_rng.permutation(len(src))
        for i in range(len(order) // B):
            idx = order[i * B:(i + 1) * B]
            x = T.Tensor(src.images[idx].astype(cfg["dtype"]))
            f = N.attention_forward(N.backbone_forward(x, p), p, net.normalize_axis)
            cls = N.classifier_forward(f, p)
            logits = N.segmenter_logits(N.segmenter_features(f, p), p, x.shape[1:3])
            prob = T.softmax(N.classification_refine(cls, logits, net.refine), axis=-1)
            lc = T.astype(L.classification_loss(cls, src.image_labels[idx]), np.float64)
            ls = T.astype(L.source_segmentation_loss(prob, src.seg[idx]), np.float64)
            total = T.add(lc, ls)
            grads = T.grad(total, [p[k] for k in opt.names])
            lr = opt.step({k: g.data for k, g in zip(opt.names, grads)})
            rows.append({"step": len(rows), "L_C": lc.item(), "L_S": ls.item(), "L_W": 0.0, "L_T": 0.0,
                         "total": total.item(), "lr": lr, "n_portion": 0.0})
    return rows, p


def test_bl_matches_reference_bit_for_bit(tiny_data):
    cfg = tiny_cfg("BL")
    tr = Trainer(cfg, tiny_data)
    tr.fit()
    ref_rows, ref_params = reference_source_only(cfg, tiny_data)
    assert format_log(tr.result.log) == format_log(ref_rows)
    for k, v in ref_params.items():
        assert tr.model.params[k].data.tobytes() == v.data.tobytes()
    in_class = Trainer(cfg, tiny_data, reference=True)
    in_class.fit()
    assert format_log(in_class.result.log) == format_log(ref_rows)


def test_bl_never_touches_target_or_critic(tiny_data):
    tr = Trainer(tiny_cfg("BL"), tiny_data)
    before = {k: v.data.copy() for k, v in tr.model.critic.items()}
    tr.fit()
    assert not tr.needs_target and not tr.result.pseudo
    assert all(np.array_equal(before[k], v.data) for k, v in tr.model.critic.items())
    assert all(r["L_W"] == 0.0 and r["L_T"] == 0.0 for r in tr.result.log)


@pytest.mark.parametrize("variant", ["Ours", "BL+AL", "BL+PL+SRT+QT"])
def test_objective_recomposes_from_parts(tiny_data, variant):
    cfg = tiny_cfg(variant)
    tr = Trainer(cfg, tiny_data)
    tr.fit()
    for row in tr.result.log:
        assert abs(row["total"] - recompose(row, cfg["eta"], cfg["mu"])) <= 1e-6
    if variant == "Ours":
        assert any(r["L_W"] != 0.0 for r in tr.result.log) and any(r["L_T"] != 0.0 for r in tr.result.log)
        assert [r["n_portion"] for r in tr.result.log][-1] == 0.30


def test_reruns_are_byte_identical(tiny_data, tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        os.makedirs(d)
        Trainer(tiny_cfg("Ours"), tiny_data, str(d)).fit()
        outs.append({f: (d / f).read_bytes() for f in sorted(os.listdir(d))})
    assert outs[0].keys() == outs[1].keys()
    assert {"train-log.csv", "resolved-config.txt", "model.ckpt", "centroids.csv"} <= set(outs[0])
    for f in outs[0]:
        assert outs[0][f] == outs[1][f], f


def test_wosp_differs_only_by_superpixel_voting(tiny_data):
    full = Trainer(tiny_cfg("Ours"), tiny_data)
    full.fit()
    wosp = Trainer(tiny_cfg("Ours-woSP"), tiny_data)
    wosp.fit()
    a, b = full.result.pseudo[0], wosp.result.pseudo[0]
    # identical up to the first refresh: same predictions, thresholds and initial masks
    assert np.array_equal(a.yhat, b.yhat) and np.array_equal(a.thresholds.lam, b.thresholds.lam)
    assert np.array_equal(a.v_initial, b.v_initial)
    assert np.array_equal(b.v, b.v_initial)
    redo = np.stack([refine_weights(v, y, sp, 2) for v, y, sp in zip(a.v_initial, a.yhat, full.superpixels)])
    assert np.array_equal(a.v, redo)
    flipped = a.v != b.v
    assert np.all(a.v[flipped] == 1) and np.all(b.v[flipped] == 0)


def test_critic_and_generator_parameters_disjoint(tiny_data):
    tr = Trainer(tiny_cfg("Ours"), tiny_data)
    m = tr.model
    assert not {id(t) for t in m.params.values()} & {id(t) for t in m.critic.values()}
    gen_before = {k: v.data.copy() for k, v in m.params.items()}
    xs = tiny_data[("source", "train")].images[:2]
    xt = tiny_data[("target", "train")].images[:2]
    tr._critic_step(m.encode(xs), m.encode(xt))
    assert all(np.array_equal(gen_before[k], v.data) for k, v in m.params.items())
    crit_before = {k: v.data.copy() for k, v in m.critic.items()}
    tr._critic_step = lambda *a: None
    src = tiny_data[("source", "train")]
    tr._step(xs, src.seg[:2], src.image_labels[:2], np.array([0, 1]), False, False)
    assert all(np.array_equal(crit_before[k], v.data) for k, v in m.critic.items())
    assert any(not np.array_equal(gen_before[k], v.data) for k, v in m.params.items())


def test_log_csv_header(tiny_data):
    tr = Trainer(tiny_cfg("BL", epochs=1), tiny_data)
    tr.fit()
    lines = tr.log_csv().splitlines()
    assert lines[0] == "step,L_C,L_S,L_W,L_T,total,lr,n_portion" and len(lines) == 1 + 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_writes_dump(tiny_data, tmp_path):
    tr = Trainer(tiny_cfg("BL", lr=1e30, clip_norm=0.0), tiny_data, str(tmp_path))
    from lesiontransfer.trainer import TrainingDiverged
    with pytest.raises(TrainingDiverged):
        tr.fit()
    assert (tmp_path / "nan-dump.txt").read_text().startswith("step = ")
