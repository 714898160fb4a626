import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesiontransfer import centroids as CB
from lesiontransfer import tensor as T
from lesiontransfer.tensor import ShapeError, Tensor


def vec(*x):
    return Tensor(np.array(x, dtype=np.float64))


def test_batch_centroid_examples():
    f = Tensor(np.full((1, 2, 2, 3), 1.5))
    c = CB.batch_centroids(f, np.zeros((1, 2, 2), np.int64), 2)
    assert np.array_equal(c[0].data, [1.5, 1.5, 1.5]) and c[1] is None
    f = Tensor(np.tile(np.array([2.0, 0.0]), (1, 2, 2, 1)))
    lab = np.array([[[0, 0], [1, 1]]])
    c = CB.batch_centroids(f, lab, 2)
    assert np.array_equal(c[0].data, [1.0, 0.0])
    pc = CB.batch_centroids(f, lab, 2, "per_class")
    assert np.array_equal(pc[0].data, [2.0, 0.0])
    ign = CB.batch_centroids(f, np.array([[[0, -1], [-1, -1]]]), 2)
    assert np.array_equal(ign[0].data, [0.5, 0.0]) and ign[1] is None
    with pytest.raises(ShapeError):
        CB.batch_centroids(f, np.zeros((1, 2, 3), np.int64), 2)
    with pytest.raises(ValueError):
        CB.batch_centroids(f, lab, 2, "median")


def test_batch_centroid_oracle():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(2, 4, 4, 5))
    lab = rng.integers(-1, 3, (2, 4, 4))
    c = CB.batch_centroids(Tensor(f), lab, 3)
    for k in range(3):
        ref = np.zeros(5)
        for idx in zip(*np.nonzero(lab == k)):
            ref += f[idx]
        assert np.allclose(c[k].data, ref / lab.size, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_recurrence_equals_closed_form(seed):
    rng = np.random.default_rng(seed)
    gamma, K, D, steps = 0.7, 3, 4, 50
    bank = CB.CentroidBank(K, D, gamma)
    history = []
    for t in range(steps):
        new = [None if rng.random() < 0.2 else rng.normal(size=D) for _ in range(K)]
        history.append(new)
        bank.update(new)
    for k in range(K):
        closed = np.zeros(D)
        for x, new in enumerate(history, 1):
            if new[k] is not None:
                closed += gamma ** (steps - x) * new[k]
        assert np.allclose(bank.C[k], closed, atol=1e-6)
    assert bank.t == steps


def test_geometric_limits():
    c = np.array([1.0, -0.5])
    bank = CB.CentroidBank(1, 2, 0.7)
    bank.update([c])
    assert np.allclose(bank.C[0], c)
    bank.update([c])
    assert np.allclose(bank.C[0], 1.7 * c)
    for _ in range(28):
        bank.update([c])
    assert np.all(np.abs(bank.C[0] - c / 0.3) <= 1e-4)
    zero = CB.CentroidBank(1, 2, 0.0)
    for x in (c, 2 * c, -c):
        zero.update([x])
    assert np.array_equal(zero.C[0], -c)
    with pytest.raises(ValueError):
        CB.CentroidBank(1, 2, 1.0)


def test_absent_class_untouched_until_seen():
    bank = CB.CentroidBank(2, 2, 0.5)
    bank.update([np.ones(2), None])
    assert not bank.present[1] and not bank.C[1].any()
    lst = bank.as_list()
    assert lst[1] is None and np.array_equal(lst[0].data, [1.0, 1.0])
    bank.update([None, None])
    assert np.array_equal(bank.C[0], [0.5, 0.5])


def test_consistence_hand_examples():
    assert CB.consistence_loss([vec(0.3, 1.0)], [vec(0.3, 1.0)]).item() == 0.0
    assert CB.consistence_loss([vec(1.0, 0.0)], [vec(0.0, 1.0)], alpha=1.0).item() == 4.0
    assert CB.consistence_loss([vec(3.0, 4.0)], [vec(0.0, 0.0)], alpha=0.0).item() == 25.0


def test_absent_policies():
    src = [vec(1.0, 1.0), None]
    tgt = [vec(1.0, 1.0), vec(2.0, 0.0)]
    assert CB.consistence_loss(src, tgt).item() == 0.0
    assert CB.consistence_loss(src, tgt, alpha=1.0, absent="zero").item() == 4.0 + 2.0
    assert CB.consistence_loss([None], [None]).item() == 0.0
    with pytest.raises(ValueError):
        CB.consistence_loss(src, tgt, absent="drop")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_loss_nonnegative_and_zero_iff_equal(seed, alpha):
    rng = np.random.default_rng(seed)
    a = [Tensor(rng.normal(size=4)) for _ in range(3)]
    b = [Tensor(x.data + rng.normal(size=4) * 0.1) for x in a]
    assert CB.consistence_loss(a, b, alpha).item() > 0
    assert CB.consistence_loss(a, [Tensor(x.data.copy()) for x in a], alpha).item() == 0.0


def test_l1_subgradient_zero_and_finite():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = CB.consistence_loss([x], [vec(1.0, 0.0)], alpha=1.0)
    (g,) = T.grad(loss, [x])
    assert np.all(np.isfinite(g.data))
    assert g.data[0] == 0.0 and g.data[1] == 2 * 2.0 + 1.0


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_through_current_batch_only(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(1, 3, 3, 4))
    lab = rng.integers(0, 2, (1, 3, 3))
    bank_s, bank_t = CB.CentroidBank(2, 4, 0.7), CB.CentroidBank(2, 4, 0.7)
    bank_s.update([rng.normal(size=4), rng.normal(size=4)])
    bank_t.update([rng.normal(size=4), rng.normal(size=4)])
    tgt = bank_t.candidate(CB.batch_centroids(Tensor(rng.normal(size=(1, 3, 3, 4))), lab, 2))

    def f(x):
        cs = bank_s.candidate(CB.batch_centroids(CB.unit_features(x), lab, 2))
        return CB.consistence_loss(cs, tgt, 0.0)

    assert T.finite_diff_check(f, feats) <= 1e-6
    before = bank_s.C.copy()
    f(Tensor(feats))
    assert np.array_equal(bank_s.C, before)


def test_unit_features():
    f = Tensor(np.array([[[[3.0, 4.0], [0.0, 0.0]]]]))
    u = CB.unit_features(f).data
    assert np.allclose(u[0, 0, 0], [0.6, 0.8]) and np.all(np.isfinite(u)) and not u[0, 0, 1].any()


def test_norms_csv(tmp_path):
    banks = {"source": CB.CentroidBank(2, 3), "target": CB.CentroidBank(2, 3)}
    banks["source"].update([np.array([3.0, 4.0, 0.0]), None])
    p = tmp_path / "c.csv"
    CB.append_norms_csv(p, 0, banks, header=True)
    CB.append_norms_csv(p, 1, banks, header=False)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,domain,class,norm,present"
    assert lines[1] == "0,source,0,5.0,1" and len(lines) == 9
