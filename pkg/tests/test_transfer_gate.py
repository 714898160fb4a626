import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesiontransfer import tensor as T
from lesiontransfer import transfer_gate as G
from lesiontransfer.tensor import ShapeError, Tensor


def test_entropy_points():
    assert G.entropy_bits(0.5) == 1.0
    assert G.entropy_bits(0.0) == 0.0 and G.entropy_bits(1.0) == 0.0
    assert np.isclose(G.entropy_bits(0.25), 0.811278, atol=1e-6)
    with pytest.raises(ValueError):
        G.entropy_bits(1.2)
    with pytest.raises(ValueError):
        G.bernoulli_entropy(Tensor(np.array([-0.1])))


def test_w_at_half_and_extremes():
    s = Tensor(np.array([0.5, 0.0, 1.0, 1e-9, 1 - 1e-9]).reshape(1, 5, 1, 1))
    w = G.quantify(s).data.reshape(-1)
    assert w[0] == 0.0
    assert w[1] == 1.0 and w[2] == 1.0
    assert w[3] > 1 - 1e-6 and w[4] > 1 - 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_range_and_amplification(seed):
    rng = np.random.default_rng(seed)
    scores = Tensor(rng.random((2, 2, 2, 1)))
    fo = Tensor(rng.normal(size=(2, 8, 8, 5)))
    fw, w = G.gate(fo, scores)
    assert w.shape == (2, 8, 8, 1)
    assert np.all((w.data >= 0) & (w.data <= 1))
    assert np.all(np.abs(fw.data) >= np.abs(fo.data))
    assert np.all(np.abs(fw.data) <= 2 * np.abs(fo.data) + 1e-12)
    ref = 1 - G.entropy_bits(scores.data)
    assert np.allclose(G.quantify(scores).data, ref, atol=1e-12)


def test_image_granularity_is_constant_per_sample():
    rng = np.random.default_rng(1)
    scores = Tensor(rng.random((3, 2, 2, 1)))
    w = G.quantify(scores, (4, 4), "image").data
    for i in range(3):
        assert np.allclose(w[i], w[i, 0, 0, 0])
        assert np.isclose(w[i, 0, 0, 0], 1 - G.entropy_bits(scores.data[i].mean()))
    with pytest.raises(ValueError):
        G.quantify(scores, granularity="pixel")


def test_gate_shape_error():
    with pytest.raises(ShapeError):
        G.apply_gate(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((1, 4, 3, 1))))


@pytest.mark.parametrize("seed", range(20))
def test_gate_gradients(seed):
    rng = np.random.default_rng(seed)
    fo = rng.normal(size=(1, 4, 4, 3))
    scores = rng.uniform(0.05, 0.95, size=(1, 2, 2, 1))
    wts = Tensor(rng.normal(size=(1, 4, 4, 3)))
    f_fo = lambda x: T.sum_(T.mul(G.gate(x, Tensor(scores), detach=False)[0], wts))
    f_sc = lambda s: T.sum_(T.mul(G.gate(Tensor(fo), s, detach=False)[0], wts))
    assert T.finite_diff_check(f_fo, fo) <= 1e-6
    assert T.finite_diff_check(f_sc, scores) <= 1e-6


def test_detach_blocks_score_gradient():
    rng = np.random.default_rng(2)
    s = Tensor(rng.uniform(0.1, 0.9, (1, 2, 2, 1)), requires_grad=True)
    fo = Tensor(rng.normal(size=(1, 4, 4, 2)), requires_grad=True)
    fw, _ = G.gate(fo, s, detach=True)
    g_s, g_f = T.grad(T.sum_(fw), [s, fo])
    assert not g_s.data.any() and g_f.data.any()
