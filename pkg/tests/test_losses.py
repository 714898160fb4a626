import numpy as np
import pytest

from lesiontransfer import losses as L
from lesiontransfer import networks as N
from lesiontransfer import tensor as T
from lesiontransfer.optim import Adam
from lesiontransfer.tensor import ShapeError, Tensor


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def linear_critic(w):
    wt = Tensor(np.asarray(w, dtype=np.float64))

    def critic(x):
        flat = T.reshape(x, (x.shape[0], -1))
        return T.reshape(T.matmul(flat, T.reshape(wt, (-1, 1))), (x.shape[0], 1, 1, 1))
    return critic


def test_cross_entropy_oracle():
    rng = np.random.default_rng(0)
    p = softmax(rng.normal(size=(5, 3)))
    y = rng.integers(0, 3, 5)
    ce = L.cross_entropy(Tensor(p), np.eye(3)[y]).data
    assert np.allclose(ce, [-np.log(p[i, y[i]]) for i in range(5)])
    with pytest.raises(ShapeError):
        L.cross_entropy(Tensor(p), np.ones((5, 2)))
    zero = L.cross_entropy(Tensor(np.array([[1.0, 0.0]])), np.array([[0.0, 1.0]])).data
    assert np.isfinite(zero).all() and np.isclose(zero[0], -np.log(1e-12))


def test_classification_loss_sums_domain_means():
    rng = np.random.default_rng(1)
    ps, pt = softmax(rng.normal(size=(4, 2))), softmax(rng.normal(size=(3, 2)))
    ys, yt = rng.integers(0, 2, 4), rng.integers(0, 2, 3)
    a = L.classification_loss(Tensor(ps), ys).item()
    b = L.classification_loss(Tensor(ps), ys, Tensor(pt), yt).item()
    ref_s = np.mean([-np.log(ps[i, ys[i]]) for i in range(4)])
    ref_t = np.mean([-np.log(pt[i, yt[i]]) for i in range(3)])
    assert np.isclose(a, ref_s) and np.isclose(b, ref_s + ref_t)


def test_target_segmentation_loss_oracle():
    rng = np.random.default_rng(2)
    prob = softmax(rng.normal(size=(2, 4, 4, 3)) * 2)
    yhat = prob.argmax(-1)
    v = (rng.random((2, 4, 4)) < 0.5).astype(np.uint8)
    lam = np.array([0.1, 0.2, 0.05])
    got = L.target_segmentation_loss(Tensor(prob), yhat, v, lam).item()
    mx = prob.max(-1)
    ref = np.mean(mx * v * -np.log(mx) - lam[yhat] * v)
    assert np.isclose(got, ref)
    assert np.isclose(L.target_term_value(mx, v, lam[yhat]), ref)
    unweighted = L.target_segmentation_loss(Tensor(prob), yhat, v, lam, weighted=False).item()
    assert np.isclose(unweighted, np.mean(v * -np.log(mx) - lam[yhat] * v))
    none = L.target_segmentation_loss(Tensor(prob), yhat, np.zeros_like(v), lam).item()
    assert none == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_segmentation_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(1, 3, 3, 3))
    y = rng.integers(0, 3, (1, 3, 3))
    zt = rng.normal(size=(1, 3, 3, 3))
    yhat = softmax(zt).argmax(-1)
    v = (rng.random((1, 3, 3)) < 0.6).astype(np.uint8)
    lam = rng.uniform(0, 0.5, 3)

    def f(logits):
        return L.segmentation_loss(T.softmax(logits, -1), y, T.softmax(Tensor(zt), -1), (yhat, v), lam)

    def g(logits):
        return L.target_segmentation_loss(T.softmax(logits, -1), yhat, v, lam)

    mx0 = softmax(zt).max(-1)  # p_b is a constant of the loss, frozen at the base point

    def g_ref(logits):
        p = softmax(logits.data)
        py = np.take_along_axis(p, yhat[..., None], -1)[..., 0]
        return Tensor(np.array(np.mean(mx0 * v * -np.log(py) - lam[yhat] * v)))

    assert T.finite_diff_check(f, z) <= 1e-6
    assert T.finite_diff_check(g, zt, f_ref=g_ref) <= 1e-6


@pytest.mark.parametrize("w", [[1.0, 0.0, 0.0, 0.0], [0.6, 0.8, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5]])
def test_unit_linear_critic_has_zero_penalty(w):
    rng = np.random.default_rng(3)
    fs = Tensor(rng.normal(size=(3, 1, 1, 4)))
    ft = Tensor(rng.normal(size=(3, 1, 1, 4)))
    critic = linear_critic(w)
    assert L.gradient_penalty(critic, fs, ft).item() == 0.0
    assert L.gradient_penalty(critic, fs, ft, "interpolated", np.random.default_rng(0)).item() == 0.0
    obj, gap, pen = L.wasserstein_critic_objective(critic, fs, ft, 10.0)
    assert pen.item() == 0.0 and obj.item() == gap.item()


def test_penalty_value_for_scaled_critic():
    fs = Tensor(np.ones((2, 1, 1, 2)))
    pen = L.gradient_penalty(linear_critic([3.0, 4.0]), fs, fs).item()
    assert np.isclose(pen, 2 * 16.0)  # (5 - 1)^2 per domain
    with pytest.raises(ValueError):
        L.gradient_penalty(linear_critic([1.0, 0.0]), fs, fs, "mixed")


def test_gap_matches_score_means():
    rng = np.random.default_rng(4)
    fs, ft = Tensor(rng.normal(size=(2, 1, 1, 3))), Tensor(rng.normal(size=(4, 1, 1, 3)))
    w = np.array([0.2, -0.4, 0.1])
    gap = L.wasserstein_gap(linear_critic(w), fs, ft).item()
    ref = (fs.data.reshape(2, 3) @ w).mean() - (ft.data.reshape(4, 3) @ w).mean()
    assert np.isclose(gap, ref)
    obj, _, pen = L.wasserstein_critic_objective(linear_critic(w), fs, ft, 0.0)
    assert pen.item() == 0.0 and np.isclose(obj.item(), ref)


def small_critic(w1, w2, act="smooth"):
    def critic(x):
        pre = T.conv2d(x, w1)
        h = T.sigmoid(pre) if act == "smooth" else T.leaky_relu(pre, 0.2)
        return T.sigmoid(T.conv2d(h, w2))
    return critic


def _penalty_case(seed):
    rng = np.random.default_rng(seed)
    w1 = rng.normal(size=(3, 3, 2, 3)) * 0.5
    w2 = Tensor(rng.normal(size=(1, 1, 3, 1)))
    fs = Tensor(rng.normal(size=(2, 4, 4, 2)))
    ft = Tensor(rng.normal(size=(2, 4, 4, 2)))
    return w1, w2, fs, ft


def richardson_rel_error(f, x, h=1e-3):
    """Max relative error of the analytic gradient against fourth-order differences."""
    xt = Tensor(x.copy(), requires_grad=True)
    (analytic,) = T.grad(f(xt), [xt])
    numeric = np.zeros_like(x)
    for i in range(x.size):
        def at(d):
            y = x.copy()
            y.reshape(-1)[i] += d
            return f(Tensor(y)).item()
        numeric.reshape(-1)[i] = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
    a = analytic.data
    return float(np.max(np.abs(a - numeric) / np.maximum(1e-12, np.abs(a) + np.abs(numeric))))


def _check_penalty_grad(w1, w2, fs, ft, act, h=1e-3):
    for mode in ("aswritten", "interpolated"):
        f = lambda w: L.wasserstein_critic_objective(small_critic(w, w2, act), fs, ft, 10.0, mode,
                                                     np.random.default_rng(1))[0]
        # plain central differences leave ~1e-6 relative noise on the smallest entries
        assert richardson_rel_error(f, w1, h) <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_penalty_gradient_wrt_critic_weights(seed):
    _check_penalty_grad(*_penalty_case(seed), "smooth")


def _min_preactivation(w1, fs, ft):
    # the interpolated points replay the objective's rng(1) draw
    xs = [fs.data, ft.data]
    eps = np.random.default_rng(1).random((2, 1, 1, 1))
    xs.append(eps * fs.data + (1 - eps) * ft.data)
    return min(np.abs(T.conv2d(Tensor(x), Tensor(w1)).data).min() for x in xs)


def test_penalty_gradient_through_leaky_relu_away_from_kinks():
    # finite differences are only meaningful where no pre-activation crosses zero within eps
    checked = 0
    for seed in range(200):
        w1, w2, fs, ft = _penalty_case(seed)
        margin = _min_preactivation(w1, fs, ft)
        if margin < 1e-3:
            continue
        # a weight step of 2h moves any pre-activation by at most 2h * max|x| = margin / 2
        xmax = max(np.abs(fs.data).max(), np.abs(ft.data).max())
        _check_penalty_grad(w1, w2, fs, ft, "leaky", h=margin / (4 * xmax))
        checked += 1
        if checked == 5:
            break
    assert checked == 5


@pytest.mark.parametrize("mode,lr,seed", [("interpolated", 1e-4, s) for s in range(3)]
                         + [("aswritten", 3e-5, s) for s in range(3)])
def test_critic_ascent_on_separated_gaussians(mode, lr, seed):
    rng = np.random.default_rng(seed)
    crit = N.init_critic(4, np.random.default_rng(6), "float64")
    opt = Adam(crit, lr=lr, clip_norm=None)
    names = opt.names
    gaps = []
    fn = lambda x: N.critic_forward(x, crit)
    for step in range(200):
        fs = Tensor(rng.normal(size=(4, 8, 8, 4)) + 1.0)
        ft = Tensor(rng.normal(size=(4, 8, 8, 4)) - 1.0)
        obj, gap, _ = L.wasserstein_critic_objective(fn, fs, ft, 10.0, mode, rng)
        gaps.append(gap.item())
        grads = T.grad(T.neg(obj), [crit[k] for k in names])
        opt.step({k: g.data for k, g in zip(names, grads)})
    smooth = np.convolve(gaps, np.ones(25) / 25, mode="valid")
    chunks = smooth[::25]
    assert gaps[0] == 0.0  # zero-initialised final layer
    assert np.all(np.diff(chunks) > 0)
    assert smooth[-1] > smooth[0] + 0.05


def test_classification_examples():
    one = L.classification_loss(Tensor(np.array([[0.0, 1.0]])), np.array([1])).item()
    half = L.classification_loss(Tensor(np.array([[0.5, 0.5]])), np.array([0])).item()
    pair = L.classification_loss(Tensor(np.array([[0.0, 1.0], [0.5, 0.5]])), np.array([1, 1])).item()
    assert one == 0.0
    assert np.isclose(half, 0.6931, atol=1e-4) and np.isclose(pair, 0.3466, atol=1e-4)


def test_single_pixel_target_term():
    prob = Tensor(np.array([[[[0.9, 0.1]]]]))
    got = L.target_segmentation_loss(prob, np.zeros((1, 1, 1), np.int64), np.ones((1, 1, 1)),
                                     np.array([0.1, 0.5])).item()
    assert np.isclose(got, 0.9 * 0.10536 - 0.1, atol=1e-5) and np.isclose(got, -0.00518, atol=1e-5)


def test_perfect_source_and_empty_selection_is_zero():
    y = np.array([[[0, 1]]])
    prob = Tensor(np.eye(2)[y])
    assert L.source_segmentation_loss(prob, y).item() == 0.0
    loss = L.segmentation_loss(prob, y, prob, (y, np.zeros_like(y)), np.array([0.1, 0.1]))
    assert loss.item() == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_selected_v_minimises_target_term(seed):
    # the selection rule p_b * (-log Mx) < lambda is the pointwise minimiser over binary v
    from lesiontransfer.pseudo_labels import ClassThresholds, select_weights
    rng = np.random.default_rng(seed)
    prob = softmax(rng.normal(size=(4, 4, 3)) * 2)
    lam = rng.uniform(0.05, 0.6, 3)
    sel = select_weights(prob, ClassThresholds(lam, 0.25))
    mx = prob.max(-1)
    best = L.target_term_value(mx, sel.v, lam[sel.yhat])
    for _ in range(50):
        other = (rng.random((4, 4)) < 0.5).astype(np.uint8)
        assert best <= L.target_term_value(mx, other, lam[sel.yhat]) + 1e-15


def test_constant_critic_and_score_arithmetic():
    const = lambda x: T.add(T.scale(T.sum_(x, axis=(1, 2, 3), keepdims=True), 0.0), 0.4)
    fs, ft = Tensor(np.ones((2, 1, 1, 2))), Tensor(-np.ones((3, 1, 1, 2)))
    assert L.wasserstein_gap(const, fs, ft).item() == 0.0
    # scores 0.8 on the source point and 0.3 on the target point, xi = 0
    score = linear_critic([0.5, 0.3])
    obj, gap, _ = L.wasserstein_critic_objective(score, Tensor(np.array([[[[1.0, 1.0]]]])),
                                                 Tensor(np.array([[[[0.6, 0.0]]]])), 0.0)
    assert np.isclose(gap.item(), 0.5) and np.isclose(obj.item(), 0.5)
