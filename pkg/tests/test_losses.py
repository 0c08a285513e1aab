import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loraforget import losses as L
from loraforget import ndgrad as nd
from loraforget import nets
from loraforget.ndgrad import Tensor

LN2 = math.log(2)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def bern_bce(p, t):
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


# -- dice_bce ----------------------------------------------------------------

def test_dice_bce_perfect():
    y = (np.random.default_rng(0).random((2, 1, 6, 6)) > 0.5).astype(float)
    assert L.dice_bce(T(np.where(y > 0, 20.0, -20.0)), y).item() < 1e-4


def test_dice_bce_hand_value():
    y = np.ones((1, 1, 4, 4))
    assert L.bce(T(np.zeros_like(y)), y).item() == pytest.approx(LN2, abs=1e-12)
    assert L.soft_dice_loss(T(np.zeros_like(y)), y).item() == pytest.approx(1 - 17 / 25, abs=1e-12)
    assert L.dice_bce(T(np.zeros_like(y)), y).item() == pytest.approx(LN2 + 8 / 25, abs=1e-12)


def test_dice_bce_monotone_toward_target():
    y = (np.random.default_rng(1).random((1, 1, 5, 5)) > 0.5).astype(float)
    sign = np.where(y > 0, 1.0, -1.0)
    values = [L.dice_bce(T(sign * m), y).item() for m in np.linspace(-4, 8, 25)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_dice_bce_errors():
    with pytest.raises(ValueError, match="shape"):
        L.dice_bce(T(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))
    with pytest.raises(ValueError, match="binary"):
        L.dice_bce(T(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))


def test_bce_matches_clamped_formula_inside_range():
    z = np.linspace(-10, 10, 41)
    t = np.random.default_rng(2).random(41)
    p = np.clip(1 / (1 + np.exp(-z)), L.PROB_EPS, 1 - L.PROB_EPS)
    ref = L.bce_elementwise(T(p), t).data
    np.testing.assert_allclose(L.bce_logits_elementwise(T(z), t).data, ref, rtol=1e-9, atol=1e-12)


def test_bce_keeps_gradient_when_saturated():
    z = T(np.array([30.0]), grad=True)
    nd.backward(L.bce(z, np.array([0.0])))
    assert z.grad[0] == pytest.approx(1.0)


# -- kd / guard ----------------------------------------------------------------

def test_kd_identity_and_asymmetry():
    r = np.random.default_rng(3)
    a, b = r.standard_normal((2, 1, 4, 4)), r.standard_normal((2, 1, 4, 4))
    assert L.kd_loss(T(a), T(a)).item() == pytest.approx(0.0, abs=1e-12)
    assert L.kd_loss(T(a), T(b)).item() != pytest.approx(L.kd_loss(T(b), T(a)).item(), rel=1e-6)
    c, d = r.standard_normal((4, 3)), r.standard_normal((4, 3))
    assert L.kd_loss(T(c), T(c), kind="softmax").item() == pytest.approx(0.0, abs=1e-12)
    assert L.kd_loss(T(c), T(d), kind="softmax").item() > 0


def test_kd_scalar_hand_value():
    q = 1 / (1 + math.exp(-2.0))
    kl = 0.5 * math.log(0.5 / q) + 0.5 * math.log(0.5 / (1 - q))
    assert L.kd_loss(T([[0.0]]), T([[4.0]]), 2.0).item() == pytest.approx(4 * kl, rel=1e-12)


def test_kd_softmax_oracle():
    r = np.random.default_rng(4)
    zs, zt = r.standard_normal((5, 3)), r.standard_normal((5, 3))

    def soft(z):
        e = np.exp(z / 2)
        return e / e.sum(axis=1, keepdims=True)

    ps, pt = soft(zs), soft(zt)
    ref = 4 * np.mean(np.sum(ps * np.log(ps / pt), axis=1))
    assert L.kd_loss(T(zs), T(zt), 2.0, "softmax").item() == pytest.approx(ref, rel=1e-12)


def test_kd_rejects_bad_temperature():
    with pytest.raises(ValueError, match="temperature"):
        L.kd_loss(T([1.0]), T([1.0]), 0.0)


def test_guard():
    r = np.random.default_rng(5)
    a, b = r.standard_normal((2, 1, 3, 3)), r.standard_normal((2, 1, 3, 3))
    assert L.guard_loss(T(a), T(a)).item() == 0.0
    assert L.guard_loss(T(a + 1.5), T(a)).item() == pytest.approx(2.25)
    ref = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert L.guard_loss(T(a), T(b)).item() == pytest.approx(ref, rel=1e-12)


# -- forgetting terms ------------------------------------------------------------

def test_forget_background():
    assert L.forget_background(T(np.full((1, 1, 3, 3), -20.0))).item() < 1e-8
    assert L.forget_background(T(np.zeros((1, 1, 3, 3)))).item() == pytest.approx(LN2)
    z = T(np.random.default_rng(6).standard_normal((1, 1, 3, 3)), grad=True)
    nd.backward(L.forget_background(z))
    assert (z.grad > 0).all()  # descent pushes every logit down


def test_flip_loss_identities():
    r = np.random.default_rng(7)
    y = (r.random((2, 1, 4, 4)) > 0.5).astype(float)
    z = r.standard_normal(y.shape) * 3
    assert L.flip_loss(T(z), y).item() == L.bce(T(z), 1 - y).item()
    assert L.flip_loss(T(np.where(y > 0, -20.0, 20.0)), y).item() < 1e-8
    ones = np.ones_like(y)
    assert L.flip_loss(T(z), ones).item() == L.forget_background(T(z)).item()


def test_teacher_contradiction():
    assert L.teacher_contradiction(T(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5)).item() == 0.0
    z = math.log(0.1 / 0.9)
    val = L.teacher_contradiction(T([[z]]), np.array([[0.9]]), 0.8).item()
    assert val == pytest.approx(bern_bce(0.1, 0.1), rel=1e-9)
    pt = np.array([[0.95, 0.03, 0.6]])
    zs = T(np.zeros((1, 3)), grad=True)
    nd.backward(L.teacher_contradiction(zs, pt, 0.8))
    # sigma(z) moves toward 1 - p_t: down where p_t is high, up where it is low
    assert zs.grad[0, 0] > 0 and zs.grad[0, 1] < 0 and zs.grad[0, 2] == 0


def test_entropy_values():
    assert L.entropy_term(T([0.5, 0.5])).item() == pytest.approx(LN2)
    assert L.entropy_term(T(np.full((2, 4), 0.25)), categorical=True).item() == pytest.approx(math.log(4), abs=1e-9)
    assert L.entropy_term(T([0.0, 1.0])).item() < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.floats(1e-4, 0.5), st.integers(0, 2**16))
def test_entropy_max_at_uniform(c, delta, seed):
    g = np.random.default_rng(seed)
    base = L.entropy_term(nd.softmax(T(np.zeros((1, c))), axis=1), categorical=True).item()
    z = g.choice([-delta, delta], size=(1, c))
    bumped = L.entropy_term(nd.softmax(T(z), axis=1), categorical=True).item()
    assert bumped <= base + 1e-9


def test_repulsion_values():
    f = np.random.default_rng(8).standard_normal((3, 4, 2, 2))
    assert L.repulsion(T(f), T(f)).item() == pytest.approx(0.0, abs=1e-12)
    assert L.repulsion(T(f), T(-f)).item() == pytest.approx(2.0, abs=1e-9)
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert L.repulsion(T(a), T(b)).item() == pytest.approx(1.0)


def test_mean_prob_reg():
    assert L.mean_prob_reg(T([0.2, 0.8])).item() == 0.0
    assert L.mean_prob_reg(T(np.ones(5))).item() == 0.25
    assert L.mean_prob_reg(T(np.zeros(5))).item() == 0.25


def test_tv():
    assert L.tv_penalty(T(np.full((1, 1, 5, 5), 0.3))).item() == 0.0
    p = np.zeros((1, 1, 6, 5))
    p[..., 3:, :] = 1.0
    h, w = 6, 5
    dv = sum(abs(p[0, 0, i + 1, j] - p[0, 0, i, j]) for i in range(h - 1) for j in range(w)) / ((h - 1) * w)
    dh = sum(abs(p[0, 0, i, j + 1] - p[0, 0, i, j]) for i in range(h) for j in range(w - 1)) / (h * (w - 1))
    assert L.tv_penalty(T(p)).item() == pytest.approx(dv + dh)
    assert dv == pytest.approx(w / ((h - 1) * w))  # one edge spanning the width
    q = np.random.default_rng(9).random((2, 1, 4, 4))
    assert L.tv_penalty(T(q)).item() == pytest.approx(L.tv_penalty(T(1 - q)).item(), abs=1e-12)


def test_forget_cls():
    r1, r2 = np.random.default_rng(0), np.random.default_rng(0)
    uniform = T(np.zeros((6, 3)))
    assert L.forget_cls(uniform, r1).item() == pytest.approx(math.log(3))
    assert L.forget_cls(uniform, r1, "entropy").item() == pytest.approx(-math.log(3))
    z = T(np.random.default_rng(1).standard_normal((6, 3)))
    a = [L.forget_cls(z, np.random.default_rng(5)).item() for _ in range(2)]
    assert a[0] == a[1]
    with pytest.raises(ValueError):
        L.forget_cls(T(np.zeros((2, 1))), r2)


def test_cross_entropy_oracle():
    z = np.random.default_rng(10).standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    ref = -np.mean(np.log(np.exp(z[np.arange(4), y]) / np.exp(z).sum(axis=1)))
    assert L.cross_entropy(T(z), y).item() == pytest.approx(ref, rel=1e-12)


# -- weights -----------------------------------------------------------------

def test_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.alpha_kd, w.beta_guard, w.lambda_forget, w.temperature, w.teacher_conf_threshold) == (1.0, 0.05, 3.0, 2.0, 0.8)
    for bad in ({"temperature": 0.0}, {"lambda_tv": -1.0}, {"teacher_conf_threshold": 0.4}):
        with pytest.raises(ValueError):
            L.LossWeights(**bad)


# -- composites ------------------------------------------------------------------

@pytest.fixture
def seg_pair():
    teacher = nets.SegNet(seed=1, dtype=np.float64)
    student = nets.SegNet(seed=2, dtype=np.float64)
    r = np.random.default_rng(11)
    x = r.random((2, 1, 8, 8))
    y = (r.random((2, 1, 8, 8)) > 0.6).astype(float)
    return teacher, student, L.make_batch(x, y, teacher)


def test_retain_composite_sum_equality(seg_pair):
    teacher, student, batch = seg_pair
    w = L.LossWeights(alpha_kd=0.7, beta_guard=0.3)
    terms = L.retain_composite(batch, student, w)
    p = terms.parts
    ref = p["sup"].item() + 0.7 * p["kd"].item() + 0.3 * p["guard"].item()
    assert terms.total.item() == pytest.approx(ref, rel=1e-14)
    logits, _ = student(batch.images)
    assert p["kd"].item() == L.kd_loss(logits, batch.teacher_logits, 2.0).item()
    zero = L.retain_composite(batch, student, L.LossWeights(alpha_kd=0, beta_guard=0))
    assert zero.total.item() == L.dice_bce(logits, batch.targets).item()


def test_retain_composite_self_with_perfect_labels(seg_pair):
    teacher, _, batch = seg_pair
    labels = (batch.teacher_logits.data > 0).astype(float)
    sharp = L.Batch(batch.images, labels, batch.teacher_logits, batch.teacher_features)

    class Scaled:
        def __call__(self, x):
            z, f = teacher(x)
            return nd.scalar_mul(z, 1.0), f

    terms = L.retain_composite(sharp, Scaled(), L.LossWeights())
    assert terms.parts["kd"].item() == pytest.approx(0, abs=1e-12)
    assert terms.parts["guard"].item() == 0


def test_ascent_composite(seg_pair):
    teacher, student, batch = seg_pair
    zero = dict(tc_weight=0, lambda_unc=0, lambda_rep=0, lambda_mean=0, lambda_tv=0)
    logits, _ = student(batch.images)
    only_flip = L.ascent_composite(batch, student, L.LossWeights(alpha_flip=1, **zero))
    assert only_flip.total.item() == L.flip_loss(logits, batch.targets).item()
    w = L.LossWeights(alpha_flip=0.5, tc_weight=0.7, lambda_unc=0.2, lambda_rep=0.3, lambda_mean=0.4, lambda_tv=0.05)
    t = L.ascent_composite(batch, student, w)
    p = {k: v.item() for k, v in t.parts.items()}
    ref = 0.5 * p["flip"] + 0.7 * p["tc"] + 0.3 * p["repulsion"] + 0.4 * p["mean_reg"] + 0.05 * p["tv"] - 0.2 * p["entropy"]
    assert t.total.item() == pytest.approx(ref, rel=1e-13)
    assert p["entropy"] == L.entropy_term(nd.sigmoid(logits)).item()


def test_descent_composite(seg_pair):
    teacher, student, batch = seg_pair
    assert L.descent_composite(batch, teacher, L.LossWeights()).total.item() == pytest.approx(0, abs=1e-12)
    logits, _ = student(batch.images)
    t = L.descent_composite(batch, student, L.LossWeights(gamma_des=0, lambda_fg_guard=1))
    assert t.total.item() == L.guard_loss(logits, batch.teacher_logits).item()
    w = L.LossWeights(gamma_des=0.6, lambda_fg_guard=0.2)
    s = L.descent_composite(batch, student, w, supervised=True)
    p = {k: v.item() for k, v in s.parts.items()}
    assert s.total.item() == pytest.approx(0.6 * p["kd"] + 0.2 * p["guard"] + p["sup"], rel=1e-13)


def test_forget_composite_scaling(seg_pair):
    _, student, batch = seg_pair
    t = L.forget_composite(batch, student, L.LossWeights(lambda_forget=3.0), "background")
    assert t.total.item() == pytest.approx(3 * t.parts["forget"].item(), rel=1e-15)
    with pytest.raises(ValueError):
        L.forget_composite(batch, student, L.LossWeights(), "nope")


def test_losses_finite_on_extreme_inputs():
    g = np.random.default_rng(12)
    for _ in range(1000):
        z = g.standard_normal((1, 1, 3, 3)) * g.choice([1, 50, 1e4])
        y = (g.random((1, 1, 3, 3)) > 0.5).astype(float)
        p = nd.sigmoid(T(z))
        values = [L.dice_bce(T(z), y), L.kd_loss(T(z), T(-z)), L.flip_loss(T(z), y),
                  L.teacher_contradiction(T(z), p.data), L.entropy_term(p), L.tv_penalty(p)]
        assert all(np.isfinite(v.item()) for v in values)


# -- gradient checks (criterion 1 covers these too) -----------------------------

def _loss_cases(g):
    z = lambda *s: T(g.standard_normal(s) * 1.5, grad=True)  # noqa: E731
    y = (g.random((2, 1, 4, 4)) > 0.5).astype(float)
    pt = 1 / (1 + np.exp(-g.standard_normal((2, 1, 4, 4)) * 3))
    zt = T(g.standard_normal((2, 1, 4, 4)))
    labels = g.integers(0, 3, 4)
    zt_cls = T(g.standard_normal((4, 3)))
    return {
        "dice_bce": (lambda a: L.dice_bce(a, y), [z(2, 1, 4, 4)]),
        "kd_sigmoid": (lambda a: L.kd_loss(a, zt, 2.0), [z(2, 1, 4, 4)]),
        "kd_softmax": (lambda a: L.kd_loss(a, zt_cls, 2.0, "softmax"), [z(4, 3)]),
        "guard": (lambda a: L.guard_loss(a, zt), [z(2, 1, 4, 4)]),
        "forget_background": (lambda a: L.forget_background(a), [z(2, 1, 4, 4)]),
        "flip": (lambda a: L.flip_loss(a, y), [z(2, 1, 4, 4)]),
        "teacher_contradiction": (lambda a: L.teacher_contradiction(a, pt, 0.8), [z(2, 1, 4, 4)]),
        "entropy": (lambda a: L.entropy_term(nd.sigmoid(a)), [z(2, 1, 4, 4)]),
        "entropy_cat": (lambda a: L.entropy_term(nd.softmax(a, axis=1), categorical=True), [z(4, 3)]),
        "repulsion": (lambda a, b: L.repulsion(a, b), [z(3, 2, 2, 2), z(3, 2, 2, 2)]),
        "mean_prob_reg": (lambda a: L.mean_prob_reg(nd.sigmoid(a)), [z(2, 1, 4, 4)]),
        "tv": (lambda a: L.tv_penalty(a), [T(g.permutation(32).reshape(2, 1, 4, 4) / 10.0, grad=True)]),
        "cross_entropy": (lambda a: L.cross_entropy(a, labels), [z(4, 3)]),
        "forget_cls_entropy": (lambda a: L.forget_cls(a, None, "entropy"), [z(4, 3)]),
    }


LOSS_NAMES = sorted(_loss_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", LOSS_NAMES)
@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_every_loss(name, seed):
    fn, inputs = _loss_cases(np.random.default_rng(seed))[name]
    assert nd.gradcheck(fn, inputs) < 1e-4
