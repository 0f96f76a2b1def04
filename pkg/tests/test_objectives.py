import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from efficient_ser import tensor as T
from efficient_ser.objectives import (
    AdamWState,
    BatchSizeError,
    LossScaler,
    LossScaleUnderflow,
    Trainer,
    adamw_step,
    ccc,
    ccc_loss,
    multitask_loss,
)
from efficient_ser.tensor import Tensor

from gradcheck import numeric_grad, rel_error


def exact_ccc(x, y, eps=1e-8):
    """Population CCC in rational arithmetic, epsilon included."""
    x = [Fraction(v) for v in x]
    y = [Fraction(v) for v in y]
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    return float(2 * cov / (vx + vy + (mx - my) ** 2 + Fraction(eps)))


# ccc


def test_ccc_examples():
    assert ccc([0.1, 0.5, 0.9], [0.1, 0.5, 0.9]) == pytest.approx(1.0, abs=1e-7)
    assert ccc([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-1.0, abs=1e-7)
    assert ccc([1, 2, 3], [2, 4, 6]) == pytest.approx(4 / 11, abs=1e-9)
    assert 4 / 11 == pytest.approx(0.363636, abs=1e-6)


def test_ccc_batch_size_error():
    with pytest.raises(BatchSizeError):
        ccc([1.0], [1.0])
    with pytest.raises(BatchSizeError):
        ccc_loss(Tensor([1.0]), Tensor([1.0]))


def test_ccc_brute_force_small_integer_batches():
    values = (0, 1, 2)
    for x in itertools.product(values, repeat=3):
        for y in itertools.product(values, repeat=3):
            assert ccc(x, y) == pytest.approx(exact_ccc(x, y), abs=1e-12)


@given(hnp.arrays(np.float64, st.integers(2, 12), elements=st.floats(-5, 5)), st.randoms())
def test_ccc_symmetric_and_permutation_invariant(x, rnd):
    y = np.roll(x, 1) * 0.5 + 0.3
    assert ccc(x, y) == ccc(y, x)
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    assert ccc(x[perm], y[perm]) == pytest.approx(ccc(x, y), abs=1e-12)


@given(hnp.arrays(np.float64, st.integers(2, 12), elements=st.floats(-5, 5)))
def test_ccc_bounded(x):
    y = np.sin(np.arange(len(x)))
    assert -1.0 - 1e-12 <= ccc(x, y) <= 1.0 + 1e-12


def test_ccc_batch_dependence():
    pred, label = [0.2, 0.4, 0.9, 0.1], [0.3, 0.5, 0.7, 0.0]
    whole = ccc(pred, label)
    halves = (ccc(pred[:2], label[:2]) + ccc(pred[2:], label[2:])) / 2
    assert whole != pytest.approx(halves, abs=1e-3)


# ccc_loss and multitask_loss


def test_ccc_loss_examples():
    lab = Tensor([0.1, 0.7, 0.3])
    assert ccc_loss(Tensor([0.1, 0.7, 0.3]), lab).item() == pytest.approx(0.0, abs=1e-6)
    assert ccc_loss(Tensor([0.5, 0.5, 0.5]), lab).item() == pytest.approx(1.0, abs=1e-12)


def test_ccc_loss_matches_ccc():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=9), rng.normal(size=9)
    assert ccc_loss(Tensor(x), Tensor(y)).item() == pytest.approx(1 - ccc(x, y), abs=1e-12)


def test_ccc_loss_gradient_fd():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.normal(size=8), rng.normal(size=8)

        def f(arrs):
            return ccc_loss(Tensor(arrs[0]), Tensor(y)).item()

        p = Tensor(x.copy(), requires_grad=True)
        ccc_loss(p, Tensor(y)).backward()
        assert rel_error(p.grad, numeric_grad(f, [x.copy()], 0, 1e-6)) <= 1e-6


def test_multitask_examples():
    lab = Tensor(np.array([[0.1, 0.2], [0.5, 0.9], [0.8, 0.4]]))
    assert multitask_loss(lab, lab).item() == pytest.approx(0.0, abs=1e-6)
    half = np.array([[0.1, 0.3], [0.5, 0.3], [0.8, 0.3]])
    assert multitask_loss(Tensor(half), lab).item() == pytest.approx(0.5, abs=1e-6)


def test_multitask_is_mean_of_tasks():
    rng = np.random.default_rng(2)
    p, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    single = [ccc_loss(Tensor(p[:, i]), Tensor(y[:, i])).item() for i in range(2)]
    assert multitask_loss(Tensor(p), Tensor(y)).item() == pytest.approx(sum(single) / 2, abs=1e-14)


def test_multitask_shape_check():
    with pytest.raises(ValueError):
        multitask_loss(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 3))))


# adamw


def test_adamw_zero_gradient_no_decay():
    theta = {"w": np.array([1.0, -2.0])}
    out, state = adamw_step(theta, {"w": np.zeros(2)}, AdamWState(weight_decay=0.0))
    np.testing.assert_array_equal(out["w"], theta["w"])
    assert state.step == 1


def test_adamw_first_step_hand_value():
    out, _ = adamw_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, AdamWState(lr=1e-4, weight_decay=0.0))
    assert out["w"][0] == pytest.approx(1.0 - 1e-4 / (1.0 + 1e-8), abs=1e-15)
    assert out["w"][0] == pytest.approx(0.9999, abs=1e-12)


def test_adamw_decay_is_decoupled():
    theta = np.array([1.0, -3.0, 0.25])
    out, _ = adamw_step({"w": theta}, {"w": np.zeros(3)}, AdamWState(lr=1e-3, weight_decay=0.1))
    np.testing.assert_array_max_ulp(out["w"], theta * (1.0 - 1e-3 * 0.1), maxulp=1)


def test_adamw_without_decay_matches_adam_oracle():
    grads = [0.3, -1.2, 0.5, 0.0, 2.0, -0.7, 0.1, 0.9, -0.4, 1.5]
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    theta, m, v = 0.5, 0.0, 0.0
    state = AdamWState(lr=lr, weight_decay=0.0)
    params = {"w": np.array([0.5])}
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        params, state = adamw_step(params, {"w": np.array([g])}, state)
        assert params["w"][0] == pytest.approx(theta, abs=1e-12)
    assert state.step == 10
    assert np.all(state.v["w"] >= 0)


def test_adamw_rejects_non_finite():
    state = AdamWState()
    out, state = adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.inf])}, state)
    assert out is None and state.step == 0


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamWState())


# loss scaling


def test_scaler_halves_on_overflow():
    s = LossScaler()
    s.consecutive_clean = 5
    s.update(True)
    assert s.scale == 2.0**15 and s.consecutive_clean == 0


def test_scaler_doubles_after_growth_interval():
    s = LossScaler()
    for _ in range(1999):
        s.update(False)
    assert s.scale == 2.0**16
    s.update(False)
    assert s.scale == 2.0**17 and s.consecutive_clean == 0


def test_scaler_underflow():
    s = LossScaler(scale=1.0)
    with pytest.raises(LossScaleUnderflow):
        s.update(True)


class Linear:
    """Minimal model exposing the attributes Trainer relies on."""

    def __init__(self, w):
        self.params = {"w": Tensor(np.asarray(w, dtype=np.float32), requires_grad=True)}

    def trainable_paths(self):
        return ["w"]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def toy_problem(seed=0, n=64, d=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)).astype(np.float32)
    w_true = rng.normal(size=(d, 1)).astype(np.float32)
    return x, x @ w_true


def mse(model, x, y):
    def loss_fn(weights, train, rng):
        pred = T.matmul(Tensor(x), (weights or model.params)["w"])
        with T.autocast_half(False):
            diff = pred - Tensor(y)
            return T.tmean(diff * diff)

    return loss_fn


def test_mixed_step_injected_inf_skips_and_halves():
    x, y = toy_problem()
    model = Linear(np.zeros((4, 1)))
    trainer = Trainer(model, AdamWState(lr=1e-2), precision="mixed")
    before = model.params["w"].data.copy()
    out = trainer.step(mse(model, x, y), inject_grad={"w": np.full((4, 1), np.inf, dtype=np.float32)})
    assert not out.applied and out.overflow
    assert trainer.scaler.scale == 2.0**15
    np.testing.assert_array_equal(model.params["w"].data, before)
    assert trainer.state.step == 0


def test_mixed_step_unscales_gradient():
    x, y = toy_problem()
    w0 = np.random.default_rng(5).normal(size=(4, 1)).astype(np.float32)
    model = Linear(w0)
    trainer = Trainer(model, AdamWState(lr=0.0, weight_decay=0.0), precision="mixed", scaler=LossScaler(scale=8.0))
    captured = {}
    original = trainer._apply

    def spy(grads):
        captured.update(grads)
        return original(grads)

    trainer._apply = spy
    trainer.step(mse(model, x, y))
    raw = {}
    for scale in (8.0, 1.0):
        w = Tensor(T.half_round(w0), requires_grad=True)
        with T.autocast_half():
            loss = mse(model, x, y)({"w": w}, True, None)
        T.backward(loss * scale)
        raw[scale] = w.grad.astype(np.float32)
    np.testing.assert_array_equal(captured["w"], raw[8.0] / np.float32(8.0))
    np.testing.assert_array_equal(captured["w"], raw[1.0])


def test_mixed_master_stays_float32_and_half_copies_track():
    x, y = toy_problem()
    model = Linear(np.zeros((4, 1)))
    trainer = Trainer(model, AdamWState(lr=1e-2), precision="mixed")
    applied = 0
    for _ in range(30):
        before = model.params["w"].data.copy()
        out = trainer.step(mse(model, x, y))
        assert model.params["w"].data.dtype == np.float32
        if out.applied:
            applied += 1
            np.testing.assert_array_equal(trainer.half_weights["w"].data, T.half_round(model.params["w"].data))
        else:
            assert out.overflow
            np.testing.assert_array_equal(model.params["w"].data, before)
    assert applied >= 20
    assert trainer.scaler.scale < 2.0**16


def test_mixed_toy_regression_close_to_single():
    x, y = toy_problem(1)
    finals = {}
    for precision in ("single", "mixed"):
        model = Linear(np.zeros((4, 1)))
        trainer = Trainer(model, AdamWState(lr=5e-2, weight_decay=0.0), precision=precision)
        for _ in range(300):
            out = trainer.step(mse(model, x, y))
        finals[precision] = mse(model, x, y)(None, False, None).item()
    assert abs(finals["mixed"] - finals["single"]) <= 0.1 * max(finals["single"], 1e-3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_single_precision_non_finite_loss_aborts():
    model = Linear(np.zeros((2, 1)))
    trainer = Trainer(model, AdamWState())

    def bad(weights, train, rng):
        return T.tsum(model.params["w"] * np.float32(np.inf))

    with pytest.raises(FloatingPointError):
        trainer.step(bad)
