import numpy as np
import pytest

from saliq import tensor as T
from saliq.optim import AdamW, OptimizerState, adamw_step
from saliq.tensor import Tensor


def test_zero_gradient_without_decay_leaves_parameter():
    p = np.array([1.0, -2.0])
    assert adamw_step([p], [np.zeros(2)], OptimizerState(lr=0.1))
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_decay_multiplies_parameter():
    p = np.array([1.0])
    adamw_step([p], [np.zeros(1)], OptimizerState(lr=0.1, weight_decay=0.1))
    assert p[0] == pytest.approx(0.99, abs=1e-15)


def test_first_step_matches_hand_formula():
    p = np.array([0.5, -1.0])
    g = np.array([0.2, -3.0])
    st = OptimizerState(lr=0.01, weight_decay=0.1)
    adamw_step([p], [g], st)
    # bias-corrected moments equal g and g^2 after one step
    expected = np.array([0.5, -1.0]) * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=0, atol=1e-15)
    assert st.steps[0] == 1


def test_second_step_uses_running_moments():
    p = np.array([1.0])
    st = OptimizerState(lr=0.1)
    adamw_step([p], [np.array([1.0])], st)
    adamw_step([p], [np.array([-1.0])], st)
    m = 0.9 * 0.1 * 1.0 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    first = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert p[0] == pytest.approx(first - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-14)
    assert st.steps[0] == 2


def test_quadratic_step_decreases():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = AdamW([{"params": [w], "lr": 0.001}])
    T.square(w).backward()
    opt.step()
    assert w.data < 1.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_skips_group_and_counts(bad):
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    opt = AdamW([{"params": [a], "lr": 0.1}, {"params": [b], "lr": 0.1}])
    a.grad = np.array([1.0, bad])
    b.grad = np.array([1.0])
    opt.step()
    np.testing.assert_array_equal(a.data, [1.0, 2.0])
    assert b.data[0] < 3.0
    assert opt.skipped == 1
    assert 0 not in opt.groups[0][1].steps


def test_moments_keep_parameter_shape_and_steps_increase():
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    opt = AdamW([{"params": [w], "lr": 0.01, "weight_decay": 0.1}])
    for k in range(1, 4):
        w.grad = np.full((3, 2), 0.5)
        opt.step()
        st = opt.groups[0][1]
        assert st.m[0].shape == (3, 2) and st.v[0].shape == (3, 2)
        assert st.steps[0] == k


def test_minimizes_quadratic_bowl():
    target = np.array([0.3, -0.7, 1.1])
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW([{"params": [w], "lr": 0.05}])
    for _ in range(500):
        opt.zero_grad()
        T.tsum(T.square(T.sub(w, target))).backward()
        opt.step()
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_bare_tensor_list_rejected():
    with pytest.raises(TypeError):
        AdamW([Tensor(np.ones(1), requires_grad=True)])
