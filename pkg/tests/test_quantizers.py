import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saliq import tensor as T
from saliq.optim import AdamW
from saliq.quantizers import (ALLOWED_BITS, EPS, QuantSpec, compute_scale, compute_zero_point,
                              degenerate_groups, dequantize, dual_binarize, dual_binarize_group,
                              fake_quant_learnable, freeze_learnable, init_gates, init_mos, mos_linear,
                              mos_mixture, mos_scale, quantize_rtn, rtn, rtn_params, solve_alphas)
from saliq.tensor import ShapeError, Tensor

from oracles import asym_rtn, symmetric_rtn_2bit

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


# -- scale, zero point, codes ----------------------------------------------

def test_scale_examples():
    assert compute_scale(np.array([0.0, 1.0]), 2) == pytest.approx(1 / 3)
    assert compute_scale(np.array([-1.0, 3.0]), 3) == pytest.approx(4 / 7)
    assert compute_scale(np.full(5, 0.7), 4) == EPS


def test_zero_point_examples():
    assert compute_zero_point(0.0, 0.5) == 0
    assert compute_zero_point(-1.0, 0.5) == 2
    assert compute_zero_point(0.375, 0.25) == -2  # -round(1.5), ties away from zero
    assert compute_zero_point(-0.375, 0.25) == 2
    # 0.3 / 0.2 is 1.4999999999999998 in binary floating point, so no tie
    assert compute_zero_point(0.3, 0.2) == -1


def test_code_examples():
    spec = QuantSpec(2, None, scale=[1 / 3], zero=[0.0])
    assert quantize_rtn(np.array([[0.4]]), spec)[0, 0] == 1
    assert quantize_rtn(np.array([[10.0]]), spec)[0, 0] == 3
    assert dequantize(np.array([[1]]), spec)[0, 0] == pytest.approx(1 / 3)


def test_code_equal_to_zero_point_dequantizes_to_zero():
    spec = QuantSpec(4, None, scale=[0.37], zero=[6.0])
    assert dequantize(np.array([[6]]), spec)[0, 0] == 0.0


def test_constant_group_reconstructed_within_eps():
    w = np.full((2, 4), -0.25)
    w_hat, spec = rtn(w, 2, 4)
    np.testing.assert_array_equal(spec.scale, EPS)
    np.testing.assert_allclose(w_hat, w, atol=EPS)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.sampled_from([4, 8])), elements=finite),
       st.sampled_from(ALLOWED_BITS), st.sampled_from([None, 4]))
def test_codes_in_range_and_in_range_error_within_half_step(w, bits, gs):
    spec = rtn_params(w, bits, gs)
    codes = quantize_rtn(w, spec)
    assert codes.min() >= 0 and codes.max() <= 2 ** bits - 1
    assert np.all(np.asarray(spec.scale) > 0)
    w_hat = dequantize(codes, spec)
    g = w.reshape(-1, gs or w.size)
    s = np.asarray(spec.scale).reshape(-1, 1)
    z = np.asarray(spec.zero).reshape(-1, 1)
    raw = np.sign(g / s) * np.floor(np.abs(g / s) + 0.5) + z
    in_range = (raw >= 0) & (raw <= 2 ** bits - 1)
    err = np.abs(g - w_hat.reshape(g.shape))
    bound = np.broadcast_to(s / 2 * (1 + 1e-9), g.shape) + 1e-12 * np.abs(g)
    assert np.all(err[in_range] <= bound[in_range])


def test_eight_bit_per_matrix_error_bound_on_random_matrices(rng):
    for _ in range(20):
        w = rng.normal(size=(32, 48))
        w_hat, spec = rtn(w, 8)
        raw = np.round(w / spec.scale[0]) + spec.zero[0]
        in_range = (raw >= 0) & (raw <= 255)
        assert np.abs(w - w_hat)[in_range].max() <= spec.scale[0] / 2 + 1e-12


def test_rtn_matches_longhand_oracle(rng):
    for bits in ALLOWED_BITS:
        w = rng.normal(size=(6, 10))
        np.testing.assert_allclose(rtn(w, bits)[0], asym_rtn(w, bits), rtol=0, atol=1e-12)


def test_mse_non_increasing_in_bits(rng):
    for _ in range(10):
        w = rng.normal(size=(16, 32))
        mses = [np.mean((w - rtn(w, b)[0]) ** 2) for b in ALLOWED_BITS]
        assert all(a >= b for a, b in zip(mses, mses[1:]))


def test_groups_are_contiguous_runs_along_input_dim():
    w = np.array([[0.0, 1.0, 10.0, 20.0]])
    spec = rtn_params(w, 2, 2)
    np.testing.assert_allclose(spec.scale, [1 / 3, 10 / 3])


def test_group_size_must_divide_input_dim():
    with pytest.raises(ValueError):
        rtn(np.zeros((2, 6)), 2, 4)


@pytest.mark.parametrize("kw", [dict(bits=5), dict(bits=2, kind="mos"), dict(bits=1, kind="dual_binary"),
                                dict(bits=2, kind="other"), dict(bits=2, group_size=0)])
def test_invalid_specs_rejected(kw):
    args = {"bits": 2, "group_size": None, "kind": "rtn", **kw}
    with pytest.raises(ValueError):
        QuantSpec(**args)


# -- learnable clipping ----------------------------------------------------

@pytest.mark.parametrize("bits", ALLOWED_BITS)
@pytest.mark.parametrize("gs", [None, 8])
def test_open_gate_equals_rtn(rng, bits, gs):
    w = rng.normal(size=(8, 16))
    lo, hi = init_gates(w, gs, value=np.inf)
    out = fake_quant_learnable(w, Tensor(lo), Tensor(hi), bits, gs).data
    np.testing.assert_allclose(out, rtn(w, bits, gs)[0], rtol=0, atol=1e-6)


@pytest.mark.parametrize("shape", [(128, 128), (256, 256)])
def test_initial_gate_at_eight_bits_no_worse_than_rtn(shape):
    for seed in range(10):
        w = np.random.default_rng(seed).normal(size=shape)
        lo, hi = init_gates(w, None)
        out = fake_quant_learnable(w, Tensor(lo), Tensor(hi), 8).data
        assert np.mean((w - out) ** 2) <= np.mean((w - rtn(w, 8)[0]) ** 2) + 1e-6


def test_adamw_step_moves_gates_when_clamp_active(rng):
    w = rng.normal(size=(4, 8))
    lo, hi = init_gates(w, None, value=0.0)  # half-open gates: clamp is active
    g_lo, g_hi = Tensor(lo, requires_grad=True), Tensor(hi, requires_grad=True)
    opt = AdamW([{"params": [g_lo, g_hi], "lr": 0.01}])
    loss = T.tsum(T.square(T.sub(w, fake_quant_learnable(w, g_lo, g_hi, 2))))
    loss.backward()
    assert np.all(np.isfinite(g_lo.grad)) and np.any(g_lo.grad != 0)
    before = (g_lo.data.copy(), g_hi.data.copy())
    opt.step()
    assert not np.array_equal(before[0], g_lo.data)
    assert not np.array_equal(before[1], g_hi.data)


@pytest.mark.parametrize("bits", ALLOWED_BITS)
def test_frozen_codes_reproduce_fake_quant(rng, bits):
    w = rng.normal(size=(6, 8))
    lo = rng.normal(size=(12, 1)) + 2
    hi = rng.normal(size=(12, 1)) + 2
    codes, spec = freeze_learnable(w, lo, hi, bits, 4)
    assert codes.min() >= 0 and codes.max() <= 2 ** bits - 1
    np.testing.assert_allclose(dequantize(codes, spec), fake_quant_learnable(w, Tensor(lo), Tensor(hi), bits, 4).data,
                               rtol=0, atol=1e-12)


def test_collapsed_range_falls_back_to_eps_and_is_counted():
    w = np.array([[0.5, 1.0, 2.0, 3.0]])  # all positive: lo = min*sig, hi = max*sig
    lo = np.array([[10.0]])
    hi = np.array([[-10.0]])  # hi ~ 0 < lo
    assert degenerate_groups(w, lo, hi, None) == 1
    codes, spec = freeze_learnable(w, lo, hi, 2)
    assert spec.scale[0] == EPS
    out = fake_quant_learnable(w, Tensor(lo), Tensor(hi), 2).data
    assert np.all(np.isfinite(out))


# -- dual binarization -----------------------------------------------------

def test_four_level_group_is_exact():
    b1, b2, a1, a2, _ = dual_binarize_group(np.array([-1.5, -0.5, 0.5, 1.5]))
    assert a1 == pytest.approx(1.0) and a2 == pytest.approx(0.5)
    np.testing.assert_allclose(a1 * b1 + a2 * b2, [-1.5, -0.5, 0.5, 1.5], atol=1e-12)


def test_constant_group_is_exact():
    b1, b2, a1, a2, _ = dual_binarize_group(np.array([0.8, 0.8]))
    np.testing.assert_allclose(a1 * b1 + a2 * b2, [0.8, 0.8], atol=1e-12)
    assert abs(a1 * b1[0] + a2 * b2[0] - 0.8) < 1e-12


def test_canonical_form_and_iteration_cap(rng):
    for _ in range(200):
        b1, b2, a1, a2, it = dual_binarize_group(rng.normal(size=16))
        assert a1 >= abs(a2) >= 0
        assert set(np.unique(b1)) <= {-1.0, 1.0} and set(np.unique(b2)) <= {-1.0, 1.0}
        assert it <= 25


def test_closed_form_alphas_are_least_squares_optimal(rng):
    for _ in range(50):
        w = rng.normal(size=12)
        b1, b2 = rng.choice([-1.0, 1.0], size=12), rng.choice([-1.0, 1.0], size=12)
        if abs(b1 @ b2) == 12:
            continue
        a1, a2 = solve_alphas(w, b1, b2)
        best = np.sum((w - a1 * b1 - a2 * b2) ** 2)
        grid = np.linspace(-3, 3, 121)
        g1, g2 = np.meshgrid(grid, grid)
        errs = ((w[None, None] - g1[..., None] * b1 - g2[..., None] * b2) ** 2).sum(-1)
        assert best <= errs.min() + 1e-12


def test_dual_binary_is_global_optimum_over_all_sign_patterns(rng):
    import itertools
    for n in (3, 5, 6):
        for _ in range(20):
            w = rng.normal(size=n)
            b1, b2, a1, a2, _ = dual_binarize_group(w)
            best = np.inf
            for pattern in itertools.product([-1.0, 1.0], repeat=2 * n):
                p1, p2 = np.array(pattern[:n]), np.array(pattern[n:])
                basis = np.stack([p1, p2], axis=1)
                sol, *_ = np.linalg.lstsq(basis, w, rcond=None)
                best = min(best, np.sum((w - basis @ sol) ** 2))
            assert np.sum((w - a1 * b1 - a2 * b2) ** 2) <= best + 1e-12


def test_dual_binary_not_worse_than_symmetric_two_bit(rng):
    for _ in range(300):
        w = rng.normal(size=16)
        b1, b2, a1, a2, _ = dual_binarize_group(w)
        assert np.mean((w - a1 * b1 - a2 * b2) ** 2) <= np.mean((w - symmetric_rtn_2bit(w)) ** 2) + 1e-12


def test_dual_binarize_matrix_layout(rng):
    w = rng.normal(size=(4, 8))
    db = dual_binarize(w, group_size=4)
    assert db.b1.shape == w.shape and db.b1.dtype == np.int8
    assert db.alpha1.shape == (8,)
    rebuilt = (db.alpha1[:, None] * db.b1.reshape(8, 4) + db.alpha2[:, None] * db.b2.reshape(8, 4)).reshape(4, 8)
    np.testing.assert_allclose(rebuilt, db.w_hat)


# -- mixture of scaling experts ---------------------------------------------

def test_mixture_weights_sum_to_one(rng):
    x = Tensor(rng.normal(size=(1000, 12)))
    router = Tensor(rng.normal(size=(12, 5)) * 3)
    mix = mos_mixture(x, router).data
    assert np.abs(mix.sum(axis=-1) - 1).max() <= 1e-6
    assert mix.min() >= 0


def test_single_expert_path_is_exact(rng):
    x = Tensor(rng.normal(size=(7, 6)))
    sign = rng.choice([-1, 1], size=(4, 6)).astype(np.int8)
    expert = Tensor(rng.uniform(0.1, 1, size=(1, 4)))
    router = Tensor(rng.normal(size=(6, 1)))
    expected = (x.data @ sign.T.astype(np.float64)) * expert.data[0]
    np.testing.assert_array_equal(mos_linear(x, sign, expert, router).data, expected)


def test_equal_logits_average_experts(rng):
    experts = Tensor(rng.normal(size=(2, 5)))
    out = mos_scale(Tensor(rng.normal(size=(3, 4))), experts, Tensor(np.zeros((4, 2)))).data
    np.testing.assert_allclose(out, np.broadcast_to(experts.data.mean(0), (3, 5)), atol=1e-15)


def test_router_expert_mismatch_rejected(rng):
    with pytest.raises(ShapeError):
        mos_scale(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros((3, 2))))


def test_init_mos_shapes(rng):
    w = rng.normal(size=(5, 3))
    sign, experts, router = init_mos(w, 4, rng)
    assert sign.shape == (5, 3) and set(np.unique(sign)) <= {-1, 1}
    assert experts.shape == (4, 5) and router.shape == (3, 4)
    np.testing.assert_allclose(experts.mean(0), np.abs(w).mean(1), rtol=0.05)
