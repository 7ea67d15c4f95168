"""Quantizer semantics: scale/round/clip arithmetic, the straight-through
gradient, per-channel bounds, and activation calibration."""

import numpy as np
import pytest

from fdda import autodiff as ad
from fdda.autodiff import Tensor
from fdda.models import build_toy_classifier
from fdda.quantizer import (
    ChannelQuantParams,
    QuantParams,
    QuantPolicy,
    calibrate_activation_bounds,
    channel_bounds,
    compute_scale,
    dequantize,
    fake_quantize_ste,
    quantize,
    quantize_weights_per_channel,
)


# ---------------------------------------------------------------------------
# scale
# ---------------------------------------------------------------------------

def test_compute_scale_examples():
    assert compute_scale(2, 0.0, 3.0) == pytest.approx(1.0)
    assert compute_scale(8, -1.0, 1.0) == pytest.approx(2.0 / 255.0)
    assert compute_scale(4, 0.0, 15.0) == pytest.approx(1.0)


def test_compute_scale_rejects_bad_bounds():
    with pytest.raises(ValueError):
        compute_scale(4, 1.0, 1.0)
    with pytest.raises(ValueError):
        compute_scale(4, 2.0, 1.0)


def test_quant_params_recompute_scale_exactly():
    q = QuantParams(5, -0.7, 1.9)
    assert q.scale == compute_scale(5, -0.7, 1.9)


# ---------------------------------------------------------------------------
# quantize / dequantize
# ---------------------------------------------------------------------------

def test_quantize_hand_example():
    q = QuantParams(2, 0.0, 3.0)
    assert quantize(1.4, q) == 1


def test_quantize_clips_at_bounds():
    q = QuantParams(2, 0.0, 3.0)
    assert quantize(5.0, q) == 3
    assert quantize(-2.0, q) == 0


def test_dequantize_values():
    q = QuantParams(2, 0.0, 3.0)
    assert dequantize(3, q) == pytest.approx(3.0)
    assert dequantize(0, q) == 0.0


def test_round_trip_hand_example():
    q = QuantParams(4, -1.0, 1.0)
    assert q.scale == pytest.approx(2.0 / 15.0)
    qv = quantize(0.5, q)
    assert qv == 4  # 0.5 / (2/15) = 3.75, ties/rounding away from zero
    assert dequantize(qv, q) == pytest.approx(8.0 / 15.0)


def test_ties_round_half_away_from_zero():
    q = QuantParams(4, -4.0, 11.0)  # scale 1
    assert quantize(0.5, q) == 1
    assert quantize(-0.5, q) == -1
    assert quantize(2.5, q) == 3
    assert quantize(-2.5, q) == -3


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_round_trip_bound_and_level_count(bits):
    lo, hi = -1.3, 2.1
    q = QuantParams(bits, lo, hi)
    xs = np.linspace(lo - 2.0, hi + 2.0, 4001)
    deq = dequantize(quantize(xs, q), q)
    clipped = np.clip(xs, lo, hi)
    assert np.max(np.abs(deq - clipped)) <= q.scale / 2 + 1e-12
    levels = np.unique(quantize(xs, q))
    assert len(levels) <= 2**bits
    assert levels.min() >= round(lo / q.scale) and levels.max() <= round(hi / q.scale)


def test_quantize_monotone():
    rng = np.random.default_rng(0)
    q = QuantParams(3, -0.5, 1.5)
    xs = np.sort(rng.uniform(-3, 3, size=500))
    qs = quantize(xs, q)
    assert np.all(np.diff(qs) >= 0)


# ---------------------------------------------------------------------------
# fake quantization / STE
# ---------------------------------------------------------------------------

def test_fake_quant_forward_value():
    q = QuantParams(2, 0.0, 3.0)
    y = fake_quantize_ste(Tensor(np.array([1.4], dtype=np.float32)), q)
    np.testing.assert_allclose(y.data, [1.0])


def test_fake_quant_grid_point_is_fixed():
    q = QuantParams(2, 0.0, 3.0)
    y = fake_quantize_ste(Tensor(np.array([2.0], dtype=np.float32)), q)
    np.testing.assert_allclose(y.data, [2.0])


def test_ste_gradient_mask():
    q = QuantParams(2, 0.0, 3.0)
    x = Tensor(np.array([1.4, 5.0, -2.0, 0.0, 3.0], dtype=np.float32), requires_grad=True)
    ad.backward(fake_quantize_ste(x, q).sum())
    np.testing.assert_allclose(x.grad, [1.0, 0.0, 0.0, 1.0, 1.0])


def test_ste_surrogate_matches_finite_differences():
    # with rounding disabled the op is clip(), whose true gradient is the STE rule
    rng = np.random.default_rng(1)
    q = QuantParams(4, -0.5, 0.9)
    vals = rng.uniform(-1.5, 1.5, size=12)
    vals = vals[np.abs(vals - q.lower) > 1e-2]
    vals = vals[np.abs(vals - q.upper) > 1e-2]  # keep away from the clip kinks
    x = Tensor(vals.astype(np.float64), requires_grad=True)

    def f():
        y = fake_quantize_ste(x, q, surrogate=True)
        return (y * y).sum()

    assert ad.grad_check(f, [x], h=1e-4) < 1e-6


# ---------------------------------------------------------------------------
# per-channel weights
# ---------------------------------------------------------------------------

def test_per_channel_scales_and_error_bounds():
    w = Tensor(np.array([[0.0, 1.1, 2.2, 3.0], [0.0, 11.0, 22.0, 30.0]], dtype=np.float32))
    fq, params = quantize_weights_per_channel(w, bits=2)
    np.testing.assert_allclose(params.scale, [1.0, 10.0])
    err = np.abs(fq.data - w.data)
    assert np.all(err[0] <= 0.5 + 1e-6)
    assert np.all(err[1] <= 5.0 + 1e-6)


def test_single_channel_matches_layerwise():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(1, 6)).astype(np.float32)
    fq, params = quantize_weights_per_channel(Tensor(w), bits=4)
    q = QuantParams(4, float(w.min()), float(w.max()))
    np.testing.assert_allclose(fq.data, dequantize(quantize(w, q), q).astype(np.float32), rtol=1e-6)


def test_on_grid_weights_unchanged():
    w = np.array([[0.0, 1.0, 2.0, 3.0]], dtype=np.float32)
    fq, _ = quantize_weights_per_channel(Tensor(w), bits=2)
    np.testing.assert_allclose(fq.data, w)


def test_per_channel_independence():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 8)).astype(np.float32)
    fq1, _ = quantize_weights_per_channel(Tensor(w), bits=3)
    w2 = w.copy()
    w2[2] *= 100.0  # editing channel 2 must not move channels 0-1
    fq2, _ = quantize_weights_per_channel(Tensor(w2), bits=3)
    np.testing.assert_allclose(fq1.data[:2], fq2.data[:2])


def test_degenerate_channel_widened():
    w = np.full((1, 4), 5.0, dtype=np.float32)
    params = channel_bounds(w, bits=4)
    assert params.lower[0] == pytest.approx(4.999)
    assert params.upper[0] == pytest.approx(5.001)


# ---------------------------------------------------------------------------
# policy / calibration
# ---------------------------------------------------------------------------

def test_policy_bit_bounds():
    with pytest.raises(ValueError):
        QuantPolicy(default_bits=1)
    with pytest.raises(ValueError):
        QuantPolicy(default_bits=4, first_layer_bits=9)
    p = QuantPolicy(default_bits=4, first_layer_bits=8, last_layer_bits=8)
    assert p.weight_bits(0, 7) == 8
    assert p.weight_bits(3, 7) == 4
    assert p.weight_bits(6, 7) == 8


def test_channel_params_validation():
    with pytest.raises(ValueError):
        ChannelQuantParams(4, np.array([0.0, 1.0]), np.array([1.0, 1.0]))


def test_calibration_observes_min_max():
    net = build_toy_classifier(seed=0)
    rng = np.random.default_rng(4)
    data = rng.uniform(-1, 1, size=(8, 1, 16, 16)).astype(np.float32)
    params = calibrate_activation_bounds(net, data, QuantPolicy(default_bits=4))
    assert params[0].lower == pytest.approx(float(data.min()))
    assert params[0].upper == pytest.approx(float(data.max()))
    # post-relu points have nonnegative bounds, with zero present
    for q in params[1:]:
        assert q.lower == pytest.approx(0.0, abs=1e-6)
        assert q.upper > 0


def test_calibration_empty_batch_errors():
    net = build_toy_classifier(seed=0)
    with pytest.raises(ValueError):
        calibrate_activation_bounds(net, np.zeros((0, 1, 16, 16), dtype=np.float32),
                                    QuantPolicy())


def test_calibration_degenerate_constant_activation():
    # constant observed range collapses to a point and must widen by 1e-3
    from fdda.quantizer import RangeCalibrator

    cal = RangeCalibrator(QuantPolicy(default_bits=4), 1)
    cal.on_activation(Tensor(np.full((2, 3), 5.0, dtype=np.float32)), 0)
    qp = cal.finalize()[0]
    assert qp.lower == pytest.approx(4.999)
    assert qp.upper == pytest.approx(5.001)
