import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpganet import autodiff as ad
from cpganet.autodiff import Tensor
from cpganet.priors import (
    BT601_LUMA,
    EPS_POS,
    atsm_enhance,
    bright_channel,
    channel_priors,
    dark_channel,
    gamma_correct,
    luminance,
    mu_law,
)

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)


def pixel(*rgb):
    return Tensor(np.array(rgb, dtype=np.float32).reshape(1, len(rgb), 1, 1))


# ------------------------------------------------------------ channel priors
def test_channel_priors_pixel_example():
    out = channel_priors(pixel(0.2, 0.5, 0.8)).data.reshape(-1)
    assert out == pytest.approx([0.8, 0.2, 0.5])


def test_channel_priors_gray_pixel():
    assert np.allclose(channel_priors(pixel(0.4, 0.4, 0.4)).data.reshape(-1), 0.4)


def test_channel_priors_loop_oracle_on_64_channels():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((2, 64, 5, 6)).astype(np.float32)
    out = channel_priors(Tensor(f)).data
    for n in range(2):
        for i in range(5):
            for j in range(6):
                vals = [float(f[n, c, i, j]) for c in range(64)]
                assert out[n, 0, i, j] == max(vals)
                assert out[n, 1, i, j] == min(vals)
                assert out[n, 2, i, j] == pytest.approx(sum(vals) / 64, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (1, 5, 3, 3), elements=st.floats(-10, 10, width=32)))
def test_channel_priors_ordering(f):
    p = channel_priors(Tensor(f)).data
    assert (p[:, 1] <= p[:, 2] + 1e-6).all() and (p[:, 2] <= p[:, 0] + 1e-6).all()


def test_bright_and_dark_channel():
    x = pixel(0.1, 0.7, 0.3)
    assert bright_channel(x).data.item() == pytest.approx(0.7)
    assert dark_channel(x).data.item() == pytest.approx(0.1)


# ----------------------------------------------------------------- luminance
@pytest.mark.parametrize("rgb,expected", [((1, 0, 0), 0.299), ((0, 1, 0), 0.584), ((0, 0, 1), 0.114)])
def test_luminance_primaries(rgb, expected):
    with ad.precision("double"):
        assert luminance(pixel(*rgb)).data.item() == expected


def test_luminance_white_is_coefficient_sum():
    with ad.precision("double"):
        assert luminance(pixel(1, 1, 1)).data.item() == pytest.approx(0.997, abs=1e-15)


def test_luminance_bt601_option():
    with ad.precision("double"):
        assert luminance(pixel(0, 1, 0), BT601_LUMA).data.item() == 0.587


def test_luminance_range():
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (2, 3, 8, 8)))
    y = luminance(x).data
    assert y.shape == (2, 1, 8, 8) and y.min() >= 0 and y.max() <= 0.997 + 1e-6


def test_luminance_needs_three_channels():
    with pytest.raises(ad.ShapeError):
        luminance(Tensor(np.zeros((1, 4, 2, 2))))


# ------------------------------------------------------------- gamma correct
def test_gamma_examples():
    with ad.precision("double"):
        assert gamma_correct(Tensor([0.25]), 2.0).data[0] == 0.0625
        assert gamma_correct(Tensor([0.5]), 0.4545).data[0] == pytest.approx(0.5**0.4545, rel=1e-12)
    assert 0.5**0.4545 == pytest.approx(0.7297, abs=1e-4)


def test_gamma_one_is_identity_on_clamped_range():
    x = np.random.default_rng(2).uniform(EPS_POS, 1.0, 1000)
    with ad.precision("double"):
        assert np.array_equal(gamma_correct(Tensor(x), 1.0).data, x)


def test_gamma_clamps_below_eps():
    with ad.precision("double"):
        assert gamma_correct(Tensor([0.0, -0.5]), 1.0).data.tolist() == [EPS_POS, EPS_POS]


@pytest.mark.parametrize("gamma", [0.0, -1.0])
def test_gamma_must_be_positive(gamma):
    with pytest.raises(ValueError):
        gamma_correct(Tensor([0.5]), gamma)


def test_gamma_per_channel_broadcast():
    r = Tensor(np.full((1, 3, 2, 2), 0.5))
    g = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
    out = gamma_correct(r, g).data[0, :, 0, 0]
    assert out == pytest.approx([0.5, 0.25, 0.125])


@settings(max_examples=200, deadline=None)
@given(unit, unit, st.floats(0.05, 5.0))
def test_gamma_monotone(r1, r2, g):
    lo, hi = min(r1, r2), max(r1, r2)
    with ad.precision("double"):
        out = gamma_correct(Tensor([lo, hi]), g).data
    assert out[0] <= out[1]


# ---------------------------------------------------------------------- ATSM
def test_atsm_examples():
    with ad.precision("double"):
        assert atsm_enhance(Tensor([0.5]), Tensor([0.5]), 0.0).data[0] == 1.0
        assert atsm_enhance(Tensor([0.3]), Tensor([0.6]), Tensor([0.1])).data[0] == pytest.approx(
            (0.3 - 0.1) / 0.6 + 0.1, rel=1e-15)
    assert (0.3 - 0.1) / 0.6 + 0.1 == pytest.approx(0.43333, abs=1e-5)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_atsm_unit_transmission_returns_l(l, a):
    with ad.precision("double"):
        out = atsm_enhance(Tensor([l]), Tensor([1.0]), Tensor([a])).data[0]
    # (l - a) / 1 + a rounds back to l up to one ulp of the larger operand
    assert abs(out - l) <= 2 * np.spacing(max(abs(l), abs(a), 1e-300))


def test_atsm_zero_airlight_is_retinex_division():
    rng = np.random.default_rng(3)
    l, t = rng.uniform(0, 1, 50), rng.uniform(0.01, 1, 50)
    with ad.precision("double"):
        assert np.array_equal(atsm_enhance(Tensor(l), Tensor(t), 0.0).data, l / t)


# --------------------------------------------------------------------- µ-law
@pytest.mark.parametrize("mode", ["single", "double"])
def test_mu_law_fixed_points(mode):
    with ad.precision(mode):
        out = mu_law(Tensor([0.0, 1.0, -1.0])).data
    assert out.tolist() == [0.0, 1.0, -1.0]


def test_mu_law_reference_value():
    with ad.precision("double"):
        v = mu_law(Tensor([1 / 5000])).data[0]
    assert v == pytest.approx(math.log(2) / math.log(5001), rel=1e-12)
    # the quoted 0.08137 is truncated, not rounded; agree to its four significant figures
    assert v == pytest.approx(0.08137, abs=5e-5)


def test_mu_law_properties_on_random_points():
    x = np.random.default_rng(4).uniform(-1, 1, 10_000)
    with ad.precision("double"):
        y = mu_law(Tensor(x)).data
        y_neg = mu_law(Tensor(-x)).data
    assert np.array_equal(y_neg, -y)
    order = np.argsort(x)
    assert (np.diff(y[order]) > 0).all()
    assert (np.abs(y) <= 1).all()


def test_mu_law_gradient_at_zero_is_finite():
    x = Tensor([0.0], requires_grad=True)
    mu_law(x).sum().backward()
    assert np.isfinite(x.grad).all() and x.grad[0] > 0


def test_priors_are_graph_ops():
    x = Tensor(np.random.default_rng(5).uniform(0.1, 0.9, (1, 3, 4, 4)), requires_grad=True)
    loss = channel_priors(x).sum() + luminance(x).sum() + gamma_correct(x, 2.0).sum() + mu_law(x).sum()
    loss.backward()
    assert x.grad is not None and np.isfinite(x.grad).all()
