import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpganet import autodiff as ad
from cpganet.autodiff import Tensor
from cpganet.losses import (
    LOSS_NAMES,
    LOSS_ABLATIONS,
    IdentityExtractor,
    LossSpec,
    RandomConvExtractor,
    SSIMParams,
    hdr_l1_loss,
    l1_loss,
    loss_components,
    perceptual_loss,
    psnr,
    ssim,
    ssim_loss,
    ssim_metric,
    total_loss,
)
from oracles import l1_loop, psnr_loop, ssim_direct


def pair(seed, shape=(1, 3, 16, 16)):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0, 1, shape)), Tensor(rng.uniform(0, 1, shape))


def value(t):
    return float(t.data)


# ------------------------------------------------------------------ LossSpec
def test_spec_validation():
    with pytest.raises(ValueError):
        LossSpec(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossSpec(l1=-1)


@pytest.mark.parametrize("text,weights", [
    ("l1", (1, 0, 0, 0)),
    ("l1,per", (1, 1, 0, 0)),
    ("l1:1,ssim:0.5", (1, 0, 0, 0.5)),
    ("l1,perceptual,hdr_l1,ssim", (1, 1, 1, 1)),
    (" L1 , HDR ", (1, 0, 1, 0)),
])
def test_spec_parse(text, weights):
    assert tuple(LossSpec.parse(text).weights().values()) == weights


def test_spec_parse_unknown():
    with pytest.raises(ValueError):
        LossSpec.parse("l1,lpips")


def test_loss_ablation_rows():
    assert {k: tuple(v.weights().values()) for k, v in LOSS_ABLATIONS.items()} == {
        "a": (1, 0, 0, 0), "b": (1, 1, 0, 0), "c": (1, 1, 1, 0), "d": (1, 1, 0, 1), "e": (1, 1, 1, 1)}


# ------------------------------------------------------------------------ L1
def test_l1_examples():
    x = Tensor(np.random.default_rng(0).uniform(0, 0.9, (1, 3, 4, 4)))
    assert value(l1_loss(x, x)) == 0
    with ad.precision("double"):
        xd = Tensor(x.data.astype(np.float64))
        assert value(l1_loss(xd + 0.1, xd)) == pytest.approx(0.1, abs=1e-12)


def test_l1_loop_oracle():
    with ad.precision("double"):
        a, b = pair(1)
        assert abs(value(l1_loss(a, b)) - l1_loop(a.data, b.data)) < 1e-7


def test_l1_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        l1_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 5))))


# -------------------------------------------------------------------- HDR-L1
def test_hdr_examples():
    with ad.precision("double"):
        x = Tensor(np.full((1, 1, 2, 2), 0.3))
        assert value(hdr_l1_loss(x, x)) == 0
        assert value(hdr_l1_loss(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))))) == 1.0
        t = lambda v: math.log(1 + 5000 * v) / math.log(5001)
        got = value(hdr_l1_loss(Tensor(np.full((1, 1, 1, 1), 0.1)), Tensor(np.full((1, 1, 1, 1), 0.2))))
        assert got == pytest.approx(abs(t(0.1) - t(0.2)), rel=1e-12)


# ---------------------------------------------------------------------- SSIM
def test_ssim_window_sums_to_one():
    assert SSIMParams().kernel().sum() == pytest.approx(1.0, abs=1e-15)


def test_ssim_self_similarity():
    x, _ = pair(2)
    assert value(ssim(x, x)) == pytest.approx(1.0, abs=1e-6)
    c = Tensor(np.full((1, 3, 16, 16), 0.4))
    assert value(ssim(c, c + 0.0)) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_direct_reference(seed):
    a, b = pair(seed, (1, 3, 32, 32))
    assert abs(ssim_metric(a, b) - ssim_direct(a.data, b.data)) < 1e-5


def test_ssim_too_small():
    with pytest.raises(ad.ShapeError):
        ssim(Tensor(np.zeros((1, 3, 10, 16))), Tensor(np.zeros((1, 3, 10, 16))))


def test_ssim_loss_range_on_noise():
    a, b = pair(3)
    v = value(ssim_loss(a, b))
    assert 0 < v <= 2
    assert value(ssim_loss(a, a)) == pytest.approx(0.0, abs=1e-6)


# ---------------------------------------------------------------- perceptual
def test_perceptual_identity_extractor_is_mse():
    with ad.precision("double"):
        a, b = pair(4)
        assert value(perceptual_loss(a, b, IdentityExtractor())) == pytest.approx(
            float(np.mean((a.data - b.data) ** 2)), rel=1e-12)


def test_perceptual_zero_on_identical():
    a, _ = pair(5)
    assert value(perceptual_loss(a, a)) == 0


def test_extractor_deterministic_and_frozen():
    ext = RandomConvExtractor(seed=0)
    a, b = pair(6)
    f1 = [f.data.tobytes() for f in ext(a)]
    f2 = [f.data.tobytes() for f in RandomConvExtractor(seed=0)(a)]
    assert f1 == f2
    y = Tensor(a.data, requires_grad=True)
    perceptual_loss(y, b, ext).backward()
    assert y.grad is not None
    assert all(not w.requires_grad for w, _ in ext._weights(np.float32))


def test_extractor_file_round_trip(tmp_path):
    ext = RandomConvExtractor(seed=3, widths=(4, 8))
    path = tmp_path / "ext.ckpt"
    ext.save(str(path))
    back = RandomConvExtractor.load(str(path))
    a, _ = pair(7)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(ext(a), back(a)))


def test_extractor_pyramid_shapes():
    feats = RandomConvExtractor()(Tensor(np.zeros((1, 3, 32, 32))))
    assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4)]


# --------------------------------------------------------------------- total
def test_total_row_a_is_l1():
    a, b = pair(8)
    assert value(total_loss(a, b, LOSS_ABLATIONS["a"])) == value(l1_loss(a, b))


def test_total_row_e_is_sum_of_components():
    with ad.precision("double"):
        a, b = pair(9)
        parts = [l1_loss(a, b), perceptual_loss(a, b), hdr_l1_loss(a, b), ssim_loss(a, b)]
        assert value(total_loss(a, b, LOSS_ABLATIONS["e"])) == pytest.approx(sum(map(value, parts)), abs=1e-6)


@pytest.mark.parametrize("row", sorted(LOSS_ABLATIONS))
def test_total_zero_on_identical(row):
    a, _ = pair(10)
    assert value(total_loss(a, a, LOSS_ABLATIONS[row])) == pytest.approx(0.0, abs=1e-6)


def test_total_linear_in_weights():
    with ad.precision("double"):
        a, b = pair(11)
        spec = LossSpec(1, 0.5, 2, 1)
        assert value(total_loss(a, b, spec.scaled(2))) == pytest.approx(2 * value(total_loss(a, b, spec)), rel=1e-12)


def test_components_only_enabled():
    a, b = pair(12)
    assert set(loss_components(a, b, LossSpec.parse("l1,ssim"))) == {"l1", "ssim"}
    assert LOSS_NAMES == ("l1", "perceptual", "hdr_l1", "ssim")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_non_negative_and_finite(seed):
    a, b = pair(seed)
    for name, v in loss_components(a, b, LossSpec()).items():
        assert np.isfinite(v.data) and value(v) >= -1e-7, name


# -------------------------------------------------------------------- metrics
def test_psnr_examples():
    x = np.full((1, 3, 8, 8), 0.5)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(x, x) == 100.0


@pytest.mark.parametrize("seed", range(5))
def test_psnr_loop_oracle(seed):
    a, b = pair(seed)
    assert abs(psnr(a, b) - psnr_loop(a.data, b.data)) < 1e-6


def test_psnr_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


def test_ssim_metric_bounds():
    for seed in range(5):
        a, b = pair(seed)
        assert -1 <= ssim_metric(a, b) <= 1
        noisy = Tensor(np.clip(a.data + 0.05 * np.random.default_rng(seed).standard_normal(a.shape), 0, 1))
        assert 0 < ssim_metric(a, noisy) < 1
