import struct
import zlib

import numpy as np
import pytest

from cpganet import autodiff as ad
from cpganet.autodiff import Tensor
from cpganet.model import (
    FORMAT_VERSION,
    REFERENCE_BLOCK_PARAMS_M,
    REFERENCE_PARAMS_M,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    CPGANetPlus,
    ModelConfig,
    TensorShapeMismatchError,
    UnknownTensorError,
    count_flops,
    count_parameters,
    decode_checkpoint,
    encode_checkpoint,
    flop_breakdown,
    load_checkpoint,
    load_state,
    read_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def model():
    return CPGANetPlus(ModelConfig())


@pytest.fixture
def img():
    return Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)))


# -------------------------------------------------------------------- config
def test_cpga_requires_global_branch():
    with pytest.raises(ValueError):
        ModelConfig(enable_global_branch=False, enable_cpga_blocks=True)


@pytest.mark.parametrize("field,value", [("n_cp_blocks", -1), ("base_width", 0), ("global_width", 0)])
def test_config_rejects_bad_values(field, value):
    with pytest.raises(ValueError):
        ModelConfig(**{field: value})


def test_config_dict_round_trip():
    cfg = ModelConfig(n_cp_blocks=3, seed=9)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})


def test_ablation_rows():
    a, b, c = (ModelConfig.ablation(r) for r in "abc")
    assert (a.enable_global_branch, a.enable_cpga_blocks) == (False, False)
    assert (b.enable_global_branch, b.enable_cpga_blocks) == (True, False)
    assert c == ModelConfig()


# ------------------------------------------------------------------- forward
def test_forward_shape_and_range(model, img):
    out = model(img).data
    assert out.shape == (1, 3, 64, 64)
    assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_local_only_model_runs(img):
    m = CPGANetPlus(ModelConfig.ablation("a"))
    out = m(img).data
    assert out.shape == img.shape and np.isfinite(out).all()
    assert not any("global" in n or "gamma" in n for n, _ in m.named_parameters())


def test_duplicate_batch_items_identical(model):
    x = np.random.default_rng(1).uniform(0, 1, (1, 3, 32, 32))
    out = model(Tensor(np.concatenate([x, x]))).data
    assert out[0].tobytes() == out[1].tobytes()


def test_forward_deterministic(model, img):
    assert model(img).data.tobytes() == model(img).data.tobytes()


def test_gamma_img_positive(model, img):
    _, _, gamma = model.forward_parts(img)
    assert gamma.shape == (1, 1) and (gamma.data > 0).all()


@pytest.mark.parametrize("shape", [(1, 3, 63, 64), (1, 3, 64, 33), (1, 3, 14, 14), (1, 4, 32, 32), (3, 32, 32)])
def test_forward_rejects_bad_shapes(model, shape):
    with pytest.raises(ad.ShapeError):
        model(Tensor(np.zeros(shape)))


@pytest.mark.parametrize("value", [-0.02, 1.02, np.nan])
def test_forward_rejects_out_of_range(model, value):
    x = np.full((1, 3, 16, 16), 0.5)
    x[0, 0, 0, 0] = value
    with pytest.raises(ValueError):
        model(Tensor(x))


def test_forward_accepts_small_overshoot(model):
    x = np.full((1, 3, 16, 16), 1.005)
    assert model(Tensor(x)).shape == (1, 3, 16, 16)


# ---------------------------------------------------------------- accounting
def test_default_parameter_count_in_band(model):
    assert 40_000 <= count_parameters(model) <= 80_000


def test_block_count_monotone():
    counts = [count_parameters(CPGANetPlus(ModelConfig(n_cp_blocks=n))) for n in (0, 2, 4)]
    assert counts[0] < counts[1] < counts[2]
    assert sorted(REFERENCE_BLOCK_PARAMS_M) == [0, 2, 4]


def test_ablation_counts_increase():
    counts = [count_parameters(CPGANetPlus(ModelConfig.ablation(r))) for r in "abc"]
    assert counts[0] < counts[1] < counts[2]
    assert [REFERENCE_PARAMS_M[r] for r in "abc"] == [0.030, 0.050, 0.060]


def test_flops_scale_with_pixels(model):
    small, large = count_flops(model, 128, 128), count_flops(model, 256, 256)
    assert large / small == pytest.approx(4.0, rel=0.01)


def test_flop_breakdown_sums_to_total(model):
    parts = flop_breakdown(model, 32, 32)
    assert sum(parts.values()) == count_flops(model, 32, 32)
    assert {"stem", "blocks.0", "blocks.1", "out", "global_branch", "fusion"} <= set(parts)


def test_flops_need_even_size(model):
    with pytest.raises(ValueError):
        count_flops(model, 31, 32)


# ---------------------------------------------------------------- checkpoint
def test_save_load_save_byte_identical(tmp_path, model):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, str(a))
    loaded = load_checkpoint(str(a))
    save_checkpoint(loaded, str(b))
    assert a.read_bytes() == b.read_bytes()
    assert loaded.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_layout(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, str(path))
    raw = path.read_bytes()
    assert raw[:4] == b"CPGA"
    assert struct.unpack("<I", raw[4:8])[0] == FORMAT_VERSION
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
    ckpt = read_checkpoint(str(path))
    assert list(ckpt.tensors) == [n for n, _ in model.named_parameters()]


def test_corrupted_payload_byte(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, str(path))
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    with pytest.raises(CheckpointChecksumError):
        decode_checkpoint(bytes(raw))


def test_corrupted_trailer(model):
    raw = bytearray(encode_checkpoint({"config": model.config.to_dict()}, {"x": np.ones(3)}))
    raw[-1] ^= 0x01
    with pytest.raises(CheckpointChecksumError):
        decode_checkpoint(bytes(raw))


def test_version_mismatch():
    raw = bytearray(encode_checkpoint({}, {"x": np.ones(2)}))
    raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(raw))


@pytest.mark.parametrize("cut", [3, 10, 40, -3])
def test_truncated(cut):
    raw = encode_checkpoint({"a": 1}, {"x": np.ones((2, 3))})
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(raw[:cut])


def test_bad_magic():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + bytes(20))


def test_block_count_mismatch(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, str(path))
    with pytest.raises((UnknownTensorError, TensorShapeMismatchError)):
        load_checkpoint(str(path), ModelConfig(n_cp_blocks=1))


def test_shape_mismatch_error(model):
    tensors = {n: p.data for n, p in model.named_parameters()}
    first = next(iter(tensors))
    tensors[first] = np.zeros((1, 1))
    with pytest.raises(TensorShapeMismatchError):
        load_state(CPGANetPlus(ModelConfig()), tensors)


def test_unknown_tensor_error(model):
    tensors = {n: p.data for n, p in model.named_parameters()}
    tensors["ghost.weight"] = np.zeros(1)
    with pytest.raises(UnknownTensorError):
        load_state(CPGANetPlus(ModelConfig()), tensors)


def test_error_types_are_distinct():
    kinds = {CheckpointVersionError, CheckpointTruncatedError, CheckpointChecksumError,
             UnknownTensorError, TensorShapeMismatchError}
    assert len(kinds) == 5 and all(issubclass(k, CheckpointError) for k in kinds)


def test_save_is_atomic_and_leaves_no_temp(tmp_path, model):
    save_checkpoint(model, str(tmp_path / "m.ckpt"))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
