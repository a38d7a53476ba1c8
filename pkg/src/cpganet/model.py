"""CPGA-Net+ assembly, parameter / FLOP accounting and checkpoint files."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import EPS_GAMMA, IAAF, Conv2d, CPBlock, CPGABlock, Linear, Module, ResCBAM
from .priors import EPS_POS, DEFAULT_LUMA, bright_channel, dark_channel, gamma_correct, luminance

REFERENCE_PARAMS_M = {"a": 0.030, "b": 0.050, "c": 0.060}
REFERENCE_BLOCK_PARAMS_M = {0: 0.034, 2: 0.060, 4: 0.087}
REFERENCE_FLOPS_G = 9.356


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The default widths give ~57k parameters and ~15 GFLOPs at 600x400; the
    ablation rows come out at roughly 21k / 49k / 57k parameters.
    """

    n_cp_blocks: int = 2
    base_width: int = 16
    global_width: int = 24
    enable_global_branch: bool = True
    enable_cpga_blocks: bool = True
    luminance_coefficients: tuple = DEFAULT_LUMA
    seed: int = 0
    t_width: int = 8
    a_width: int = 8
    iaaf_width: int = 8
    global_depth: int = 3
    cbam_reduction: int = 4
    rgb_fusion: bool = True
    normalize: str = "sigmoid"

    def __post_init__(self):
        self.luminance_coefficients = tuple(float(c) for c in self.luminance_coefficients)
        if self.n_cp_blocks < 0:
            raise ValueError("n_cp_blocks must be >= 0")
        for name in ("base_width", "global_width", "t_width", "a_width", "iaaf_width", "cbam_reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.global_depth < 0:
            raise ValueError("global_depth must be >= 0")
        if self.enable_cpga_blocks and not self.enable_global_branch:
            raise ValueError("enable_cpga_blocks requires enable_global_branch")
        if len(self.luminance_coefficients) != 3:
            raise ValueError("luminance_coefficients needs three values")
        if self.normalize not in ("sigmoid", "clamp"):
            raise ValueError(f"unknown normalize mode {self.normalize!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["luminance_coefficients"] = list(self.luminance_coefficients)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def ablation(cls, row: str, **overrides) -> "ModelConfig":
        """Rows of the systematic-design ablation: (a) local only,
        (b) + global branch, (c) + CPGA blocks (the default)."""
        flags = {
            "a": dict(enable_global_branch=False, enable_cpga_blocks=False),
            "b": dict(enable_global_branch=True, enable_cpga_blocks=False),
            "c": dict(enable_global_branch=True, enable_cpga_blocks=True),
        }
        if row not in flags:
            raise ValueError(f"unknown ablation row {row!r}; expected a, b or c")
        return cls(**{**flags[row], **overrides})


class GlobalBranch(Module):
    """Half-resolution gamma estimation.

    A preprocessing conv over RGB plus bright/dark/luminance priors, a stride-2
    ResCBAM whose skip carries the subsampled preprocessing output, a conv
    stack, and global average pooling to a feature vector.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        g = cfg.global_width
        self.pre = Conv2d(6, g, 3, rng, act="relu")
        self.down = ResCBAM(g, g, rng, stride=2, reduction=cfg.cbam_reduction)
        self.stack = [Conv2d(g, g, 3, rng, act="relu") for _ in range(cfg.global_depth)]
        self.coefficients = cfg.luminance_coefficients

    def forward(self, img: Tensor) -> Tensor:
        x = ad.concat([img, bright_channel(img), dark_channel(img), luminance(img, self.coefficients)], axis=1)
        h = self.down(self.pre(x))
        for conv in self.stack:
            h = conv(h)
        return ad.reduce(h, (2, 3), "mean")


class CPGANetPlus(Module):
    """Local branch of CP / CPGA blocks, global gamma branch, and final
    image-level IAAF between ``R`` and ``R ** gamma_img``."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        cfg = cfg or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.base_width
        rgb = 3 if cfg.rgb_fusion else 0
        self.stem = Conv2d(3, c, 3, rng, act="relu")
        if cfg.enable_cpga_blocks:
            self.blocks = [
                CPGABlock(c, cfg.global_width, rng, cfg.t_width, cfg.a_width, cfg.iaaf_width, rgb, cfg.normalize)
                for _ in range(cfg.n_cp_blocks)
            ]
        else:
            self.blocks = [CPBlock(c, rng, cfg.t_width, cfg.a_width, rgb) for _ in range(cfg.n_cp_blocks)]
        self.out = Conv2d(c, 3, 3, rng)
        if cfg.enable_global_branch:
            self.global_branch = GlobalBranch(cfg, rng)
            self.gamma_head = Linear(cfg.global_width, 1, rng)
            self.fusion = IAAF(3, rng, width=3)
        self.in_channels = 3
        for name, child in self.named_children():
            child.scope_name = name

    def forward(self, img: Tensor) -> Tensor:
        check_input(img)
        out, _, _ = self.forward_parts(img)
        return out

    def forward_parts(self, img: Tensor) -> tuple[Tensor, Tensor, Optional[Tensor]]:
        """Return (enhanced image, local-branch output R, gamma_img or None)."""
        cfg = self.config
        gfeat = gamma = None
        if cfg.enable_global_branch:
            gfeat = self.global_branch(img)
            with ad.flop_scope("gamma_head"):
                gamma = ad.softplus(self.gamma_head(gfeat)) + EPS_GAMMA
        f = self.stem(img)
        fuse_img = img if cfg.rgb_fusion else None
        for block in self.blocks:
            f = block(f, fuse_img, gfeat)
        r = img + self.out(f)
        if gamma is None:
            return ad.clamp(r, 0.0, 1.0), r, None
        gamma4 = ad.reshape(gamma, (gamma.shape[0], 1, 1, 1))
        r_gamma = gamma_correct(ad.clamp(r, EPS_POS, 1.0), gamma4)
        y = self.fusion(r, r_gamma)
        return ad.clamp(y, 0.0, 1.0), r, gamma


def check_input(img: Tensor) -> None:
    if img.ndim != 4 or img.shape[1] != 3:
        raise ad.ShapeError(f"expected an image batch [N,3,H,W], got {img.shape}")
    h, w = img.shape[2:]
    if h % 2 or w % 2:
        raise ad.ShapeError(f"height and width must be even, got {h}x{w}")
    if h < 16 or w < 16:
        raise ad.ShapeError(f"height and width must be >= 16, got {h}x{w}")
    lo, hi = float(img.data.min()), float(img.data.max())
    if lo < -0.01 or hi > 1.01 or not np.isfinite(img.data).all():
        raise ValueError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")


# --------------------------------------------------------------- accounting
def count_parameters(model: Module) -> int:
    return model.num_parameters()


def flop_breakdown(model: Module, h: int, w: int) -> dict[str, int]:
    """FLOPs of one forward pass at ``h x w`` grouped by top-level child.

    Convolutions contribute 2*MACs (bias excluded); elementwise ops one FLOP
    per output element; reductions one per input element.
    """
    if h % 2 or w % 2:
        raise ValueError("count_flops needs even h and w")
    cin = getattr(model, "in_channels", 3)
    with ad.no_grad(), ad.count_flops() as counter:
        model.forward(ad.zeros((1, cin, h, w)))
    out: dict[str, int] = {}
    for scope, flops in counter.by_scope.items():
        key = scope.split("/")[0] or "(top)"
        out[key] = out.get(key, 0) + flops
    return out


def count_flops(model: Module, h: int, w: int) -> int:
    return sum(flop_breakdown(model, h, w).values())


# ---------------------------------------------------------------- checkpoint
MAGIC = b"CPGA"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class TensorShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Decoded checkpoint: header JSON plus an ordered named tensor table."""

    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> Optional[ModelConfig]:
        cfg = self.header.get("config")
        return ModelConfig.from_dict(cfg) if cfg is not None else None


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    blob = _canonical_json(header)
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        shape = arr.shape or (1,)
        payload = arr.tobytes()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", len(shape))]
        parts += [struct.pack(f"<{len(shape)}Q", *shape), payload, struct.pack("<I", zlib.crc32(payload))]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        payload = r.take(4 * int(np.prod(shape)))
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointChecksumError(f"payload checksum mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CheckpointChecksumError("file checksum mismatch")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(header, tensors)


def write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".ckpt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_state(model: Module, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    """Copy named arrays into ``model``'s parameters, keeping their dtype."""
    params = dict(model.named_parameters())
    for name, arr in tensors.items():
        if name not in params:
            if strict:
                raise UnknownTensorError(f"checkpoint tensor {name!r} has no matching parameter")
            continue
        p = params[name]
        if tuple(arr.shape) != p.shape:
            raise TensorShapeMismatchError(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {p.shape}")
        p.data = arr.astype(p.dtype)
    missing = set(params) - set(tensors)
    if strict and missing:
        raise UnknownTensorError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")


def save_checkpoint(model: CPGANetPlus, path: str, extra_tensors: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    header = {"config": model.config.to_dict()}
    if meta:
        header["meta"] = meta
    tensors = dict(state_dict(model))
    if extra_tensors:
        tensors.update(extra_tensors)
    write_atomic(path, encode_checkpoint(header, tensors))


def load_checkpoint(path: str, config: Optional[ModelConfig] = None) -> CPGANetPlus:
    """Rebuild a model from ``path``; ``config`` overrides the stored one."""
    ckpt = read_checkpoint(path)
    model = CPGANetPlus(config or ckpt.config)
    weights = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
    load_state(model, weights)
    return model
