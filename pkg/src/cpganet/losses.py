"""Supervision losses (L1, perceptual, HDR-L1, SSIM) and PSNR / SSIM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import kaiming_uniform
from .priors import mu_law

PSNR_CAP = 100.0


# ------------------------------------------------------------------ configs
@dataclass
class LossSpec:
    l1: float = 1.0
    perceptual: float = 1.0
    hdr_l1: float = 1.0
    ssim: float = 1.0
    mu: float = 5000.0

    def __post_init__(self):
        for name in LOSS_NAMES:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not any(getattr(self, name) > 0 for name in LOSS_NAMES):
            raise ValueError("at least one loss weight must be positive")

    def weights(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in LOSS_NAMES}

    def scaled(self, factor: float) -> "LossSpec":
        return LossSpec(**{k: v * factor for k, v in self.weights().items()}, mu=self.mu)

    @classmethod
    def parse(cls, text: str, mu: float = 5000.0) -> "LossSpec":
        """Parse ``"l1,perceptual"`` or ``"l1:1,ssim:0.5"``; unlisted losses get weight 0."""
        weights = dict.fromkeys(LOSS_NAMES, 0.0)
        for item in filter(None, (part.strip() for part in text.split(","))):
            name, _, value = item.partition(":")
            name = _ALIASES.get(name.strip().lower(), name.strip().lower())
            if name not in weights:
                raise ValueError(f"unknown loss {name!r}; expected one of {', '.join(LOSS_NAMES)}")
            weights[name] = float(value) if value else 1.0
        return cls(**weights, mu=mu)


LOSS_NAMES = ("l1", "perceptual", "hdr_l1", "ssim")
_ALIASES = {"per": "perceptual", "perc": "perceptual", "hdr": "hdr_l1", "hdr-l1": "hdr_l1", "hdrl1": "hdr_l1"}

# loss-combination ablation rows (a)-(e)
LOSS_ABLATIONS = {
    "a": LossSpec(1, 0, 0, 0),
    "b": LossSpec(1, 1, 0, 0),
    "c": LossSpec(1, 1, 1, 0),
    "d": LossSpec(1, 1, 0, 1),
    "e": LossSpec(1, 1, 1, 1),
}


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def kernel(self) -> np.ndarray:
        """Normalised 2-D Gaussian window (float64)."""
        ax = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2.0
        g = np.exp(-(ax**2) / (2 * self.sigma**2))
        k = np.outer(g, g)
        return k / k.sum()


# -------------------------------------------------------------- extractors
class FeatureExtractor:
    """Fixed mapping from an image batch to a list of feature maps."""

    def __call__(self, x: Tensor) -> list[Tensor]:  # pragma: no cover - interface
        raise NotImplementedError


class IdentityExtractor(FeatureExtractor):
    def __call__(self, x: Tensor) -> list[Tensor]:
        return [x]


class RandomConvExtractor(FeatureExtractor):
    """Frozen random conv pyramid standing in for a pretrained VGG16.

    Each stage is a 3x3 stride-2 conv followed by relu; the default widths
    3 -> 16 -> 32 -> 64 are drawn once from ``seed``.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64), stages=None):
        if stages is None:
            rng = np.random.default_rng(seed)
            stages, cin = [], 3
            for cout in widths:
                stages.append((kaiming_uniform(rng, (cout, cin, 3, 3), a=0.0), np.zeros(cout)))
                cin = cout
        self.stages = [(np.asarray(w, np.float64), np.asarray(b, np.float64)) for w, b in stages]
        self._cache: dict = {}

    def _weights(self, dtype):
        if dtype not in self._cache:
            self._cache[dtype] = [
                (Tensor._wrap(w.astype(dtype)), Tensor._wrap(b.astype(dtype))) for w, b in self.stages
            ]
        return self._cache[dtype]

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for w, b in self._weights(x.dtype):
            x = ad.relu(ad.conv2d(x, w, b, stride=2, padding=1))
            feats.append(x)
        return feats

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.stages):
            out[f"stages.{i}.weight"] = w
            out[f"stages.{i}.bias"] = b
        return out

    def save(self, path: str) -> None:
        from .model import encode_checkpoint, write_atomic

        write_atomic(path, encode_checkpoint({"extractor": "conv-pyramid"}, self.named_tensors()))

    @classmethod
    def load(cls, path: str) -> "RandomConvExtractor":
        from .model import read_checkpoint

        tensors = read_checkpoint(path).tensors
        n = len([k for k in tensors if k.endswith(".weight")])
        try:
            stages = [(tensors[f"stages.{i}.weight"], tensors[f"stages.{i}.bias"]) for i in range(n)]
        except KeyError as exc:
            raise ValueError(f"extractor file lacks tensor {exc}") from exc
        return cls(stages=stages)


_default_extractor: Optional[RandomConvExtractor] = None


def default_extractor() -> RandomConvExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = RandomConvExtractor(seed=0)
    return _default_extractor


# ------------------------------------------------------------------ losses
def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_loss(yhat: Tensor, ygt: Tensor) -> Tensor:
    _check_pair(yhat, ygt)
    return ad.reduce(ad.absolute(yhat - ygt), None, "mean")


def hdr_l1_loss(yhat: Tensor, ygt: Tensor, mu: float = 5000.0) -> Tensor:
    _check_pair(yhat, ygt)
    return l1_loss(mu_law(yhat, mu), mu_law(ygt, mu))


def perceptual_loss(yhat: Tensor, ygt: Tensor, extractor: Optional[FeatureExtractor] = None) -> Tensor:
    """Sum over extractor stages of the mean squared feature difference."""
    _check_pair(yhat, ygt)
    extractor = extractor or default_extractor()
    total = None
    for fa, fb in zip(extractor(yhat), extractor(ygt.detach())):
        d = fa - fb
        term = ad.reduce(d * d, None, "mean")
        total = term if total is None else total + term
    return total


def ssim(x: Tensor, y: Tensor, p: SSIMParams = SSIMParams()) -> Tensor:
    """Mean SSIM over valid-window positions and channels (differentiable).

    Local statistics use the Gaussian window without padding; each channel is
    filtered independently and the SSIM map is averaged over everything.
    """
    _check_pair(x, y)
    if x.ndim != 4:
        raise ad.ShapeError(f"ssim expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < p.window or w < p.window:
        raise ad.ShapeError(f"ssim needs H, W >= {p.window}, got {h}x{w}")
    kern = Tensor._wrap(p.kernel().astype(x.dtype).reshape(1, 1, p.window, p.window))
    xs = ad.reshape(x, (n * c, 1, h, w))
    ys = ad.reshape(y, (n * c, 1, h, w))

    def blur(t: Tensor) -> Tensor:
        return ad.conv2d(t, kern)

    c1 = (p.k1 * p.data_range) ** 2
    c2 = (p.k2 * p.data_range) ** 2
    mx, my = blur(xs), blur(ys)
    mxx, myy, mxy = mx * mx, my * my, mx * my
    sxx = blur(xs * xs) - mxx
    syy = blur(ys * ys) - myy
    sxy = blur(xs * ys) - mxy
    num = (mxy * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mxx + myy + c1) * (sxx + syy + c2)
    return ad.reduce(num / den, None, "mean")


def ssim_loss(yhat: Tensor, ygt: Tensor, p: SSIMParams = SSIMParams()) -> Tensor:
    return 1.0 - ssim(yhat, ygt, p)


def loss_components(yhat: Tensor, ygt: Tensor, spec: LossSpec,
                    extractor: Optional[FeatureExtractor] = None) -> dict[str, Tensor]:
    """Every loss with positive weight, unweighted, keyed by name."""
    fns = {
        "l1": lambda: l1_loss(yhat, ygt),
        "perceptual": lambda: perceptual_loss(yhat, ygt, extractor),
        "hdr_l1": lambda: hdr_l1_loss(yhat, ygt, spec.mu),
        "ssim": lambda: ssim_loss(yhat, ygt),
    }
    return {name: fns[name]() for name, w in spec.weights().items() if w > 0}


def total_loss(yhat: Tensor, ygt: Tensor, spec: LossSpec, extractor: Optional[FeatureExtractor] = None,
               components: Optional[dict] = None) -> Tensor:
    """Weighted sum of the enabled losses.

    When ``components`` is a dict it is filled with the unweighted values.
    """
    weights = spec.weights()
    if not any(w > 0 for w in weights.values()):
        raise ValueError("all loss weights are zero")
    parts = loss_components(yhat, ygt, spec, extractor)
    if components is not None:
        components.update(parts)
    total = None
    for name, value in parts.items():
        term = value * weights[name]
        total = term if total is None else total + term
    return total


# ----------------------------------------------------------------- metrics
def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def psnr(x, y) -> float:
    """PSNR in dB for unit dynamic range, capped at 100 dB."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ad.ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_metric(x, y, p: SSIMParams = SSIMParams()) -> float:
    """Non-differentiable SSIM evaluated in double precision."""
    a, b = _as_array(x), _as_array(y)
    with ad.no_grad(), ad.precision("double"):
        return float(ssim(Tensor._wrap(a), Tensor._wrap(b), p).data)
