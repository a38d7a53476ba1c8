"""Building blocks: conv layers, ResBlock, ResCBAM, the t / Ã estimators,
the Channel-Prior block, IAAF fusion and the CPGA block."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .priors import EPS_POS, atsm_enhance, channel_priors, gamma_correct

EPS_T = 1e-2
EPS_GAMMA = 0.1


class Module:
    """Minimal parameter container.

    Parameters and sub-modules are discovered from instance attributes (and
    lists of them) in assignment order, which fixes the naming and the order
    of random initialisation.
    """

    scope_name: Optional[str] = None

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        with ad.flop_scope(self.scope_name or type(self).__name__):
            return self.forward(*args, **kwargs)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, mode: str) -> "Module":
        """Cast every parameter in place to ``single`` or ``double``."""
        dtype = {"single": np.float32, "double": np.float64}[mode]
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], a: float = math.sqrt(5.0)) -> np.ndarray:
    """Fan-in Kaiming-uniform draw for leaky-relu slope ``a``.

    The default ``a = sqrt(5)`` gives the usual conv-layer bound
    ``1 / sqrt(fan_in)``; ``a = 0`` is the plain-relu He bound ``sqrt(6 / fan_in)``.
    """
    fan_in = int(np.prod(shape[1:]))
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, act: str = "none", bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k)))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.act = act
        self.in_channels = cin
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        return ad.activation(y, self.act)


class Linear(Module):
    """Dense layer over ``[N, Cin]`` features, computed as a 1x1 convolution."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, act: str = "none"):
        self.conv = Conv2d(cin, cout, 1, rng, act=act)
        self.in_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape
        y = self.conv(ad.reshape(x, (n, c, 1, 1)))
        return ad.reshape(y, (n, y.shape[1]))


class ResBlock(Module):
    """conv-relu-conv with an identity skip; shape preserving."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c, c, 3, rng, act="relu")
        self.conv2 = Conv2d(c, c, 3, rng)
        self.in_channels = c

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.conv1(x))


class ChannelAttention(Module):
    def __init__(self, c: int, reduction: int, rng: np.random.Generator):
        hidden = max(1, c // reduction)
        self.fc1 = Conv2d(c, hidden, 1, rng, act="relu")
        self.fc2 = Conv2d(hidden, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        avg = ad.reduce(x, (2, 3), "mean", keepdims=True)
        mx = ad.reduce(x, (2, 3), "max", keepdims=True)
        return ad.sigmoid(self.fc2(self.fc1(avg)) + self.fc2(self.fc1(mx)))


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator, k: int = 7):
        self.conv = Conv2d(2, 1, k, rng)

    def forward(self, x: Tensor) -> Tensor:
        desc = ad.concat([ad.reduce(x, 1, "mean", keepdims=True), ad.reduce(x, 1, "max", keepdims=True)], axis=1)
        return ad.sigmoid(self.conv(desc))


class ResCBAM(Module):
    """Residual block refined by channel-then-spatial attention.

    With ``stride=2`` the first conv downsamples and the skip path is the
    input subsampled on the same grid, so odd sizes round up.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, reduction: int = 4):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, act="relu")
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.channel_att = ChannelAttention(cout, reduction, rng)
        self.spatial_att = SpatialAttention(rng)
        self.proj = Conv2d(cin, cout, 1, rng) if cin != cout else None
        self.stride = stride
        self.in_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        y = y * self.channel_att(y)
        y = y * self.spatial_att(y)
        skip = x if self.stride == 1 else x[:, :, :: self.stride, :: self.stride]
        if self.proj is not None:
            skip = self.proj(skip)
        return y + skip


class TEstimator(Module):
    """Transmission map from features and their channel priors, bounded to [EPS_T, 1]."""

    def __init__(self, cin: int, width: int, cout: int, rng: np.random.Generator):
        self.head = Conv2d(cin + 3, width, 3, rng, act="relu")
        self.res = ResBlock(width, rng)
        self.out = Conv2d(width, cout, 1, rng)
        self.in_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        z = self.out(self.res(self.head(ad.concat([x, channel_priors(x)], axis=1))))
        return ad.sigmoid(z) * (1.0 - EPS_T) + EPS_T


class AEstimator(Module):
    """Mini U-Net: one stride-2 downsample to twice the width, a bottleneck
    conv, nearest 2x upsample and a concatenated skip from the encoder.
    Needs even H, W."""

    def __init__(self, cin: int, width: int, cout: int, rng: np.random.Generator):
        self.enc = Conv2d(cin, width, 3, rng, act="relu")
        self.down = Conv2d(width, 2 * width, 3, rng, stride=2, act="relu")
        self.mid = Conv2d(2 * width, 2 * width, 3, rng, act="relu")
        self.dec = Conv2d(3 * width, width, 3, rng, act="relu")
        self.out = Conv2d(width, cout, 1, rng)
        self.in_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        e = self.enc(x)
        u = ad.upsample_nearest2x(self.mid(self.down(e)))
        if u.shape[2:] != e.shape[2:]:
            raise ad.ShapeError(f"AEstimator needs even spatial size, got {x.shape[2:]}")
        return self.out(self.dec(ad.concat([u, e], axis=1)))


class CPBlock(Module):
    """Channel-Prior block: scattering-driven attention followed by a fusion conv.

    ``R_att = (L'(x) - A(x)) / t(x, priors(x)) + A(x)`` where ``x`` is the
    feature map, optionally concatenated with the RGB input.
    """

    def __init__(self, c: int, rng: np.random.Generator, t_width: int = 8, a_width: int = 8, rgb_channels: int = 3):
        cin = c + rgb_channels
        self.l_map = Conv2d(cin, c, 1, rng)
        self.t_est = TEstimator(cin, t_width, c, rng)
        self.a_est = AEstimator(cin, a_width, c, rng)
        self.fusion = Conv2d(c, c, 1, rng)
        self.width = c
        self.rgb_channels = rgb_channels
        self.in_channels = c

    def _input(self, f: Tensor, img: Optional[Tensor]) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.width:
            raise ad.ShapeError(f"CPBlock expects {self.width} channels, got {f.shape}")
        if self.rgb_channels:
            if img is None:
                raise ValueError("CPBlock built with RGB fusion needs the input image")
            return ad.concat([f, img], axis=1)
        return f

    def attention(self, f: Tensor, img: Optional[Tensor] = None) -> Tensor:
        x = self._input(f, img)
        return atsm_enhance(self.l_map(x), self.t_est(x), self.a_est(x))

    def forward(self, f: Tensor, img: Optional[Tensor] = None, global_feat: Optional[Tensor] = None) -> Tensor:
        return self.fusion(self.attention(f, img))


class IAAF(Module):
    """Intersection-aware fusion ``r + r_gamma - intersect(r, r_gamma)``."""

    def __init__(self, c: int, rng: np.random.Generator, width: Optional[int] = None):
        width = width or c
        self.inter1 = Conv2d(2 * c, width, 3, rng, act="relu")
        self.inter2 = Conv2d(width, c, 3, rng)
        self.channels = c
        self.in_channels = c

    def intersection(self, r: Tensor, r_gamma: Tensor) -> Tensor:
        return self.inter2(self.inter1(ad.concat([r, r_gamma], axis=1)))

    def forward(self, r: Tensor, r_gamma: Tensor) -> Tensor:
        if r.shape != r_gamma.shape:
            raise ad.ShapeError(f"IAAF operands differ: {r.shape} vs {r_gamma.shape}")
        return r + r_gamma - self.intersection(r, r_gamma)


def normalize_positive(x: Tensor, mode: str) -> Tensor:
    if mode == "sigmoid":
        return ad.sigmoid(x)
    if mode == "clamp":
        return ad.clamp(x, EPS_POS, 1.0)
    raise ValueError(f"unknown normalisation {mode!r}")


class GammaHead(Module):
    """Maps pooled global features to ``cout`` strictly positive gammas."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.fc = Linear(cin, cout, rng)
        self.in_channels = cin

    def forward(self, g: Tensor) -> Tensor:
        return ad.softplus(self.fc(g)) + EPS_GAMMA


class CPGABlock(Module):
    """CP block plus gamma-corrected plug-in attention:
    ``IAAF(R_att, R_att ** gamma_c) + R_att`` with one gamma per channel."""

    def __init__(self, c: int, global_width: int, rng: np.random.Generator, t_width: int = 8, a_width: int = 8,
                 iaaf_width: Optional[int] = None, rgb_channels: int = 3, normalize: str = "sigmoid"):
        self.cp = CPBlock(c, rng, t_width, a_width, rgb_channels)
        self.gamma_head = GammaHead(global_width, c, rng)
        self.iaaf = IAAF(c, rng, iaaf_width)
        self.normalize = normalize
        self.width = c
        self.in_channels = c

    def forward(self, f: Tensor, img: Optional[Tensor], global_feat: Tensor) -> Tensor:
        r_att = self.cp(f, img)
        gamma = self.gamma_head(global_feat)
        gamma = ad.reshape(gamma, gamma.shape + (1, 1))
        r_gamma = gamma_correct(normalize_positive(r_att, self.normalize), gamma)
        return self.iaaf(r_att, r_gamma) + r_att
