"""Channel priors, luminance, gamma correction, ATSM enhancement and µ-law.

All functions take and return :class:`~cpganet.autodiff.Tensor` so they can sit
inside a training graph.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_POS = 1e-6
DEFAULT_LUMA = (0.299, 0.584, 0.114)
BT601_LUMA = (0.299, 0.587, 0.114)


def channel_priors(f: Tensor) -> Tensor:
    """Stack the per-pixel channel max, min and mean of an NCHW map.

    Returns a ``[N, 3, H, W]`` tensor ordered (max, min, mean).
    """
    if f.ndim != 4:
        raise ad.ShapeError(f"channel_priors expects NCHW, got {f.shape}")
    return ad.concat(
        [
            ad.reduce(f, 1, "max", keepdims=True),
            ad.reduce(f, 1, "min", keepdims=True),
            ad.reduce(f, 1, "mean", keepdims=True),
        ],
        axis=1,
    )


def bright_channel(img: Tensor) -> Tensor:
    return ad.reduce(img, 1, "max", keepdims=True)


def dark_channel(img: Tensor) -> Tensor:
    return ad.reduce(img, 1, "min", keepdims=True)


def luminance(img: Tensor, coefficients=DEFAULT_LUMA) -> Tensor:
    """Weighted RGB sum ``cr*R + cg*G + cb*B`` as a ``[N, 1, H, W]`` map.

    Defaults to a green weight of 0.584; pass
    :data:`BT601_LUMA` for the broadcast-standard 0.587.
    """
    if img.ndim != 4 or img.shape[1] != 3:
        raise ad.ShapeError(f"luminance expects [N,3,H,W], got {img.shape}")
    cr, cg, cb = coefficients
    return img[:, 0:1] * cr + img[:, 1:2] * cg + img[:, 2:3] * cb


def gamma_correct(r: Tensor, gamma) -> Tensor:
    """Pointwise power law ``r ** gamma`` with ``r`` floored at ``EPS_POS``.

    ``gamma`` may be a scalar or any tensor broadcastable to ``r`` (e.g.
    ``[N, C, 1, 1]`` for per-channel exponents) and must be strictly positive.
    """
    gamma = ad.as_tensor(gamma, r)
    if np.any(gamma.data <= 0):
        raise ValueError("gamma must be strictly positive")
    return ad.pow_elem(ad.clamp(r, EPS_POS, None), gamma)


def atsm_enhance(l: Tensor, t: Tensor, a_tilde) -> Tensor:
    """Reformulated scattering model ``(l - a_tilde) / t + a_tilde``.

    With ``a_tilde == 0`` this is the plain Retinex division ``l / t``.
    ``t`` must already be bounded away from zero.
    """
    a_tilde = ad.as_tensor(a_tilde, l)
    return (l - a_tilde) / t + a_tilde


def mu_law(x: Tensor, mu: float = 5000.0) -> Tensor:
    """Odd-symmetric µ-law tone curve ``sgn(x) log(1 + mu|x|) / log(1 + mu)``."""
    v = x.data
    mu = v.dtype.type(mu)
    # divide (not multiply by a reciprocal) so T(1) == 1 exactly
    denom = np.log1p(mu)
    mag = np.abs(v)
    out = np.sign(v) * np.log1p(mu * mag) / denom
    ad._count(4 * v.size)

    def backward(g):
        return (g * mu / ((1 + mu * mag) * denom),)

    return ad._make(out, (x,), backward, "mu_law")
