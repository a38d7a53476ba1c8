"""Finite-difference verification of every differentiable op, block and loss.

Each case builds a random double-precision instance, reduces the op output to
a scalar with a fixed random projection, and compares the autodiff gradient of
every input with central differences. Inputs are sampled at least ``1e-2`` away
from non-smooth points (relu / abs kinks, clamp bounds, max/min ties).

The error reported for one input tensor is

    max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)

i.e. the worst deviation relative to the gradient's overall scale, which stays
meaningful when individual entries are near zero.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OP_TOL = 1e-5
BLOCK_TOL = 1e-4
LOSS_TOL = 1e-3
DEFAULT_INSTANCES = 20
MARGIN = 1e-2

# (fn over input tensors -> Tensor, list of input arrays, optional entries to probe per input)
Instance = tuple[Callable[..., Tensor], list[np.ndarray], Optional[int]]


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], Instance]
    tol: float = OP_TOL
    h: float = 1e-6
    kind: str = "op"


@dataclass
class CaseResult:
    name: str
    max_error: float
    tol: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tol)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<16} max_rel_err={self.max_error:.3e}  tol={self.tol:.0e}  n={self.instances}  {status}"


# ----------------------------------------------------------------- engine
def _scalar(fn: Callable[..., Tensor], tensors: Sequence[Tensor], proj: Optional[np.ndarray]) -> Tensor:
    out = fn(*tensors)
    if out.size == 1:
        return ad.reduce(out, None, "sum")
    return ad.reduce(out * Tensor._wrap(proj), None, "sum")


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
                    rng: Optional[np.random.Generator] = None, probes: Optional[int] = None) -> float:
    """Largest relative gradient error of ``fn`` over all ``inputs`` (double precision).

    ``probes`` limits the central differences to that many random entries per
    input; the analytic gradient is still computed in full.
    """
    rng = rng or np.random.default_rng(0)
    with ad.precision("double"):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        with ad.no_grad():
            sample = fn(*[Tensor._wrap(a) for a in arrays])
        proj = rng.standard_normal(sample.shape) if sample.size > 1 else None

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        _scalar(fn, leaves, proj).backward()
        worst = 0.0
        for k, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
            flat = arrays[k].reshape(-1)
            idx = np.arange(flat.size)
            if probes is not None and flat.size > probes:
                idx = rng.choice(flat.size, size=probes, replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                keep = flat[i]
                flat[i] = keep + h
                with ad.no_grad():
                    up = float(_scalar(fn, [Tensor._wrap(a) for a in arrays], proj).data)
                flat[i] = keep - h
                with ad.no_grad():
                    down = float(_scalar(fn, [Tensor._wrap(a) for a in arrays], proj).data)
                flat[i] = keep
                numeric[j] = (up - down) / (2 * h)
            a = analytic.reshape(-1)[idx]
            scale = max(np.abs(a).max(), np.abs(numeric).max())
            if scale == 0.0:
                continue
            err = float(np.abs(a - numeric).max() / scale)
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, err)
        return worst


# ------------------------------------------------------------ samplers
def _away_from(rng, shape, points: Sequence[float], lo: float, hi: float, margin: float = MARGIN) -> np.ndarray:
    """Uniform samples in [lo, hi] rejected within ``margin`` of any of ``points``."""
    out = rng.uniform(lo, hi, size=shape)
    bad = np.zeros(shape, dtype=bool)
    for p in points:
        bad |= np.abs(out - p) < margin
    while bad.any():
        out[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
        bad[:] = False
        for p in points:
            bad |= np.abs(out - p) < margin
    return out


def _distinct(rng, shape, spacing: float = 5 * MARGIN) -> np.ndarray:
    """Values whose pairwise gaps all exceed ``spacing`` (no max/min ties)."""
    n = int(np.prod(shape))
    base = np.arange(n) * spacing + rng.uniform(0, spacing / 5, size=n)
    return (rng.permutation(base) - base.mean()).reshape(shape)


def _img(rng, shape, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=shape)


# --------------------------------------------------------------- cases
def _binary(op):
    def build(rng):
        shapes = [((2, 3, 4), (2, 3, 4)), ((2, 3, 4), (3, 1)), ((1, 3, 1), (2, 1, 4))][rng.integers(3)]
        a = rng.uniform(-2, 2, size=shapes[0])
        b = rng.uniform(-2, 2, size=shapes[1])
        if op is ad.div:
            b = np.sign(b) * rng.uniform(0.5, 2.0, size=shapes[1])
        return op, [a, b], None

    return build


def _unary(fn, lo, hi, kinks=()):
    def build(rng):
        return fn, [_away_from(rng, (2, 3, 5), kinks, lo, hi)], None

    return build


def _pow(rng):
    return ad.pow_elem, [rng.uniform(0.1, 2.0, (2, 4, 3)), rng.uniform(0.3, 2.5, (2, 4, 1))], None


def _clamp(rng):
    return (lambda x: ad.clamp(x, -0.5, 0.7)), [_away_from(rng, (3, 4, 5), (-0.5, 0.7), -1.5, 1.5)], None


def _reduce(kind):
    def build(rng):
        shape = (2, 3, 4, 5)
        axes = [None, 1, (2, 3), (0, 2)][rng.integers(4)]
        keep = bool(rng.integers(2))
        x = _distinct(rng, shape) if kind in ("max", "min") else rng.standard_normal(shape)
        return (lambda t: ad.reduce(t, axes, kind, keep)), [x], None

    return build


def _concat(rng):
    axis = int(rng.integers(0, 3))
    shapes = []
    for _ in range(3):
        s = [2, 3, 4]
        s[axis] = int(rng.integers(1, 4))
        shapes.append(tuple(s))
    return (lambda *ts: ad.concat(ts, axis)), [rng.standard_normal(s) for s in shapes], None


def _reshape(rng):
    return (lambda t: ad.reshape(t, (4, 6)) * ad.reshape(t, (4, 6))), [rng.standard_normal((2, 3, 4))], None


def _getitem(rng):
    index = [(slice(None), slice(1, 3)), (..., slice(None, None, 2)), (1,), (slice(None), 0, slice(1, None))][rng.integers(4)]
    return (lambda t: ad.getitem(t, index)), [rng.standard_normal((3, 4, 5))], None


def _conv(rng):
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    padding = int(rng.integers(0, k // 2 + 1)) if k > 1 else 0
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.standard_normal((2, cin, 5, 6))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    return (lambda x, w, b: ad.conv2d(x, w, b, stride, padding)), [x, w, b], None


def _upsample(rng):
    return ad.upsample_nearest2x, [rng.standard_normal((2, 3, 3, 4))], None


def _mu_law(rng):
    from .priors import mu_law

    mag = rng.uniform(0.05, 1.0, size=(3, 4, 5))
    return mu_law, [mag * rng.choice([-1.0, 1.0], size=mag.shape)], None


def _gamma(rng):
    from .priors import gamma_correct

    return gamma_correct, [rng.uniform(0.05, 1.0, (2, 3, 4, 4)), rng.uniform(0.3, 2.5, (2, 3, 1, 1))], None


def _atsm(rng):
    from .priors import atsm_enhance

    shape = (2, 3, 4, 4)
    return atsm_enhance, [rng.standard_normal(shape), rng.uniform(0.05, 1.0, shape), rng.standard_normal(shape)], None


def _priors(rng):
    from .priors import channel_priors

    return channel_priors, [_distinct(rng, (2, 4, 3, 3), spacing=0.05)], None


def _luminance(rng):
    from .priors import luminance

    return luminance, [_img(rng, (2, 3, 4, 4))], None


def _module_case(make, shapes_fn, probes=25):
    """Gradient w.r.t. the block's inputs and all of its parameters."""

    def build(rng):
        with ad.precision("double"):
            module = make(rng)
        params = module.parameters()
        inputs = shapes_fn(rng)
        n_in = len(inputs)

        def fn(*ts):
            return _call_with_params(module, params, ts[:n_in], ts[n_in:])

        return fn, inputs + [p.data.copy() for p in params], probes

    return build


def _call_with_params(module, params, inputs, param_tensors):
    """Evaluate ``module(*inputs)`` with each parameter replaced by the given tensor."""
    originals = {}
    owners = _param_owners(module)
    for p, t in zip(params, param_tensors):
        owner, attr = owners[id(p)]
        originals[(id(owner), attr)] = (owner, attr, p)
        setattr(owner, attr, t)
    try:
        return module(*inputs)
    finally:
        for owner, attr, p in originals.values():
            setattr(owner, attr, p)


def _param_owners(module) -> dict[int, tuple[object, str]]:
    from .blocks import Module

    out = {}
    stack = [module]
    while stack:
        m = stack.pop()
        for name, value in vars(m).items():
            if isinstance(value, ad.Parameter):
                out[id(value)] = (m, name)
            elif isinstance(value, Module):
                stack.append(value)
            elif isinstance(value, (list, tuple)):
                stack.extend(v for v in value if isinstance(v, Module))
    return out


def _iaaf_make(rng):
    from .blocks import IAAF

    return IAAF(3, rng, width=4)


def _cp_make(rng):
    from .blocks import CPBlock

    return CPBlock(4, rng, t_width=4, a_width=4, rgb_channels=3)


def _cpga_make(rng):
    from .blocks import CPGABlock

    return CPGABlock(4, 5, rng, t_width=4, a_width=4, iaaf_width=4, rgb_channels=3)


def _loss_case(which):
    def build(rng):
        from . import losses as L

        shape = (1, 3, 12, 12) if which in ("ssim", "total") else (2, 3, 16, 16)
        gt = _img(rng, shape, 0.1, 0.9)
        yhat = np.clip(gt + _away_from(rng, shape, (0.0,), -0.3, 0.3), 0.02, 0.98)
        # the L1 kink sits at yhat == gt; clipping may land there, so re-separate
        close = np.abs(yhat - gt) < MARGIN
        yhat[close] = gt[close] + np.where(gt[close] < 0.5, 2, -2) * MARGIN
        fns = {
            "l1": L.l1_loss,
            "hdr_l1": L.hdr_l1_loss,
            "perceptual": lambda a, b: L.perceptual_loss(a, b, L.RandomConvExtractor(seed=0)),
            "ssim": L.ssim_loss,
            "total": lambda a, b: L.total_loss(a, b, L.LossSpec(), L.RandomConvExtractor(seed=0)),
        }
        # gradients flow to the prediction only; the target is a constant
        target = Tensor._wrap(gt)
        return (lambda y: fns[which](y, target)), [yhat], 40

    return build


def _model_case(rng):
    """Spot check of the whole network on 10 random parameter entries."""
    from .model import CPGANetPlus, ModelConfig

    with ad.precision("double"):
        model = CPGANetPlus(ModelConfig(seed=int(rng.integers(1 << 30))))
    params = model.parameters()
    img = _img(rng, (1, 3, 16, 16))
    sizes = np.array([p.size for p in params])
    flat_choice = rng.choice(sizes.sum(), size=10, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = []
    for f in flat_choice:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((k, int(f - offsets[k])))
    base = [p.data.copy() for p in params]

    def forward(vals: Tensor) -> Tensor:
        # differentiable w.r.t. the picked entries only: rebuild each touched
        # parameter as base + scatter(vals)
        touched = sorted({k for k, _ in picks})
        originals = {k: params[k] for k in touched}
        owners = _param_owners(model)
        try:
            for k in touched:
                mask = np.zeros(params[k].size)
                rows = [i for kk, i in picks if kk == k]
                cols = [j for j, (kk, _) in enumerate(picks) if kk == k]
                scatter = np.zeros((params[k].size, len(picks)))
                scatter[rows, cols] = 1.0
                mask[rows] = 1.0
                fixed = Tensor._wrap((base[k].reshape(-1) * (1 - mask)).reshape(base[k].shape))
                moved = ad.reshape(
                    ad.reduce(Tensor._wrap(scatter) * ad.reshape(vals, (1, len(picks))), 1, "sum"),
                    base[k].shape,
                )
                owner, attr = owners[id(params[k])]
                setattr(owner, attr, fixed + moved)
            return model(Tensor._wrap(img))
        finally:
            for k, p in originals.items():
                owner, attr = owners[id(p)]
                setattr(owner, attr, p)

    start = np.array([base[k].reshape(-1)[i] for k, i in picks])
    return forward, [start], None


def _build_cases() -> dict[str, Case]:
    cases = [
        Case("add", _binary(ad.add)),
        Case("sub", _binary(ad.sub)),
        Case("mul", _binary(ad.mul)),
        Case("div", _binary(ad.div)),
        Case("pow_elem", _pow),
        Case("exp", _unary(ad.exp, -2, 2)),
        Case("log", _unary(ad.log, 0.1, 3)),
        Case("abs", _unary(ad.absolute, -2, 2, kinks=(0.0,))),
        Case("clamp", _clamp),
        Case("relu", _unary(ad.relu, -2, 2, kinks=(0.0,))),
        Case("sigmoid", _unary(ad.sigmoid, -4, 4)),
        Case("tanh", _unary(ad.tanh, -3, 3)),
        Case("softplus", _unary(ad.softplus, -4, 4)),
        Case("sum", _reduce("sum")),
        Case("mean", _reduce("mean")),
        Case("max", _reduce("max")),
        Case("min", _reduce("min")),
        Case("concat", _concat),
        Case("reshape", _reshape),
        Case("getitem", _getitem),
        Case("conv2d", _conv),
        Case("upsample", _upsample),
        Case("mu_law", _mu_law),
        Case("gamma_correct", _gamma),
        Case("atsm_enhance", _atsm),
        Case("channel_priors", _priors),
        Case("luminance", _luminance),
        Case("iaaf", _module_case(_iaaf_make, lambda r: [_img(r, (1, 3, 6, 6)), _img(r, (1, 3, 6, 6))]),
             tol=BLOCK_TOL, h=1e-6, kind="block"),
        Case("cp_block", _module_case(_cp_make, lambda r: [r.standard_normal((1, 4, 6, 6)), _img(r, (1, 3, 6, 6))]),
             tol=LOSS_TOL, h=1e-6, kind="block"),
        Case("cpga_block", _module_case(
            _cpga_make, lambda r: [r.standard_normal((1, 4, 6, 6)), _img(r, (1, 3, 6, 6)), r.standard_normal((1, 5))]),
            tol=LOSS_TOL, h=1e-6, kind="block"),
        Case("l1_loss", _loss_case("l1"), tol=LOSS_TOL, kind="loss"),
        Case("hdr_l1_loss", _loss_case("hdr_l1"), tol=LOSS_TOL, kind="loss"),
        Case("perceptual_loss", _loss_case("perceptual"), tol=LOSS_TOL, kind="loss"),
        Case("ssim_loss", _loss_case("ssim"), tol=LOSS_TOL, kind="loss"),
        Case("total_loss", _loss_case("total"), tol=LOSS_TOL, kind="loss"),
        Case("model", _model_case, tol=LOSS_TOL, h=1e-6, kind="model"),
    ]
    return {c.name: c for c in cases}


CASES = _build_cases()


def run_case(case: Case, instances: int = DEFAULT_INSTANCES, seed: int = 0) -> CaseResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    worst = 0.0
    for _ in range(instances):
        fn, inputs, probes = case.build(rng)
        err = check_gradients(fn, inputs, case.h, rng, probes)
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    return CaseResult(case.name, worst, case.tol, instances, time.perf_counter() - t0)


def run_suite(ops: Optional[Sequence[str]] = None, instances: int = DEFAULT_INSTANCES, seed: int = 0,
              stream: Optional[TextIO] = None) -> list[CaseResult]:
    """Run the named cases (all by default), printing one line per case."""
    names = list(CASES) if not ops else list(ops)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; available: {', '.join(CASES)}")
    results = []
    for name in names:
        res = run_case(CASES[name], instances, seed)
        results.append(res)
        if stream is not None:
            print(res.line(), file=stream, flush=True)
    return results


if __name__ == "__main__":  # pragma: no cover
    out = run_suite(sys.argv[1:] or None, stream=sys.stdout)
    sys.exit(0 if all(r.passed for r in out) else 5)
