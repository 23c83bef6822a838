"""Central finite-difference verification of every differentiable operator and both models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import dff, segmentation
from .mmd import KernelSpec, domain_loss, mmd
from .numerics import tensor as T
from .numerics.tensor import Tensor

EPS = 1e-4
TOLERANCE = 1e-4
FLOOR = 1e-6


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, eps: float = EPS,
                 entries: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. ``p`` at the given flat entries."""
    flat = p.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else np.asarray(entries)
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        up = fn().item()
        flat[i] = old - eps
        down = fn().item()
        flat[i] = old
        out[n] = (up - down) / (2 * eps)
    return idx, out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = EPS,
          max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences over ``params``."""
    params = list(params)
    T.zero_grads(params)
    T.backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            entries = np.sort(rng.choice(p.data.size, max_entries, replace=False))
        idx, numeric = numeric_grad(fn, p, eps, entries)
        worst = max(worst, float(relative_error(analytic.reshape(-1)[idx], numeric).max()))
    T.zero_grads(params)
    return worst


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    max_entries: int | None = None


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return T.parameter(rng.uniform(lo, hi, shape))


def _unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
    def build(rng):
        x = _u(rng, *shape, lo=lo, hi=hi)
        w = rng.uniform(-1, 1, shape)
        return (lambda: T.tsum(T.mul(op(x), w))), [x]
    return build


def _away_from_zero(rng, *shape):
    v = rng.uniform(0.2, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
    return T.parameter(v)


def _build_add(rng):
    a, b = _u(rng, 3, 4), _u(rng, 4)
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda: T.tsum(T.mul(T.add(a, b), w))), [a, b]


def _build_sub(rng):
    a, b = _u(rng, 3, 4), _u(rng, 3, 1)
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda: T.tsum(T.mul(T.sub(a, b), w))), [a, b]


def _build_mul(rng):
    a, b = _u(rng, 3, 4), _u(rng, 3, 4)
    return (lambda: T.tsum(T.mul(a, b))), [a, b]


def _build_relu(rng):
    x = _away_from_zero(rng, 3, 4)
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda: T.tsum(T.mul(T.relu(x), w))), [x]


def _build_clamp(rng):
    x = _away_from_zero(rng, 3, 4)
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda: T.tsum(T.mul(T.clamp_min(x, 0.0), w))), [x]


def _build_dropout(rng):
    x = _u(rng, 4, 5)
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda: T.tsum(T.mul(T.dropout(x, 0.3, np.random.default_rng(7)), w))), [x]


def _build_mean(rng):
    x = _u(rng, 3, 4)
    return (lambda: T.mean(T.square(x))), [x]


def _build_sum_axis(rng):
    x = _u(rng, 3, 4)
    w = rng.uniform(-1, 1, 4)
    return (lambda: T.tsum(T.mul(T.sum_axis(x, 0), w))), [x]


def _build_reshape(rng):
    x = _u(rng, 3, 4)
    w = rng.uniform(-1, 1, (2, 6))
    return (lambda: T.tsum(T.mul(T.reshape(x, (2, 6)), w))), [x]


def _build_concat(rng):
    a, b = _u(rng, 2, 3), _u(rng, 4, 3)
    w = rng.uniform(-1, 1, (6, 3))
    return (lambda: T.tsum(T.mul(T.concat([a, b], axis=0), w))), [a, b]


def _build_take_rows(rng):
    x = _u(rng, 5, 3)
    w = rng.uniform(-1, 1, (4, 3))
    idx = np.array([0, 2, 2, 4])
    return (lambda: T.tsum(T.mul(T.take_rows(x, idx), w))), [x]


def _build_pick(rng):
    x = _u(rng, 3, 4, 2, 2)
    labels = rng.integers(0, 4, (3, 2, 2))
    w = rng.uniform(-1, 1, (3, 2, 2))
    return (lambda: T.tsum(T.mul(T.pick(x, labels, axis=1), w))), [x]


def _build_matmul(rng):
    a, b = _u(rng, 3, 4), _u(rng, 4, 2)
    w = rng.uniform(-1, 1, (3, 2))
    return (lambda: T.tsum(T.mul(T.matmul(a, b), w))), [a, b]


def _build_dense(rng):
    x, wt, b = _u(rng, 2, 5), _u(rng, 3, 5), _u(rng, 3)
    w = rng.uniform(-1, 1, (2, 3))
    return (lambda: T.tsum(T.mul(T.dense(x, wt, b), w))), [x, wt, b]


def _build_sq_dists(rng):
    x, y = _u(rng, 4, 3), _u(rng, 5, 3)
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda: T.tsum(T.mul(T.sq_dists(x, y), w))), [x, y]


def _build_conv(stride):
    def build(rng):
        x, k, b = _u(rng, 2, 3, 7, 7), _u(rng, 4, 3, 3, 3), _u(rng, 4)
        shape = T.conv2d(x, k, b, padding=1, stride=stride).shape
        w = rng.uniform(-1, 1, shape)
        return (lambda: T.tsum(T.mul(T.conv2d(x, k, b, padding=1, stride=stride), w))), [x, k, b]
    return build


def _build_maxpool(rng):
    # distinct values spaced well beyond eps so the argmax never flips
    vals = rng.permutation(2 * 3 * 6 * 6) * 0.01 - 1.0
    x = T.parameter(vals.reshape(2, 3, 6, 6))
    w = rng.uniform(-1, 1, (2, 3, 3, 3))
    return (lambda: T.tsum(T.mul(T.maxpool2(x), w))), [x]


def _build_upsample(rng):
    x = _u(rng, 2, 3, 3)
    w = rng.uniform(-1, 1, (2, 6, 6))
    return (lambda: T.tsum(T.mul(T.upsample2(x), w))), [x]


def _build_logsumexp(rng):
    x = _u(rng, 3, 4)
    w = rng.uniform(-1, 1, 3)
    return (lambda: T.tsum(T.mul(T.logsumexp(x, axis=1), w))), [x]


def _build_softmax(rng):
    x = _u(rng, 2, 3, 4)
    w = rng.uniform(-1, 1, (2, 3, 4))
    return (lambda: T.tsum(T.mul(T.softmax(x, axis=1), w))), [x]


def _build_mmd(rng):
    x, y = _u(rng, 5, 3), _u(rng, 4, 3)
    spec = KernelSpec((0.3, 1.0))
    return (lambda: mmd(x, y, spec)), [x, y]


def _build_domain_loss(rng):
    a, b, t = _u(rng, 3, 3), _u(rng, 2, 3), _u(rng, 4, 3)
    spec = KernelSpec((0.5,))
    return (lambda: domain_loss([a, b], t, spec)), [a, b, t]


def _build_classification_loss(rng):
    x = _u(rng, 3, 4)
    labels = np.array([0, 3, 1])
    return (lambda: dff.classification_loss(x, labels)), [x]


def _build_seg_loss(rng):
    f = _u(rng, 2, 3, 4, 4)
    mask = rng.integers(0, 3, (2, 4, 4))
    weights = rng.uniform(0.5, 3.0, (2, 4, 4))
    return (lambda: segmentation.seg_loss(segmentation.softmax_pixel(f), mask, weights)), [f]


GRADCHECK_DFF_ARCH = dff.DffArch(input_size=(1, 8, 8), encoder_channels=(2, 3), hidden=6)
GRADCHECK_SEG_ARCH = segmentation.SegArch(base_channels=1, dropout=0.0, num_classes=2)


def _build_dff_model(rng):
    arch = GRADCHECK_DFF_ARCH
    params = dff.init_params(arch, int(rng.integers(1 << 31)))
    for b in (t for k, t in params.named().items() if k.endswith(".b")):
        b.data[:] = rng.uniform(-0.1, 0.1, b.shape)
    xs = rng.uniform(0, 1, (2, 1, 8, 8))
    xt = rng.uniform(0, 1, (2, 1, 8, 8))
    ids = np.array([0, 1])
    yt = np.array([0, 1])
    spec = KernelSpec((0.05, 0.2))

    def fn():
        terms = _dff_terms(params, arch, xs, ids, xt, yt, spec)
        return T.add(T.add(terms[0], terms[1]), terms[2])

    return fn, list(params)


def _dff_terms(params, arch, xs, ids, xt, yt, spec):
    from .trainer import dff_step_losses
    return dff_step_losses(params, arch, xs, ids, xt, yt, kernel=spec)


def _build_seg_model(rng):
    arch = GRADCHECK_SEG_ARCH
    params = segmentation.init_seg_params(arch, int(rng.integers(1 << 31)))
    for name, p in params.items():
        if name.endswith("conv2.w"):
            # zero at init, which would hide any error in the conv1 gradients
            p.data[...] = rng.uniform(-0.3, 0.3, p.data.shape)
    img = rng.uniform(0, 1, (1, 16, 16))
    yy, xx = np.mgrid[0:16, 0:16]
    mask = (((yy - 8) ** 2 + (xx - 5) ** 2 < 12) | ((yy - 8) ** 2 + (xx - 11) ** 2 < 10)).astype(int)
    weights = segmentation.weight_map(mask, 10.0, 5.0, 2)

    def fn():
        logits = segmentation.seg_forward(img, params, arch)
        return segmentation.seg_loss(segmentation.softmax_pixel(logits), mask, weights)

    return fn, list(params.values())


CASES: list[Case] = [
    Case("add", _build_add),
    Case("sub", _build_sub),
    Case("mul", _build_mul),
    Case("square", _unary(T.square)),
    Case("relu", _build_relu),
    Case("sigmoid", _unary(T.sigmoid)),
    Case("exp", _unary(T.exp)),
    Case("log", _unary(T.log, 0.5, 2.0)),
    Case("sqrt", _unary(T.sqrt, 0.5, 2.0)),
    Case("clamp_min", _build_clamp),
    Case("dropout", _build_dropout),
    Case("sum", _unary(T.tsum)),
    Case("mean", _build_mean),
    Case("sum_axis", _build_sum_axis),
    Case("reshape", _build_reshape),
    Case("concat", _build_concat),
    Case("take_rows", _build_take_rows),
    Case("pick", _build_pick),
    Case("matmul", _build_matmul),
    Case("dense", _build_dense),
    Case("sq_dists", _build_sq_dists),
    Case("conv2d", _build_conv(1)),
    Case("conv2d_stride2", _build_conv(2)),
    Case("maxpool2", _build_maxpool),
    Case("upsample2", _build_upsample),
    Case("logsumexp", _build_logsumexp),
    Case("softmax", _build_softmax),
    Case("mmd", _build_mmd),
    Case("domain_loss", _build_domain_loss),
    Case("classification_loss", _build_classification_loss),
    Case("seg_loss", _build_seg_loss),
    Case("dff_model", _build_dff_model),
    Case("resunet_model", _build_seg_model, max_entries=12),
]


def run(cases: Sequence[Case] = CASES, seed: int = 0,
        tolerance: float = TOLERANCE) -> list[tuple[str, float, bool]]:
    """Return ``(name, max relative error, passed)`` per case."""
    report = []
    for n, case in enumerate(cases):
        rng = np.random.default_rng([seed, n])
        fn, params = case.build(rng)
        err = check(fn, params, max_entries=case.max_entries, seed=seed)
        report.append((case.name, err, bool(err <= tolerance)))
    return report
