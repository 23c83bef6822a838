"""RBF kernels and the maximum mean discrepancy between two feature sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import ShapeError, Tensor

MEDIAN_MULTIPLIERS = (0.25, 1.0, 4.0)


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: tuple[float, ...] = (1.0,)
    kind: str = "rbf"

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if len(self.bandwidths) == 0:
            raise ValueError("KernelSpec needs at least one bandwidth")
        if any(not (g > 0 and np.isfinite(g)) for g in self.bandwidths):
            raise ValueError(f"bandwidths must be positive and finite, got {self.bandwidths}")


def kernel_eval(x, y, spec: KernelSpec) -> float:
    """Sum over bandwidths of exp(-gamma * ||x - y||^2)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"kernel_eval: dimensions differ ({x.size} vs {y.size})")
    d2 = float(np.dot(x - y, x - y))
    return float(sum(np.exp(-g * d2) for g in spec.bandwidths))


def median_heuristic(x: np.ndarray, y: np.ndarray,
                     multipliers: Sequence[float] = MEDIAN_MULTIPLIERS) -> KernelSpec:
    """Bandwidths 1/(2 * median pairwise squared distance of the joined set) times multipliers.

    Works on raw arrays: the bandwidth is a constant of the loss, not a
    differentiable quantity.
    """
    z = np.concatenate([np.asarray(x).reshape(len(x), -1), np.asarray(y).reshape(len(y), -1)])
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    iu = np.triu_indices(len(z), k=1)
    pos = d2[iu]
    pos = pos[pos > 1e-12]
    med = float(np.median(pos)) if pos.size else 1.0
    base = 1.0 / (2.0 * med)
    return KernelSpec(tuple(base * m for m in multipliers))


def _kernel_mean(d2: Tensor, spec: KernelSpec) -> Tensor:
    total = None
    for g in spec.bandwidths:
        term = T.mean(T.exp(T.mul(d2, -g)))
        total = term if total is None else T.add(total, term)
    return total


def mmd_squared(x, y, spec: KernelSpec) -> Tensor:
    """Biased (V-statistic) squared MMD, clamped at zero."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"mmd: expected (n, d) matrices, got {x.shape} and {y.shape}")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ValueError("mmd: both sample sets must be non-empty")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd: feature dimensions differ ({x.shape[1]} vs {y.shape[1]})")
    kxx = _kernel_mean(T.sq_dists(x, x), spec)
    kyy = _kernel_mean(T.sq_dists(y, y), spec)
    kxy = _kernel_mean(T.sq_dists(x, y), spec)
    return T.clamp_min(T.sub(T.add(kxx, kyy), T.mul(kxy, 2.0)), 0.0)


def mmd(x, y, spec: KernelSpec) -> Tensor:
    """Maximum mean discrepancy ``||mean phi(x) - mean phi(y)||`` in the kernel's RKHS."""
    return T.sqrt(mmd_squared(x, y, spec))


def domain_loss(source_feats: Sequence | Tensor, target_feats, spec: KernelSpec | None = None,
                per_domain: bool = False) -> Tensor:
    """MMD between pooled source features and target features.

    ``source_feats`` is either one (n, d) tensor or a list of per-domain
    tensors. By default the per-domain sets are concatenated into one pool;
    ``per_domain=True`` averages the per-domain discrepancies instead.
    ``spec=None`` picks bandwidths by the median heuristic on the joined batch.
    """
    parts = [source_feats] if isinstance(source_feats, (Tensor, np.ndarray)) else list(source_feats)
    parts = [T.as_tensor(p) for p in parts]
    target_feats = T.as_tensor(target_feats)
    if not parts:
        raise ValueError("domain_loss: no source features")
    pooled = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    if spec is None:
        spec = median_heuristic(pooled.data, target_feats.data)
    if not per_domain or len(parts) == 1:
        return mmd(pooled, target_feats, spec)
    total = None
    for p in parts:
        d = mmd(p, target_feats, spec)
        total = d if total is None else T.add(total, d)
    return T.mul(total, 1.0 / len(parts))
