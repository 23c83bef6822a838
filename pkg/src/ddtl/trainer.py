"""Joint DFF training: reconstruction + domain discrepancy + target classification."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import dff, metrics
from .data import Domain, pool
from .dff import DffArch, DffParams, LossBundle
from .mmd import domain_loss
from .numerics import tensor as T
from .numerics.optim import OptimState, step

log = logging.getLogger(__name__)

MMD_MODES = ("pooled", "per-domain")


@dataclass
class TrainConfig:
    iterations: int = 10
    batches: int = 20
    batch_size: int = 16
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    learning_rate: float = 1e-3
    seed: int = 0
    mmd_mode: str = "pooled"
    patience: int | None = None

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if min(self.iterations, self.batches, self.batch_size) < 1:
            raise ValueError("iterations, batches and batch_size must all be >= 1")
        if len(self.lambdas) != 3 or any(not (v >= 0 and math.isfinite(v)) for v in self.lambdas):
            raise ValueError(f"lambdas must be three non-negative reals, got {self.lambdas}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.mmd_mode not in MMD_MODES:
            raise ValueError(f"mmd_mode must be one of {MMD_MODES}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    @property
    def total_steps(self) -> int:
        return self.iterations * self.batches


class TrainingAborted(FloatingPointError):
    """Raised on a non-finite loss or gradient; carries the last good state."""

    def __init__(self, message: str, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class LossHistory:
    steps: list[LossBundle] = field(default_factory=list)

    def append(self, b: LossBundle) -> None:
        if self.steps and b.iteration <= self.steps[-1].iteration:
            raise ValueError("loss history steps must be strictly increasing")
        self.steps.append(b)

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i) -> LossBundle:
        return self.steps[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.steps])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "L_R", "L_D", "L_C", "L"])
        for b in self.steps:
            w.writerow([b.iteration] + [f"{v:.10g}" for v in (b.L_R, b.L_D, b.L_C, b.L)])
        return buf.getvalue()


# ---------------------------------------------------------------- batching

def batch_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (source, target) sampling streams for ``seed``."""
    s, t = np.random.SeedSequence([seed, 1]).spawn(2)
    return np.random.default_rng(s), np.random.default_rng(t)


def target_batches(n_target: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    _, rng = batch_streams(seed)
    while True:
        yield rng.integers(0, n_target, size=batch_size)


def batch_pairing(sources: Sequence[Domain], target: Domain, batch_size: int,
                  seed: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Endless stream of ``(source_idx, source_domain_ids, target_idx)``.

    Source indices address the concatenation of ``sources``; sampling is
    uniform with replacement over that pool, so each domain appears in
    proportion to its size. Target indices come from a separate stream.
    """
    sizes = np.array([len(d) for d in sources])
    if sizes.size == 0 or np.any(sizes == 0) or len(target) == 0:
        raise ValueError("batch_pairing needs non-empty source and target domains")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    src_rng, _ = batch_streams(seed)
    tgt = target_batches(len(target), batch_size, seed)
    while True:
        s = src_rng.integers(0, offsets[-1], size=batch_size)
        ids = np.searchsorted(offsets, s, side="right") - 1
        yield s, ids, next(tgt)


# ---------------------------------------------------------------- training

def _check_inputs(sources: Sequence[Domain], target: Domain, arch: DffArch) -> None:
    if not sources:
        raise ValueError("at least one source domain is required")
    for d in list(sources) + [target]:
        if len(d) == 0:
            raise ValueError(f"domain {d.name!r} is empty")
        if d.image_shape != arch.input_size:
            raise ValueError(f"domain {d.name!r} images {d.image_shape} != arch input "
                             f"{arch.input_size}")
    if target.labels is None or len(np.unique(target.labels)) < 2:
        raise ValueError("target domain needs labels from at least two classes")
    if target.labels.max() >= arch.num_classes:
        raise ValueError("target labels exceed arch.num_classes")


def dff_step_losses(params: DffParams, arch: DffArch, xs: np.ndarray, src_ids: np.ndarray,
                    xt: np.ndarray, yt: np.ndarray, mmd_mode: str = "pooled", kernel=None):
    """One pass of the inner loop body; returns the three loss tensors (L_R, L_D, L_C)."""
    f_s = dff.encode(xs, params.encoder, arch)
    f_t = dff.encode(xt, params.encoder, arch)
    xs_hat = dff.decode(f_s, params.decoder, arch)
    xt_hat = dff.decode(f_t, params.decoder, arch)
    logits = dff.classify(f_t, params.classifier, arch)

    pairs, per_domain_feats = [], []
    for d in np.unique(src_ids):
        rows = np.flatnonzero(src_ids == d)
        pairs.append((xs[rows], T.take_rows(xs_hat, rows)))
        per_domain_feats.append(T.take_rows(f_s, rows))
    pairs.append((xt, xt_hat))
    l_r = dff.reconstruction_loss(pairs)
    if mmd_mode == "per-domain":
        l_d = domain_loss(per_domain_feats, f_t, kernel, per_domain=True)
    else:
        l_d = domain_loss(f_s, f_t, kernel)
    l_c = dff.classification_loss(logits, yt)
    return l_r, l_d, l_c


def weighted_objective(terms, lambdas) -> T.Tensor:
    """Sum of ``lambda * term`` over terms with a non-zero weight."""
    total = None
    for term, lam in zip(terms, lambdas):
        if lam == 0.0:
            continue
        t = T.mul(term, lam)
        total = t if total is None else T.add(total, t)
    return total


def train_dff(sources: Sequence[Domain], target: Domain, arch: DffArch, cfg: TrainConfig,
              params: DffParams | None = None,
              callback: Callable[[LossBundle], None] | None = None
              ) -> tuple[DffParams, LossHistory]:
    """Minimise ``lambda_R L_R + lambda_D L_D + lambda_C L_C`` over I*N batch steps.

    Sources are used unlabeled; only the target contributes class labels.
    """
    _check_inputs(sources, target, arch)
    pooled = pool(list(sources))
    params = params or dff.init_params(arch, cfg.seed)
    named = params.named()
    opt = OptimState(lr=cfg.learning_rate)
    history = LossHistory()
    stream = batch_pairing(list(sources), target, cfg.batch_size, cfg.seed)
    last_good = params.copy()
    best, stale = math.inf, 0

    for it in range(cfg.iterations):
        it_losses = []
        for j in range(cfg.batches):
            k = it * cfg.batches + j
            s_idx, s_ids, t_idx = next(stream)
            # numpy may be configured to raise instead of producing nan; both end here
            try:
                terms = dff_step_losses(params, arch, pooled.samples[s_idx],
                                        pooled.domain_ids[s_idx], target.samples[t_idx],
                                        target.labels[t_idx], cfg.mmd_mode)
                bundle = dff.total_loss(*(t.item() for t in terms), cfg.lambdas, iteration=k)
            except FloatingPointError as exc:
                raise TrainingAborted(f"step {k}: {exc}", last_good, history) from exc
            last_good = params.copy()
            objective = weighted_objective(terms, cfg.lambdas)
            T.zero_grads(named.values())
            try:
                if objective is not None:
                    T.backward(objective)
                step(named, opt)
            except FloatingPointError as exc:
                raise TrainingAborted(f"step {k}: {exc}", last_good, history) from exc
            history.append(bundle)
            it_losses.append(bundle.L)
            if callback is not None:
                callback(bundle)
        mean_l = float(np.mean(it_losses))
        log.info("iteration %d: mean L %.5f", it, mean_l)
        if cfg.patience is not None:
            if mean_l < best:
                best, stale = mean_l, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after iteration %d", it)
                    break
    T.zero_grads(named.values())
    return params, history


def evaluate_classifier(params: DffParams, arch: DffArch, data: Domain) -> dict:
    if data.labels is None:
        raise ValueError(f"domain {data.name!r} has no labels to evaluate against")
    pred = dff.predict(data.samples, params, arch)
    return metrics.summary(pred, data.labels, arch.num_classes)
