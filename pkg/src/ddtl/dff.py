"""Distant Feature Fusion model: convolutional autoencoder pair plus target classifier.

Shapes follow the batch-first convention (B, C, H, W); single images of
shape (C, H, W) are accepted everywhere and treated as a batch of one.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import checkpoint
from .numerics import tensor as T
from .numerics.tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DffArch:
    input_size: tuple[int, int, int] = (1, 64, 64)
    encoder_channels: tuple[int, int] = (16, 32)
    hidden: int = 64
    num_classes: int = 2

    def __post_init__(self):
        c, h, w = self.input_size
        if h % 4 or w % 4:
            raise ValueError(f"input height/width must be divisible by 4, got {h}x{w}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))

    @property
    def bottleneck(self) -> tuple[int, int, int]:
        _, h, w = self.input_size
        return (self.encoder_channels[1], h // 4, w // 4)

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.bottleneck))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DffArch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class DffParams:
    encoder: dict[str, Tensor] = field(default_factory=dict)
    decoder: dict[str, Tensor] = field(default_factory=dict)
    classifier: dict[str, Tensor] = field(default_factory=dict)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {"encoder": self.encoder, "decoder": self.decoder, "classifier": self.classifier}

    def named(self) -> dict[str, Tensor]:
        """All parameters keyed ``group.name`` in declaration order."""
        return {f"{g}.{k}": t for g, ps in self.groups().items() for k, t in ps.items()}

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.named().values())

    def copy(self) -> "DffParams":
        return DffParams(*({k: T.parameter(t.data.copy(), t.name) for k, t in g.items()}
                           for g in (self.encoder, self.decoder, self.classifier)))


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape), name)


def _zeros(n: int, name: str) -> Tensor:
    return T.parameter(np.zeros(n), name)


def init_params(arch: DffArch, seed: int) -> DffParams:
    """Fan-in scaled uniform weights, zero biases; one RNG stream per group."""
    enc_rng, dec_rng, cls_rng = (np.random.default_rng(s)
                                 for s in np.random.SeedSequence(seed).spawn(3))
    c, _, _ = arch.input_size
    c1, c2 = arch.encoder_channels
    p = DffParams()

    def conv(group, rng, name, cout, cin):
        group[f"{name}.w"] = _uniform(rng, (cout, cin, 3, 3), cin * 9, f"{name}.w")
        group[f"{name}.b"] = _zeros(cout, f"{name}.b")

    conv(p.encoder, enc_rng, "conv1", c1, c)
    conv(p.encoder, enc_rng, "conv2", c2, c1)
    conv(p.decoder, dec_rng, "conv1", c2, c2)
    conv(p.decoder, dec_rng, "conv2", c1, c2)
    conv(p.decoder, dec_rng, "out", c, c1)
    f = arch.feature_dim
    p.classifier["fc.w"] = _uniform(cls_rng, (arch.hidden, f), f, "fc.w")
    p.classifier["fc.b"] = _zeros(arch.hidden, "fc.b")
    p.classifier["out.w"] = _uniform(cls_rng, (arch.num_classes, arch.hidden), arch.hidden, "out.w")
    p.classifier["out.b"] = _zeros(arch.num_classes, "out.b")
    return p


def _as_batch(x, shape: tuple[int, ...], what: str) -> Tensor:
    x = T.as_tensor(x)
    if x.shape == shape:
        return T.reshape(x, (1,) + shape)
    if x.ndim != len(shape) + 1 or x.shape[1:] != shape:
        raise ShapeError(f"{what}: expected {shape} or batch thereof, got {x.shape}")
    return x


def encode(x, enc: dict[str, Tensor], arch: DffArch) -> Tensor:
    """Images (B, C, H, W) -> features (B, feature_dim)."""
    xb = _as_batch(x, arch.input_size, "encode")
    h = T.maxpool2(T.relu(T.conv2d(xb, enc["conv1.w"], enc["conv1.b"], padding=1)))
    h = T.maxpool2(T.relu(T.conv2d(h, enc["conv2.w"], enc["conv2.b"], padding=1)))
    return T.reshape(h, (xb.shape[0], arch.feature_dim))


def decode(f, dec: dict[str, Tensor], arch: DffArch) -> Tensor:
    """Features (B, feature_dim) -> reconstructions (B, C, H, W) in (0, 1)."""
    f = T.as_tensor(f)
    if f.shape == (arch.feature_dim,):
        f = T.reshape(f, (1, arch.feature_dim))
    if f.ndim != 2 or f.shape[1] != arch.feature_dim:
        raise ShapeError(f"decode: expected feature length {arch.feature_dim}, got {f.shape}")
    h = T.reshape(f, (f.shape[0],) + arch.bottleneck)
    h = T.upsample2(T.relu(T.conv2d(h, dec["conv1.w"], dec["conv1.b"], padding=1)))
    h = T.upsample2(T.relu(T.conv2d(h, dec["conv2.w"], dec["conv2.b"], padding=1)))
    return T.sigmoid(T.conv2d(h, dec["out.w"], dec["out.b"], padding=1))


def classify(f, cls: dict[str, Tensor], arch: DffArch) -> Tensor:
    """Features -> raw logits (B, K)."""
    f = T.as_tensor(f)
    if f.shape[-1] != arch.feature_dim:
        raise ShapeError(f"classify: expected feature length {arch.feature_dim}, got {f.shape}")
    h = T.relu(T.dense(f, cls["fc.w"], cls["fc.b"]))
    return T.dense(h, cls["out.w"], cls["out.b"])


def predict(x, params: DffParams, arch: DffArch, batch: int = 64) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == arch.input_size:
        x = x[None]
    out = []
    for i in range(0, len(x), batch):
        logits = classify(encode(x[i:i + batch], params.encoder, arch), params.classifier, arch)
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# ---------------------------------------------------------------- losses

def reconstruction_loss(pairs: Sequence[tuple]) -> Tensor:
    """Sum over domains of the per-domain mean squared reconstruction error.

    ``pairs`` holds one ``(x, x_hat)`` tuple per domain, each (n_i, ...).
    """
    if not pairs:
        raise ValueError("reconstruction_loss: no domains")
    total = None
    for x, x_hat in pairs:
        x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
        if x.data.size == 0:
            raise ValueError("reconstruction_loss: empty batch")
        if x.shape != x_hat.shape:
            raise ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
        term = T.mean(T.square(T.sub(x_hat, x)))
        total = term if total is None else T.add(total, term)
    return total


def classification_loss(logits, labels) -> Tensor:
    """Mean cross-entropy ``-logit[label] + log sum exp(logits)``."""
    logits = T.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, logits.shape[0]))
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.size} labels for {logits.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    return T.mean(T.sub(T.logsumexp(logits, axis=1), T.pick(logits, labels, axis=1)))


@dataclass(frozen=True)
class LossBundle:
    L_R: float
    L_D: float
    L_C: float
    L: float
    iteration: int = 0


TERM_NAMES = ("L_R", "L_D", "L_C")


def total_loss(l_r: float, l_d: float, l_c: float,
               weights: Sequence[float] = (1.0, 1.0, 1.0), iteration: int = 0) -> LossBundle:
    terms = (float(l_r), float(l_d), float(l_c))
    for name, v in zip(TERM_NAMES, terms):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {name} = {v}")
    lr_, ld_, lc_ = (float(w) for w in weights)
    return LossBundle(*terms, lr_ * terms[0] + ld_ * terms[1] + lc_ * terms[2], iteration)


# ---------------------------------------------------------------- persistence

def save_params(path, params: DffParams, arch: DffArch):
    return checkpoint.save(path, checkpoint.DFF_MAGIC, {"model": "dff", **arch.to_dict()},
                           params.named())


def load_params(path) -> tuple[DffParams, DffArch]:
    meta, flat = checkpoint.load(path, checkpoint.DFF_MAGIC)
    meta = dict(meta)
    meta.pop("model", None)
    arch = DffArch.from_dict(meta)
    p = DffParams()
    groups = p.groups()
    for key, value in flat.items():
        group, name = key.split(".", 1)
        groups[group][name] = T.parameter(value, name)
    ref = init_params(arch, 0).named()
    if [(k, v.shape) for k, v in ref.items()] != [(k, v.shape) for k, v in p.named().items()]:
        raise checkpoint.CheckpointError("checkpoint parameters do not match its architecture")
    return p, arch
