"""Reduced-size residual U-Net and its boundary-weighted cross-entropy."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import checkpoint, metrics
from .data import Domain
from .numerics import tensor as T
from .numerics.optim import OptimState, step
from .numerics.tensor import ShapeError, Tensor
from .trainer import TrainConfig, TrainingAborted

DEPTH = 4
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SegArch:
    base_channels: int = 8
    dropout: float = 0.25
    num_classes: int = 2

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(DEPTH)]

    def to_dict(self) -> dict:
        return asdict(self)


def init_seg_params(arch: SegArch, seed: int, in_channels: int = 1) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    p: dict[str, Tensor] = {}

    # The skip and head convs are linear, so they get unit-gain (fan-in) bounds;
    # only conv1 feeds a ReLU and gets the doubled gain. The last conv of each
    # residual branch starts at zero so every block is initially its skip path.
    # Without this the activation variance doubles per block and the initial
    # logits reach magnitudes of 100+, saturating the softmax.
    def conv(name, cout, cin, k, gain=1.0):
        bound = math.sqrt(3.0 * gain / (cin * k * k))
        p[f"{name}.w"] = T.parameter(rng.uniform(-bound, bound, (cout, cin, k, k)), f"{name}.w")
        p[f"{name}.b"] = T.parameter(np.zeros(cout), f"{name}.b")

    w = arch.widths
    cin = in_channels
    for i in range(DEPTH):
        conv(f"enc{i}.conv1", w[i], cin, 3, gain=2.0)
        conv(f"enc{i}.conv2", w[i], w[i], 3, gain=0.0)
        if cin != w[i]:
            conv(f"enc{i}.skip", w[i], cin, 1)
        cin = w[i]
    for j in range(DEPTH):
        level = DEPTH - 1 - j
        cin_cat = cin + w[level]
        conv(f"dec{j}.conv1", w[level], cin_cat, 3, gain=2.0)
        conv(f"dec{j}.conv2", w[level], w[level], 3, gain=0.0)
        conv(f"dec{j}.skip", w[level], cin_cat, 1)
        cin = w[level]
    conv("head", arch.num_classes, cin, 1)
    return p


def _res_block(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    h = T.relu(T.conv2d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1))
    h = T.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=1)
    if f"{name}.skip.w" in p:
        x = T.conv2d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"])
    return T.add(h, x)


def seg_forward(image, params: dict[str, Tensor], arch: SegArch,
                rng: np.random.Generator | None = None) -> Tensor:
    """Per-pixel class logits, (K, H, W) for one image or (B, K, H, W) for a batch.

    ``rng`` enables dropout (training); ``None`` gives the deterministic
    inference pass.
    """
    x = T.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"seg_forward: expected (C, H, W) or (B, C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 ** DEPTH or w % 2 ** DEPTH:
        raise ShapeError(f"seg_forward: {h}x{w} is not divisible by {2 ** DEPTH}")
    skips = []
    for i in range(DEPTH):
        x = _res_block(x, params, f"enc{i}")
        skips.append(x)
        x = T.dropout(T.maxpool2(x), arch.dropout, rng)
    for j in range(DEPTH):
        x = T.concat([T.upsample2(x), skips[DEPTH - 1 - j]], axis=1)
        x = _res_block(x, params, f"dec{j}")
    out = T.conv2d(x, params["head.w"], params["head.b"])
    return T.reshape(out, out.shape[1:]) if single else out


def softmax_pixel(logits) -> Tensor:
    """Softmax over the class axis (axis -3) at every pixel."""
    return T.softmax(T.as_tensor(logits), axis=-3)


# ---------------------------------------------------------------- weight maps

def class_weights(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weight of each pixel's class: N / (K * count(class))."""
    mask = np.asarray(mask)
    counts = np.bincount(mask.ravel(), minlength=num_classes)
    return mask.size / (num_classes * counts[mask])


def boundary_term(d1, d2, w0: float, sigma: float) -> np.ndarray:
    return w0 * np.exp(-(np.asarray(d1) + np.asarray(d2)) ** 2 / (2.0 * sigma ** 2))


def component_borders(mask: np.ndarray) -> list[np.ndarray]:
    """Border pixel coordinates of every 4-connected foreground component.

    Components are taken per foreground class, so touching regions of
    different classes stay distinct. Border pixels are component pixels with
    a 4-neighbour outside the component (the image edge does not count).
    """
    borders = []
    for c in np.unique(mask):
        if c == 0:
            continue
        labeled, n = ndimage.label(mask == c, structure=FOUR_CONNECTED)
        for k in range(1, n + 1):
            comp = labeled == k
            inner = ndimage.binary_erosion(comp, structure=FOUR_CONNECTED, border_value=1)
            borders.append(np.argwhere(comp & ~inner).astype(np.float64))
    return borders


def border_distances(mask: np.ndarray) -> np.ndarray:
    """(n_components, H, W) Euclidean distance from each pixel to each component border."""
    h, w = mask.shape
    pix = np.argwhere(np.ones((h, w), dtype=bool)).astype(np.float64)
    out = []
    for b in component_borders(mask):
        best = np.full(len(pix), np.inf)
        for start in range(0, len(b), 256):
            chunk = b[start:start + 256]
            d2 = ((pix[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=-1)
            best = np.minimum(best, d2.min(axis=1))
        out.append(np.sqrt(best).reshape(h, w))
    return np.array(out).reshape(-1, h, w)


def weight_map(mask: np.ndarray, w0: float = 10.0, sigma: float = 5.0,
               num_classes: int = 2) -> np.ndarray:
    """Class balancing plus a border term: w_c(x) + w0 * exp(-(d1 + d2)^2 / (2 sigma^2)).

    The border term needs two distinct components; with fewer it is zero.
    """
    mask = np.asarray(mask, dtype=np.int64)
    if mask.ndim != 2:
        raise ValueError(f"weight_map expects a 2-d mask, got {mask.shape}")
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValueError(f"mask values must lie in [0, {num_classes})")
    wc = class_weights(mask, num_classes)
    dist = border_distances(mask)
    if len(dist) < 2:
        return wc
    dist.sort(axis=0)
    return wc + boundary_term(dist[0], dist[1], w0, sigma)


# ---------------------------------------------------------------- loss

P_FLOOR = 1e-12


def seg_loss(p, mask, weights) -> Tensor:
    """Mean weighted negative log-likelihood of the true class per pixel.

    ``p`` is (K, H, W) or (B, K, H, W); ``mask`` and ``weights`` drop the class axis.
    """
    p = T.as_tensor(p)
    mask = np.asarray(mask, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if p.ndim == 3:
        p = T.reshape(p, (1,) + p.shape)
        mask, weights = mask[None], weights[None]
    if mask.shape != (p.shape[0],) + p.shape[2:] or weights.shape != mask.shape:
        raise ShapeError(f"seg_loss: probabilities {p.shape}, mask {mask.shape}, "
                         f"weights {weights.shape} disagree")
    if mask.min() < 0 or mask.max() >= p.shape[1]:
        raise ValueError("seg_loss: mask labels out of range")
    logp = T.log(T.pick(p, mask, axis=1), floor=P_FLOOR)
    return T.mul(T.tsum(T.mul(logp, weights)), -1.0 / mask.size)


# ---------------------------------------------------------------- training

@dataclass
class SegHistory:
    losses: list[float]

    def to_csv(self) -> str:
        lines = ["step,E"] + [f"{i},{v:.10g}" for i, v in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def train_seg(data: Domain, arch: SegArch, cfg: TrainConfig, w0: float = 10.0,
              sigma: float = 5.0, params: dict[str, Tensor] | None = None
              ) -> tuple[dict[str, Tensor], SegHistory]:
    """Adam on the weighted pixel loss over I*N sampled mini-batches."""
    if data.masks is None or len(data) == 0:
        raise ValueError("train_seg needs at least one image with a mask")
    weights = np.stack([weight_map(m, w0, sigma, arch.num_classes) for m in data.masks])
    params = params or init_seg_params(arch, cfg.seed, data.image_shape[0])
    opt = OptimState(lr=cfg.learning_rate)
    batch_rng, drop_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence([cfg.seed, 2]).spawn(2))
    losses: list[float] = []
    last_good = {k: v.data.copy() for k, v in params.items()}
    for k in range(cfg.total_steps):
        idx = batch_rng.integers(0, len(data), size=cfg.batch_size)
        try:
            logits = seg_forward(data.samples[idx], params, arch, drop_rng)
            loss = seg_loss(softmax_pixel(logits), data.masks[idx], weights[idx])
            value, reason = loss.item(), "non-finite segmentation loss"
        except FloatingPointError as exc:
            value, reason = math.nan, str(exc)
        if not math.isfinite(value):
            raise TrainingAborted(f"step {k}: {reason}", _restore(last_good),
                                  SegHistory(losses))
        last_good = {n: v.data.copy() for n, v in params.items()}
        T.zero_grads(params.values())
        try:
            T.backward(loss)
            step(params, opt)
        except FloatingPointError as exc:
            raise TrainingAborted(f"step {k}: {exc}", _restore(last_good),
                                  SegHistory(losses)) from exc
        losses.append(value)
    T.zero_grads(params.values())
    return params, SegHistory(losses)


def _restore(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: T.parameter(v, k) for k, v in arrays.items()}


def predict_masks(images: np.ndarray, params: dict[str, Tensor], arch: SegArch,
                  batch: int = 16) -> np.ndarray:
    images = np.asarray(images)
    out = [seg_forward(images[i:i + batch], params, arch).data.argmax(axis=1)
           for i in range(0, len(images), batch)]
    return np.concatenate(out).astype(np.int64)


def evaluate_segmentation(params, arch: SegArch, data: Domain) -> dict:
    if data.masks is None:
        raise ValueError(f"domain {data.name!r} has no masks")
    pred = predict_masks(data.samples, params, arch)
    return metrics.summary(pred, data.masks, arch.num_classes)


def seg_loss_on(data: Domain, params, arch: SegArch, w0: float = 10.0, sigma: float = 5.0,
                batch: int = 16) -> float:
    """Deterministic (dropout-free) mean loss over a whole domain."""
    total = 0.0
    for i in range(0, len(data), batch):
        imgs, masks = data.samples[i:i + batch], data.masks[i:i + batch]
        wm = np.stack([weight_map(m, w0, sigma, arch.num_classes) for m in masks])
        total += seg_loss(softmax_pixel(seg_forward(imgs, params, arch)), masks, wm).item() * len(imgs)
    return total / len(data)


def save_seg(path, params: dict[str, Tensor], arch: SegArch):
    return checkpoint.save(path, checkpoint.SEG_MAGIC, {"model": "resunet", **arch.to_dict()},
                           params)


def load_seg(path) -> tuple[dict[str, Tensor], SegArch]:
    meta, flat = checkpoint.load(path, checkpoint.SEG_MAGIC)
    meta = dict(meta)
    meta.pop("model", None)
    arch = SegArch(**meta)
    params = {k: T.parameter(v, k) for k, v in flat.items()}
    in_ch = params["enc0.conv1.w"].shape[1] if "enc0.conv1.w" in params else 1
    ref = init_seg_params(arch, 0, in_ch)
    if {k: v.shape for k, v in ref.items()} != {k: v.shape for k, v in params.items()}:
        raise checkpoint.CheckpointError("segmentation checkpoint does not match its architecture")
    return params, arch
