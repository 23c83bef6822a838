"""Domains, PGM image I/O, and the seeded synthetic distant-domain generators."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

ROLES = ("source", "target")
KINDS = ("shapes", "textures", "blobs-labeled", "blobs-masked")


class DataError(ValueError):
    """A dataset file or directory could not be used."""


@dataclass
class Domain:
    name: str
    role: str
    samples: np.ndarray  # (n, 1, H, W), values in [0, 1]
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None  # (n, H, W) integer class ids
    domain_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.samples.ndim != 4 or self.samples.shape[1] != 1:
            raise ValueError(f"samples must be (n, 1, H, W), got {self.samples.shape}")
        if self.role == "source" and self.labels is not None:
            raise ValueError(f"source domain {self.name!r} must be unlabeled")
        if self.role == "target" and self.labels is None:
            raise ValueError(f"target domain {self.name!r} needs labels")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self),):
                raise ValueError(f"{self.labels.size} labels for {len(self)} samples")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.int64)
            if self.masks.shape != (len(self),) + self.image_shape[1:]:
                raise ValueError(f"mask shape {self.masks.shape} does not match images")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    def subset(self, idx) -> "Domain":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(
            self,
            samples=self.samples[idx],
            labels=None if self.labels is None else self.labels[idx],
            masks=None if self.masks is None else self.masks[idx],
            domain_ids=None if self.domain_ids is None else self.domain_ids[idx],
        )

    def as_source(self) -> "Domain":
        """Same images with labels dropped, for use as an unlabeled source."""
        return replace(self, role="source", labels=None)


# ---------------------------------------------------------------- PGM

_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Binary P5 graymap -> (H, W) uint8 (or uint16 when maxval > 255)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    pos, tokens = 0, []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary P5 graymap (magic {tokens[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise DataError(f"{path}: invalid PGM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    body = raw[pos:pos + need]
    if len(body) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    img = np.frombuffer(body, dtype=dtype).reshape(h, w)
    if maxval < 256:
        if img.max(initial=0) > maxval:
            raise DataError(f"{path}: pixel exceeds maxval {maxval}")
        return img.copy()
    return img.astype(np.uint16)


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"write_pgm needs a 2-d array, got {img.shape}")
    if img.dtype != np.uint8:
        if img.min(initial=0) < 0 or img.max(initial=0) > 255:
            raise ValueError("write_pgm: values outside 0..255")
        img = img.astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- resampling

def center_crop_to_aspect(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    th, tw = size
    if h * tw > w * th:
        nh = max(1, round(w * th / tw))
        top = (h - nh) // 2
        return img[top:top + nh]
    if h * tw < w * th:
        nw = max(1, round(h * tw / th))
        left = (w - nw) // 2
        return img[:, left:left + nw]
    return img


def resample_nearest(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    th, tw = size
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return img[rows[:, None], cols[None, :]]


def fit_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if img.shape == tuple(size):
        return img
    return resample_nearest(center_crop_to_aspect(img, size), size)


_LABEL_PREFIX = re.compile(r"^(\d+)_")


def load_domain(directory: str | os.PathLike, role: str, size: tuple[int, int] = (64, 64),
                name: str | None = None) -> Domain:
    """Read every ``*.pgm`` in ``directory`` (lexicographic order).

    Target domains take class labels from a ``<class>_`` filename prefix.
    A ``masks/`` subdirectory with matching filenames supplies per-pixel masks.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm" and p.is_file())
    if not files:
        raise DataError(f"{directory}: no .pgm files")
    mask_dir = directory / "masks"
    samples, labels, masks = [], [], []
    for f in files:
        img = read_pgm(f)
        scale = 255.0 if img.dtype == np.uint8 else 65535.0
        samples.append(fit_image(img, size).astype(np.float64) / scale)
        if role == "target":
            m = _LABEL_PREFIX.match(f.name)
            if m is None:
                raise DataError(f"{f}: labeled file needs a '<class>_' name prefix")
            labels.append(int(m.group(1)))
        if mask_dir.is_dir():
            mf = mask_dir / f.name
            if not mf.is_file():
                raise DataError(f"{mf}: missing mask for {f.name}")
            masks.append(fit_image(read_pgm(mf), size).astype(np.int64))
    return Domain(
        name=name or directory.name, role=role,
        samples=np.stack(samples)[:, None],
        labels=np.array(labels) if role == "target" else None,
        masks=np.stack(masks) if masks else None,
    )


def save_domain(domain: Domain, directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if domain.masks is not None:
        (directory / "masks").mkdir(exist_ok=True)
    written = []
    for i in range(len(domain)):
        fname = (f"{domain.labels[i]}_{i:05d}.pgm" if domain.labels is not None
                 else f"{i:05d}.pgm")
        write_pgm(directory / fname, to_uint8(domain.samples[i, 0]))
        written.append(directory / fname)
        if domain.masks is not None:
            write_pgm(directory / "masks" / fname, domain.masks[i].astype(np.uint8))
            written.append(directory / "masks" / fname)
    return written


# ---------------------------------------------------------------- synthetic domains

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _band_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _shapes_image(rng, size):
    yy, xx = _grid(size)
    img = np.full((size, size), rng.uniform(0.0, 0.3))
    for _ in range(rng.integers(2, 6)):
        value = rng.uniform(0.3, 1.0)
        cy, cx = rng.uniform(0, size, 2)
        hy, hx = rng.uniform(size * 0.08, size * 0.3, 2)
        if rng.random() < 0.5:
            inside = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            inside = ((yy - cy) / hy) ** 2 + ((xx - cx) / hx) ** 2 <= 1.0
        img[inside] = value
    return np.clip(img + 0.02 * rng.standard_normal((size, size)), 0.0, 1.0)


def _texture_image(rng, size):
    n = _band_noise(rng, size, rng.uniform(1.0, 4.0))
    return (n - n.min()) / (n.max() - n.min() + 1e-12)


def _spot(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _blob_scene(rng, size: int, lesions: bool) -> tuple[np.ndarray, np.ndarray]:
    """Two smooth lobes on a noisy background; returns (image, lobe indicator)."""
    yy, xx = _grid(size)
    mask = np.zeros((size, size), dtype=bool)
    for side in (0.3, 0.7):
        cy = size * (0.5 + rng.uniform(-0.05, 0.05))
        cx = size * (side + rng.uniform(-0.03, 0.03))
        ry = size * rng.uniform(0.24, 0.32)
        rx = size * rng.uniform(0.11, 0.15)
        theta = np.arctan2((yy - cy) / ry, (xx - cx) / rx)
        k = rng.integers(2, 5)
        wobble = 1.0 + 0.08 * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
        mask |= np.hypot((yy - cy) / ry, (xx - cx) / rx) <= wobble
    background = 0.15 + 0.05 * _band_noise(rng, size, 2.0)
    lobe = rng.uniform(0.5, 0.6) + 0.04 * _band_noise(rng, size, 1.5)
    img = np.where(mask, lobe, background)
    # clutter outside the lobes, present in every class
    outside = np.argwhere(~ndimage.binary_dilation(mask, iterations=3))
    for _ in range(rng.integers(2, 5)):
        cy, cx = outside[rng.integers(len(outside))]
        img[_spot(yy, xx, cy, cx, rng.uniform(1.0, 2.0)) & ~mask] = rng.uniform(0.35, 0.5)
    if lesions:
        core = ndimage.binary_erosion(mask, iterations=3)
        inner = np.argwhere(core if core.any() else mask)  # tiny images erode to nothing
        for _ in range(rng.integers(4, 8)):
            cy, cx = inner[rng.integers(len(inner))]
            img[_spot(yy, xx, cy, cx, rng.uniform(1.5, 2.5)) & mask] = rng.uniform(0.9, 1.0)
    img = img + 0.02 * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0), mask


def _balanced_labels(rng, count: int, k: int = 2) -> np.ndarray:
    return rng.permutation(np.arange(count) % k)


def gen_synthetic(kind: str, count: int, size: int = 64, seed: int = 0,
                  name: str | None = None) -> Domain:
    """Deterministic synthetic domain.

    ``shapes`` and ``textures`` are unlabeled distant sources.
    ``blobs-labeled`` is the target task: class 1 images carry bright lesions
    inside the lobes. ``blobs-masked`` adds the exact lobe masks.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if count < 1 or size < 4:
        raise ValueError("count must be >= 1 and size >= 4")
    rng = np.random.default_rng(seed)
    name = name or kind
    if kind in ("shapes", "textures"):
        draw = _shapes_image if kind == "shapes" else _texture_image
        imgs = np.stack([draw(rng, size) for _ in range(count)])
        return Domain(name, "source", imgs[:, None])
    if count < 2:
        raise ValueError(f"{kind} needs count >= 2 for class balance")
    labels = _balanced_labels(rng, count)
    imgs, masks = [], []
    for lab in labels:
        img, m = _blob_scene(rng, size, lesions=bool(lab))
        imgs.append(img)
        masks.append(m)
    return Domain(name, "target", np.stack(imgs)[:, None], labels=labels,
                  masks=np.stack(masks).astype(np.int64) if kind == "blobs-masked" else None)


def split(domain: Domain, fraction: float, seed: int = 0) -> tuple[Domain, Domain]:
    """Seeded split into (first, second) with ``fraction`` going to the first part.

    Labeled domains are split per class so each side keeps the class balance.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    if domain.labels is None:
        perm = rng.permutation(len(domain))
        cut = int(round(fraction * len(domain)))
        first = np.sort(perm[:cut])
    else:
        first = []
        for c in np.unique(domain.labels):
            idx = np.flatnonzero(domain.labels == c)
            if idx.size < 2:
                raise ValueError(f"class {c} has fewer than 2 samples; cannot stratify")
            perm = rng.permutation(idx)
            first.extend(perm[:int(round(fraction * idx.size))])
        first = np.sort(np.asarray(first, dtype=np.intp))
    second = np.setdiff1d(np.arange(len(domain)), first)
    return domain.subset(first), domain.subset(second)


def pool(domains: list[Domain], name: str = "pooled") -> Domain:
    """Concatenate unlabeled domains, remembering each sample's domain index."""
    if not domains:
        raise ValueError("no domains to pool")
    shapes = {d.image_shape for d in domains}
    if len(shapes) != 1:
        raise ValueError(f"domains have differing image shapes {sorted(shapes)}")
    ids = np.concatenate([np.full(len(d), i) for i, d in enumerate(domains)])
    return Domain(name, "source", np.concatenate([d.samples for d in domains]),
                  domain_ids=ids)


def apply_masks(domain: Domain, masks: np.ndarray) -> Domain:
    """Zero every pixel outside the given foreground masks."""
    masks = np.asarray(masks)
    if masks.shape != (len(domain),) + domain.image_shape[1:]:
        raise ValueError(f"mask shape {masks.shape} does not match domain images")
    return replace(domain, samples=domain.samples * (masks > 0)[:, None])
