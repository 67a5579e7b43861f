"""Synthetic fundus-like images with planted lesions and photometric domain shift.

Each class plants blobs with class-specific geometry on a textured orange
disk:

* class 0 - no lesions;
* class 1 - a cluster of bright yellow spots near the centre;
* class 2 - scattered small dark-red dots;
* class 3 - an enlarged pale disc at the optic-disc location.

Classes beyond 3 reuse these templates with a different colour so that
any ``K >= 2`` works.  A :class:`DomainShift` is applied last (blur, gain,
bias, contrast, noise) and models a change of camera.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError

MANIFEST = "manifest.txt"
FORMAT_TAG = "frla-dataset-v1"


@dataclass(frozen=True)
class LesionRule:
    count: tuple[int, int]               # inclusive range
    radius: tuple[float, float]
    color: tuple[float, float, float]
    region: tuple[float, float, float]   # centre y, centre x, spread (fractions of image size)


DEFAULT_RULES = (
    LesionRule((0, 0), (0.0, 0.0), (0.0, 0.0, 0.0), (0.5, 0.5, 0.0)),
    LesionRule((3, 5), (1.4, 2.2), (0.98, 0.88, 0.30), (0.5, 0.45, 0.14)),
    LesionRule((4, 7), (1.2, 2.0), (0.30, 0.04, 0.02), (0.5, 0.5, 0.30)),
    LesionRule((1, 1), (4.2, 5.5), (1.00, 0.95, 0.80), (0.5, 0.74, 0.04)),
)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    image_size: int = 32
    channels: int = 3
    rules: tuple = DEFAULT_RULES
    base_color: tuple[float, float, float] = (0.72, 0.34, 0.16)
    texture_sigma: float = 0.05
    pixel_noise: float = 0.015
    optic_disc_radius: tuple[float, float] = (2.0, 2.8)
    label_weights: tuple | None = None    # None = uniform

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")
        if self.channels != 3:
            raise DatasetError("the generator renders RGB images only")
        if self.image_size < 8:
            raise DatasetError("image_size must be at least 8")
        if self.label_weights is not None and len(self.label_weights) != self.num_classes:
            raise DatasetError("label_weights length must equal num_classes")

    def rule(self, k: int) -> LesionRule:
        if k < len(self.rules):
            return self.rules[k]
        # extra classes reuse a lesion template with rotated colour channels
        n_templates = len(self.rules) - 1
        base = self.rules[1 + (k - 1) % n_templates]
        return replace(base, color=tuple(np.roll(base.color, (k - 1) // n_templates)))


@dataclass(frozen=True)
class DomainShift:
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    contrast: float = 1.0
    noise_sigma: float = 0.0
    blur: bool = False

    def __post_init__(self):
        if any(g <= 0 for g in self.gain):
            raise DatasetError("channel gains must be positive")
        if self.contrast <= 0:
            raise DatasetError("contrast must be positive")

    @property
    def is_identity(self) -> bool:
        return self == DomainShift()

    def scaled(self, strength: float) -> "DomainShift":
        """Interpolate from identity (0) to this shift (1); >1 extrapolates."""
        s = float(strength)
        return DomainShift(
            gain=tuple(max(1.0 + s * (g - 1.0), 1e-3) for g in self.gain),
            bias=tuple(s * b for b in self.bias),
            contrast=max(1.0 + s * (self.contrast - 1.0), 1e-3),
            noise_sigma=s * self.noise_sigma,
            blur=self.blur and s > 0,
        )


# a different camera: weak red channel, greenish cast, soft focus
TARGET_SHIFT = DomainShift(gain=(0.79, 1.035, 1.0), bias=(0.0, 0.042, 0.028), contrast=1.0,
                           noise_sigma=0.007, blur=True)


@dataclass
class UnlabeledDataset:
    """Target images as the adaptation loop sees them: ids and pixels only."""

    images: np.ndarray
    domain: str = "target"

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.images.shape[0])

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class LabeledDataset:
    images: np.ndarray                 # n × C × H × W in [0, 1]
    labels: np.ndarray                 # n, ints in [0, K)
    num_classes: int
    domain: str = "source"
    split: str = "train"
    masks: np.ndarray | None = None    # n × H × W lesion masks (bool)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label outside 0..K-1")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
            if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
                raise DatasetError("mask shape does not match images")

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.images.shape[0])

    def __len__(self) -> int:
        return self.images.shape[0]

    def unlabeled(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.images.copy(), self.domain)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, self.domain,
                              self.split, None if self.masks is None else self.masks[idx])


def concat(datasets, domain: str = "pooled", split: str = "train") -> LabeledDataset:
    ks = {d.num_classes for d in datasets}
    if len(ks) != 1:
        raise DatasetError("cannot pool datasets with different class counts")
    masks = None
    if all(d.masks is not None for d in datasets):
        masks = np.concatenate([d.masks for d in datasets])
    return LabeledDataset(np.concatenate([d.images for d in datasets]),
                          np.concatenate([d.labels for d in datasets]), ks.pop(), domain, split, masks)


# rendering ----------------------------------------------------------------

def stratified_labels(n: int, weights, rng) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = n * w
    counts = np.floor(raw).astype(int)
    # largest remainder, ties to the lower class index
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    labels = np.repeat(np.arange(len(w)), counts)
    return rng.permutation(labels)


def _smooth_noise(rng, size: int, coarse: int = 6) -> np.ndarray:
    g = rng.standard_normal((coarse, coarse))
    idx = np.minimum((np.arange(size) * coarse) // size, coarse - 1)
    return g[np.ix_(idx, idx)]


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    H, W = img.shape[1:]
    return sum(p[:, i:i + H, j:j + W] for i in range(3) for j in range(3)) / 9.0


def render(spec: SynthSpec, label: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """One clean (unshifted) image and its lesion mask."""
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    cy = cx = (S - 1) / 2.0
    R = 0.47 * S
    r = np.hypot(yy - cy, xx - cx)
    disk = r <= R

    base = np.asarray(spec.base_color)[:, None, None]
    shade = 1.0 - 0.35 * (r / R) ** 2
    tex = spec.texture_sigma * _smooth_noise(rng, S)
    img = base * shade[None] + tex[None] * np.array([1.0, 0.6, 0.3])[:, None, None]
    img = img + spec.pixel_noise * rng.standard_normal(img.shape)

    def blob(y0, x0, rad, color, soft=1.0):
        d = np.hypot(yy - y0, xx - x0)
        a = np.clip((rad + 0.5 * soft - d) / soft, 0.0, 1.0) * disk
        nonlocal img
        img = img * (1 - a[None]) + np.asarray(color)[:, None, None] * a[None]
        return d <= rad

    # every eye has a normal optic disc on the right
    od_y, od_x = cy + rng.uniform(-1, 1), 0.74 * S + rng.uniform(-1, 1)
    blob(od_y, od_x, rng.uniform(*spec.optic_disc_radius), (0.95, 0.80, 0.55))

    mask = np.zeros((S, S), dtype=bool)
    rule = spec.rule(label)
    n_blobs = rng.integers(rule.count[0], rule.count[1] + 1)
    for _ in range(n_blobs):
        for _try in range(20):
            y0 = S * (rule.region[0] + rule.region[2] * rng.uniform(-1, 1))
            x0 = S * (rule.region[1] + rule.region[2] * rng.uniform(-1, 1))
            if math.hypot(y0 - cy, x0 - cx) < R - 2:
                break
        mask |= blob(y0, x0, rng.uniform(*rule.radius), rule.color)

    img = np.where(disk[None], img, 0.02)
    return np.clip(img, 0.0, 1.0), mask & disk


def apply_shift(img: np.ndarray, shift: DomainShift, rng) -> np.ndarray:
    if shift.is_identity:
        return img
    out = _box_blur(img) if shift.blur else img
    out = out * np.asarray(shift.gain)[:, None, None] + np.asarray(shift.bias)[:, None, None]
    m = out.mean(axis=(1, 2), keepdims=True)
    out = (out - m) * shift.contrast + m
    if shift.noise_sigma > 0:
        out = out + shift.noise_sigma * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def generate(spec: SynthSpec, shift: DomainShift, n: int, seed: int, *, domain: str = "source",
             split: str = "train") -> LabeledDataset:
    """Deterministic class-stratified dataset; sample i uses the stream (seed, i)."""
    if n < 1:
        raise DatasetError("n must be at least 1")
    weights = spec.label_weights or [1.0] * spec.num_classes
    labels = stratified_labels(n, weights, np.random.default_rng([seed, 2**31]))
    S = spec.image_size
    images = np.empty((n, spec.channels, S, S))
    masks = np.empty((n, S, S), dtype=bool)
    for i, y in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        img, mask = render(spec, int(y), rng)
        images[i] = apply_shift(img, shift, rng)
        masks[i] = mask
    return LabeledDataset(images, labels, spec.num_classes, domain, split, masks)


def random_shift(rng, strength: float = 1.0) -> DomainShift:
    """A random camera, used to diversify the teacher's pretraining corpus."""
    return DomainShift(
        gain=tuple(rng.uniform(0.7, 1.7, size=3)),
        bias=tuple(rng.uniform(-0.05, 0.12, size=3)),
        contrast=float(rng.uniform(0.55, 1.1)),
        noise_sigma=float(rng.uniform(0.0, 0.05)),
        blur=bool(rng.random() < 0.5),
    ).scaled(strength)


def generate_diverse(spec: SynthSpec, n: int, seed: int, *, domain: str = "pooled") -> LabeledDataset:
    """Like :func:`generate` but every image gets its own random camera."""
    weights = spec.label_weights or [1.0] * spec.num_classes
    labels = stratified_labels(n, weights, np.random.default_rng([seed, 2**31]))
    S = spec.image_size
    images = np.empty((n, spec.channels, S, S))
    masks = np.empty((n, S, S), dtype=bool)
    for i, y in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        img, mask = render(spec, int(y), rng)
        images[i] = apply_shift(img, random_shift(rng), rng)
        masks[i] = mask
    return LabeledDataset(images, labels, spec.num_classes, domain, "train", masks)


# augmentation ---------------------------------------------------------------

def augment_with(image: np.ndarray, flip: bool, angle_deg: float, zoom: float) -> np.ndarray:
    """Flip, rotate and zoom about the centre; nearest neighbour, edges replicated."""
    img = np.asarray(image, dtype=np.float64)
    C, H, W = img.shape
    if flip:
        img = img[:, :, ::-1]
    if angle_deg == 0.0 and zoom == 1.0:
        return np.ascontiguousarray(img)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    dy, dx = (yy - cy) / zoom, (xx - cx) / zoom
    sy = cos * dy - sin * dx + cy
    sx = sin * dy + cos * dx + cx
    iy = np.clip(np.rint(sy).astype(int), 0, H - 1)
    ix = np.clip(np.rint(sx).astype(int), 0, W - 1)
    return img[:, iy, ix]


def augment(image: np.ndarray, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-5.0, 5.0))
    zoom = float(rng.uniform(0.9, 1.1))
    return augment_with(image, flip, angle, zoom)


def augment_batch(images: np.ndarray, seed) -> np.ndarray:
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=images.shape[0])
    return np.stack([augment(img, int(s)) for img, s in zip(images, seeds)])


# iteration ----------------------------------------------------------------

def batch_iter(ds, batch_size: int, shuffle_seed=None, drop_last: bool = False):
    """Yield ``(ids, images, labels)``; labels is None for unlabeled datasets."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    labels = getattr(ds, "labels", None)
    for start in range(0, n, batch_size):
        ids = order[start:start + batch_size]
        if drop_last and ids.size < batch_size:
            break
        yield ids, ds.images[ids], None if labels is None else labels[ids]


def num_batches(n: int, batch_size: int, drop_last: bool = False) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


# persistence ----------------------------------------------------------------

def _checksum(*blobs: bytes) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(b)
    return h.hexdigest()


def save_dataset(ds: LabeledDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img = np.ascontiguousarray(ds.images, dtype="<f8").tobytes()
    lab = ds.labels.astype("<u2").tobytes()
    blobs = [img, lab]
    (d / "images.bin").write_bytes(img)
    (d / "labels.bin").write_bytes(lab)
    if ds.masks is not None:
        msk = ds.masks.astype(np.uint8).tobytes()
        (d / "masks.bin").write_bytes(msk)
        blobs.append(msk)
    n, C, H, W = ds.images.shape
    lines = [
        f"format={FORMAT_TAG}", f"n={n}", f"K={ds.num_classes}", f"C={C}", f"H={H}", f"W={W}",
        f"domain={ds.domain}", f"split={ds.split}", f"masks={int(ds.masks is not None)}",
        f"checksum={_checksum(*blobs)}",
    ]
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def _read_manifest(d: Path) -> dict:
    path = d / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    if out.get("format") != FORMAT_TAG:
        raise DatasetError(f"{path}: unknown format {out.get('format')!r}")
    return out


def load_dataset(directory) -> LabeledDataset:
    d = Path(directory)
    m = _read_manifest(d)
    try:
        n, K, C, H, W = (int(m[k]) for k in ("n", "K", "C", "H", "W"))
        has_masks = m.get("masks", "0") == "1"
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{d / MANIFEST}: bad or missing field ({exc})") from None
    try:
        img = (d / "images.bin").read_bytes()
        lab = (d / "labels.bin").read_bytes()
        msk = (d / "masks.bin").read_bytes() if has_masks else None
    except OSError as exc:
        raise DatasetError(f"missing blob in {d}: {exc}") from None
    if len(img) != 8 * n * C * H * W:
        raise DatasetError(f"images.bin holds {len(img)} bytes, manifest implies {8 * n * C * H * W}")
    if len(lab) != 2 * n:
        raise DatasetError(f"labels.bin holds {len(lab)} bytes, manifest implies {2 * n}")
    if msk is not None and len(msk) != n * H * W:
        raise DatasetError(f"masks.bin holds {len(msk)} bytes, manifest implies {n * H * W}")
    blobs = [img, lab] + ([msk] if msk is not None else [])
    if _checksum(*blobs) != m.get("checksum"):
        raise DatasetError(f"checksum mismatch in {d}")
    images = np.frombuffer(img, dtype="<f8").astype(np.float64).reshape(n, C, H, W)
    labels = np.frombuffer(lab, dtype="<u2").astype(np.int64)
    masks = None if msk is None else np.frombuffer(msk, dtype=np.uint8).reshape(n, H, W).astype(bool)
    return LabeledDataset(images, labels, K, m.get("domain", "unknown"), m.get("split", "unknown"), masks)


def write_pgm(path, array2d: np.ndarray, scale: int = 1) -> None:
    """8-bit binary PGM of a [0, 1] array, optionally nearest-upscaled."""
    a = np.clip(np.asarray(array2d, dtype=np.float64), 0.0, 1.0)
    if scale > 1:
        a = np.kron(a, np.ones((scale, scale)))
    h, w = a.shape
    data = np.rint(a * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data)


def export_pgm(image: np.ndarray, path) -> None:
    """Luminance of a C×H×W image as PGM."""
    img = np.asarray(image)
    lum = img.mean(axis=0) if img.shape[0] != 3 else 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    write_pgm(path, lum)
