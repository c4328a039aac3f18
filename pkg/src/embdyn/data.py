"""Desk-scale datasets, the IDX file format, and the view augmentation family.

Images are ``[c, h, w]`` arrays in ``[0, 1]``; flat vector datasets are
``[d]``.  Every random draw of an augmentation is written to an
:class:`AugRecord`, and :func:`replay` turns a record back into the exact
same view.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MAX_IDX_ELEMENTS = 1 << 31

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class Dataset:
    """Samples, integer labels and a per-sample split tag.

    Labels are for evaluation only; nothing in training reads them.
    """

    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split)
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.split):
            raise ValueError("images, labels and split must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.sample_shape))

    def subset(self, tag: str) -> "Dataset":
        mask = self.split == tag
        return Dataset(self.images[mask], self.labels[mask], self.split[mask], self.num_classes)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


def make_gaussian_clusters(
    num_classes: int,
    per_class: int,
    d_in: int,
    spread: float,
    seed: int,
    test_per_class: int = 0,
) -> Dataset:
    """Isotropic Gaussian blobs around random unit-norm class centers.

    The first ``per_class`` samples of each class are tagged ``train``, the
    next ``test_per_class`` ``test``.  Vector datasets are not clamped to
    ``[0, 1]``.
    """
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, d_in))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    total = per_class + test_per_class
    xs, ys, tags = [], [], []
    for c in range(num_classes):
        xs.append(centers[c] + spread * rng.standard_normal((total, d_in)))
        ys.append(np.full(total, c))
        tags.append(np.array(["train"] * per_class + ["test"] * test_per_class))
    return Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(tags), num_classes)


def _read_idx(path: Path, magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise ValueError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > MAX_IDX_ELEMENTS:
            raise ValueError(f"{path}: dimensions overflow")
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated data ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise ValueError(f"{path}: trailing bytes after data")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims), dims


def write_idx_images(path, pixels: np.ndarray):
    """Write ``uint8`` images ``[N, h, w]`` in IDX format."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3:
        raise ValueError("IDX images must be [N, h, w]")
    header = struct.pack(">I", IDX_IMAGES) + struct.pack(">3I", *pixels.shape)
    Path(path).write_bytes(header + pixels.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">I", IDX_LABELS) + struct.pack(">I", labels.shape[0])
    Path(path).write_bytes(header + labels.tobytes())


def load_idx_images(path, labels_path=None, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Read IDX images (and optional labels) into a ``[N, 1, h, w]`` dataset scaled to ``[0, 1]``."""
    pixels, dims = _read_idx(Path(path), IDX_IMAGES)
    images = pixels.astype(np.float64)[:, None, :, :] / 255.0
    if labels_path is None:
        labels = np.zeros(dims[0], dtype=np.int64)
    else:
        labels, ldims = _read_idx(Path(labels_path), IDX_LABELS)
        if ldims[0] != dims[0]:
            raise ValueError(f"label count {ldims[0]} does not match image count {dims[0]}")
        labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, np.full(dims[0], split), k)


@dataclass(frozen=True)
class AugSpec:
    """Probabilities and intensities of each transform.

    Image transforms run in the order crop, flip, jitter, grayscale, blur,
    solarize, noise.  The ``vector_*`` fields apply to flat samples, which
    get additive Gaussian noise and random coordinate dropout instead.
    """

    crop_p: float = 1.0
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 1.0
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_p: float = 0.2
    noise_p: float = 0.0
    noise_std: float = 0.05
    vector_noise_p: float = 1.0
    vector_noise_std: float = 0.3
    vector_dropout_p: float = 0.5
    vector_dropout_rate: float = 0.2

    def __post_init__(self):
        for name in ("crop_p", "flip_p", "jitter_p", "gray_p", "blur_p", "solarize_p", "noise_p", "vector_noise_p", "vector_dropout_p", "vector_dropout_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.crop_ratio[0] <= 0 or self.crop_ratio[0] > self.crop_ratio[1]:
            raise ValueError("bad crop_ratio")

    @classmethod
    def identity(cls) -> "AugSpec":
        return cls(
            crop_p=0.0, crop_scale=(1.0, 1.0), flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0,
            solarize_p=0.0, noise_p=0.0, vector_noise_p=0.0, vector_dropout_p=0.0,
        )


@dataclass
class AugRecord:
    """Every sampled parameter of one view; ``None`` means the transform was skipped."""

    kind: str
    crop: tuple[int, int, int, int] | None = None
    flip: bool = False
    jitter: dict | None = None
    gray: bool = False
    blur_sigma: float | None = None
    solarize: bool = False
    noise_seed: int | None = None
    dropout_seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _sample_crop(h: int, w: int, spec: AugSpec, rng: np.random.Generator, scale=None) -> tuple[int, int, int, int]:
    lo, hi = spec.crop_scale if scale is None else scale
    area = h * w
    log_r = np.log(spec.crop_ratio)
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        ratio = float(np.exp(rng.uniform(log_r[0], log_r[1])))
        cw = int(round(np.sqrt(target * ratio)))
        ch = int(round(np.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: centered crop at the smallest allowed area with unit aspect
    side = max(1, int(round(np.sqrt(area * lo))))
    ch, cw = min(side, h), min(side, w)
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of ``[c, h, w]`` with half-pixel centers."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return np.tensordot(_LUMA, img, axes=1)[None]
    return img.mean(axis=0, keepdims=True)


def _apply_jitter(img: np.ndarray, j: dict) -> np.ndarray:
    for op in j["order"]:
        if op == "brightness":
            img = img * j["brightness"]
        elif op == "contrast":
            img = (img - _gray(img).mean()) * j["contrast"] + _gray(img).mean()
        elif op == "saturation":
            g = _gray(img)
            img = (img - g) * j["saturation"] + g
        elif op == "hue":
            # channel mixing stands in for a hue rotation; a no-op on one channel
            if img.shape[0] > 1:
                img = np.roll(img, 1, axis=0) * j["hue"] + img * (1 - j["hue"])
        img = np.clip(img, 0.0, 1.0)
    return img


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(2 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")
    rows = sum(k[i] * pad[:, i : i + img.shape[1], :] for i in range(len(k)))
    return sum(k[i] * rows[:, :, i : i + img.shape[2]] for i in range(len(k)))


def _render_image(x: np.ndarray, rec: AugRecord, spec: AugSpec) -> np.ndarray:
    img = np.asarray(x, dtype=np.float64)
    c, h, w = img.shape
    if rec.crop is not None:
        top, left, ch, cw = rec.crop
        img = resize_bilinear(img[:, top : top + ch, left : left + cw], h, w)
    if rec.flip:
        img = img[:, :, ::-1]
    if rec.jitter is not None:
        img = _apply_jitter(img, rec.jitter)
    if rec.gray:
        img = np.repeat(_gray(img), c, axis=0)
    if rec.blur_sigma is not None:
        img = _gaussian_blur(img, rec.blur_sigma)
    if rec.solarize:
        img = np.where(img >= 0.5, 1.0 - img, img)
    if rec.noise_seed is not None:
        img = img + spec.noise_std * np.random.default_rng(rec.noise_seed).standard_normal(img.shape)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def _render_vector(x: np.ndarray, rec: AugRecord, spec: AugSpec) -> np.ndarray:
    v = np.array(x, dtype=np.float64)
    if rec.noise_seed is not None:
        v = v + spec.vector_noise_std * np.random.default_rng(rec.noise_seed).standard_normal(v.shape)
    if rec.dropout_seed is not None:
        keep = np.random.default_rng(rec.dropout_seed).random(v.shape) >= spec.vector_dropout_rate
        v = v * keep
    if rec.crop is not None:
        _, start, _, width = rec.crop
        window = np.zeros(v.shape)
        window[start : start + width] = 1.0
        v = v * window
    return v


def sample_record(x: np.ndarray, spec: AugSpec, rng: np.random.Generator, crop_scale=None) -> AugRecord:
    """Draw the random parameters of one view without rendering it."""
    x = np.asarray(x)
    if x.ndim == 1:
        rec = AugRecord(kind="vector")
        if rng.random() < spec.vector_noise_p:
            rec.noise_seed = int(rng.integers(2**63))
        if rng.random() < spec.vector_dropout_p:
            rec.dropout_seed = int(rng.integers(2**63))
        return rec
    if x.ndim != 3:
        raise ValueError("augment expects [c, h, w] images or flat vectors")
    c, h, w = x.shape
    rec = AugRecord(kind="image")
    if rng.random() < spec.crop_p:
        rec.crop = _sample_crop(h, w, spec, rng, crop_scale)
        if rec.crop[2] < 1 or rec.crop[3] < 1:
            raise ValueError("crop window is empty")
    elif crop_scale is not None:
        rec.crop = _sample_crop(h, w, spec, rng, crop_scale)
    rec.flip = bool(rng.random() < spec.flip_p)
    if rng.random() < spec.jitter_p:
        order = [str(o) for o in rng.permutation(["brightness", "contrast", "saturation", "hue"])]
        rec.jitter = {
            "order": order,
            "brightness": float(rng.uniform(1 - spec.brightness, 1 + spec.brightness)),
            "contrast": float(rng.uniform(1 - spec.contrast, 1 + spec.contrast)),
            "saturation": float(rng.uniform(1 - spec.saturation, 1 + spec.saturation)),
            "hue": float(rng.uniform(0, spec.hue)),
        }
    rec.gray = bool(rng.random() < spec.gray_p)
    if rng.random() < spec.blur_p:
        rec.blur_sigma = float(rng.uniform(*spec.blur_sigma))
    rec.solarize = bool(rng.random() < spec.solarize_p)
    if rng.random() < spec.noise_p:
        rec.noise_seed = int(rng.integers(2**63))
    return rec


def replay(x: np.ndarray, rec: AugRecord, spec: AugSpec) -> np.ndarray:
    """Render the view described by ``rec``."""
    if rec.kind == "vector":
        return _render_vector(x, rec, spec)
    return _render_image(x, rec, spec)


def augment(x: np.ndarray, spec: AugSpec, rng: np.random.Generator, crop_scale=None) -> tuple[np.ndarray, AugRecord]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and (x.min() < 0 or x.max() > 1):
        raise ValueError("image pixels must lie in [0, 1]")
    rec = sample_record(x, spec, rng, crop_scale)
    return replay(x, rec, spec), rec


@dataclass
class ViewBatch:
    """``views[n, K, d_in]`` (flattened), source indices and per-view records."""

    views: np.ndarray
    image_ids: np.ndarray
    records: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.views.shape[1]


def make_view_batch(ds: Dataset, indices, K: int, spec: AugSpec, rng: np.random.Generator) -> ViewBatch:
    """``K`` independently augmented views of each selected sample."""
    if K < 2:
        raise ValueError("K must be >= 2")
    indices = np.asarray(indices, dtype=np.int64)
    views = np.empty((len(indices), K, ds.input_dim))
    records = []
    for row, idx in enumerate(indices):
        recs = []
        for j in range(K):
            v, rec = augment(ds.images[idx], spec, rng)
            views[row, j] = v.reshape(-1)
            recs.append(rec)
        records.append(recs)
    return ViewBatch(views, indices, records)


def make_multicrop_batch(
    ds: Dataset,
    indices,
    V: int,
    spec: AugSpec,
    rng: np.random.Generator,
    small_scale: tuple[float, float] = (0.05, 0.2),
) -> ViewBatch:
    """Two full views followed by ``V`` small views per sample.

    The MLP input width is fixed, so a "low resolution" view is a crop
    covering a smaller input fraction resized back up.  Flat samples have no
    spatial extent; their small views instead keep only a contiguous window
    of coordinates whose length fraction is drawn from ``small_scale``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    M = V + 2
    views = np.empty((len(indices), M, ds.input_dim))
    records = []
    for row, idx in enumerate(indices):
        x = ds.images[idx]
        recs = []
        for j in range(M):
            if j < 2:
                v, rec = augment(x, spec, rng)
            elif np.ndim(x) == 3:
                v, rec = augment(x, spec, rng, crop_scale=small_scale)
            else:
                rec = sample_record(x, spec, rng)
                size = np.size(x)
                width = max(1, int(round(rng.uniform(*small_scale) * size)))
                start = int(rng.integers(0, size - width + 1))
                rec.crop = (0, start, 1, width)
                v = replay(x, rec, spec)
            views[row, j] = v.reshape(-1)
            recs.append(rec)
        records.append(recs)
    return ViewBatch(views, indices, records)
