"""Corpus ingestion, grayscale preprocessing, synthetic shapes and k-fold splits."""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, IngestionError
from .tensor import resize_bilinear

SHAPES = ("square", "disc", "cross", "ring", "bars")


@dataclass(frozen=True)
class Dataset:
    """Grayscale images ``(N, H, H)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 3 or (len(images) and images.shape[1] != images.shape[2]):
            raise DimensionError(f"images must be (N, H, H), got {images.shape}")
        if len(images) != len(labels):
            raise DimensionError(f"{len(images)} images but {len(labels)} labels")
        n_classes = len(self.class_names)
        if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
            raise ConfigurationError(f"labels must lie in [0, {n_classes})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", list(self.class_names))

    def __len__(self):
        return len(self.labels)

    @property
    def size(self):
        """Image side length H."""
        return self.images.shape[1]

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_names)


# -- PGM / PPM ----------------------------------------------------------------

def _header_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) file.

    Returns ``(pixels, maxval)`` where pixels is ``(H, W)`` or ``(H, W, 3)``
    holding raw integer sample values.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    tokens, offset = _header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PNM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PNM header values {width}x{height} maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = data[2 + offset:]
    if len(raster) < count * dtype.itemsize:
        raise FormatError(f"{path}: raster truncated")
    pixels = np.frombuffer(raster, dtype=dtype, count=count).astype(np.int64)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape), maxval


def write_pgm(path, pixels, maxval=255):
    """Write integer pixel values ``(H, W)`` as a P5 file."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D array, got {pixels.shape}")
    if pixels.min() < 0 or pixels.max() > maxval:
        raise ConfigurationError(f"pixel values must lie in [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(pixels.astype(dtype).tobytes())


def to_unit_gray(pixels, maxval):
    """Scale raw samples to [0, 1], averaging color channels."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img / maxval


def save_image(path, image):
    """Quantize a [0, 1] image to 8 bits and write it as PGM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.rint(img * 255).astype(np.int64))


def load_image(path, target_h=None):
    """Load one image as a square-resized grayscale ``(H, H)`` array in [0, 1]."""
    pixels, maxval = read_pnm(path)
    img = to_unit_gray(pixels, maxval)
    if target_h is not None:
        img = resize_bilinear(img, target_h, target_h)
    return img


def load_corpus(dir_path, labels_csv_path, target_h, class_names=None):
    """Load a directory of PGM/PPM files listed in a ``filename,label`` CSV.

    With ``class_names`` given, every label must be one of them.  Otherwise
    class names are taken in order of first appearance, unless every label is
    an integer, in which case labels are used as class indices directly.
    """
    with open(labels_csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["filename", "label"]:
            raise IngestionError(f"{labels_csv_path}: header must be 'filename,label'")
        rows = [r for r in reader if r]

    raw_labels = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise IngestionError(f"{labels_csv_path}:{lineno}: expected 2 columns, got {len(row)}")
        raw_labels.append(row[1].strip())
    if class_names is not None:
        class_names = list(class_names)
    elif all(lab.isdigit() for lab in raw_labels) and raw_labels:
        n_classes = max(int(lab) for lab in raw_labels) + 1
        class_names = [str(i) for i in range(n_classes)]
    else:
        class_names = list(dict.fromkeys(raw_labels))
    index = {name: i for i, name in enumerate(class_names)}

    images, labels = [], []
    for lineno, (row, lab) in enumerate(zip(rows, raw_labels), start=2):
        fname = row[0].strip()
        path = os.path.join(dir_path, fname)
        if not os.path.isfile(path):
            raise IngestionError(f"{labels_csv_path}:{lineno}: missing image file {fname!r}")
        try:
            images.append(load_image(path, target_h))
        except FormatError as exc:
            raise IngestionError(f"{labels_csv_path}:{lineno}: cannot parse {fname!r}: {exc}") from exc
        if lab not in index:
            raise IngestionError(f"{labels_csv_path}:{lineno}: unknown class {lab!r}")
        labels.append(index[lab])
    if not images:
        return Dataset(np.zeros((0, target_h, target_h)), np.zeros(0, dtype=np.int64), class_names)
    return Dataset(np.stack(images), np.array(labels), class_names)


def save_corpus(ds, dir_path, labels_csv="labels.csv"):
    """Write a dataset as 8-bit PGM files plus a labels CSV. Returns the CSV path."""
    os.makedirs(dir_path, exist_ok=True)
    csv_path = os.path.join(dir_path, labels_csv)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
            fname = f"img{i:05d}.pgm"
            save_image(os.path.join(dir_path, fname), img)
            writer.writerow([fname, ds.class_names[lab]])
    return csv_path


# -- synthetic corpus -----------------------------------------------------------

def _shape_mask(kind, h, cy, cx):
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = 0.3 * h
    if kind == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if kind == "disc":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "cross":
        arm = max(r / 4, 1.0)
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.6 * r) ** 2)
    if kind == "bars":
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        band = np.floor((dy + r) / max(2 * r / 5, 1.0)).astype(int)
        return inside & (band % 2 == 0)
    raise ConfigurationError(f"unknown shape {kind!r}")


def synth_corpus(classes, per_class, h=32, jitter_px=2, seed=0, noise=0.05):
    """Balanced synthetic grayscale corpus, one geometric shape per class.

    Shapes are centred with a uniform integer offset of up to ``jitter_px`` in
    each direction and receive additive Gaussian noise of std ``noise``; pixel
    values are clipped to [0, 1].  Sample ``i`` belongs to class ``i % classes``.
    """
    if not 2 <= classes <= len(SHAPES):
        raise ConfigurationError(f"classes must be in 2..{len(SHAPES)}, got {classes}")
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1")
    if jitter_px < 0 or 2 * jitter_px >= 0.4 * h:
        raise ConfigurationError(f"jitter_px={jitter_px} too large for H={h}")
    rng = np.random.default_rng(seed)
    total = classes * per_class
    labels = np.arange(total) % classes
    images = np.empty((total, h, h))
    centre = (h - 1) / 2
    for i, lab in enumerate(labels):
        oy, ox = rng.integers(-jitter_px, jitter_px + 1, size=2)
        img = np.where(_shape_mask(SHAPES[lab], h, centre + oy, centre + ox), 0.9, 0.1)
        if noise:
            img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, list(SHAPES[:classes]))


# -- folds ------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    k: int
    seed: int
    assignments: np.ndarray

    def test_indices(self, fold):
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold):
        return np.flatnonzero(self.assignments != fold)


def make_folds(ds, k=5, seed=0):
    """Stratified k-fold assignment.

    Each class is shuffled and dealt round-robin over the folds; the starting
    fold rotates between classes so overall fold sizes stay balanced too.
    """
    if k < 2:
        raise ConfigurationError(f"fold count must be >= 2, got {k}")
    labels = np.asarray(ds.labels)
    counts = np.bincount(labels, minlength=ds.n_classes)
    small = [ds.class_names[c] for c in range(ds.n_classes) if counts[c] < k]
    if small:
        raise ConfigurationError(f"classes with fewer than k={k} samples: {small}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(len(labels), dtype=np.int64)
    start = 0
    for c in range(ds.n_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignments[members] = (start + np.arange(len(members))) % k
        start = (start + len(members)) % k
    assignments.setflags(write=False)
    return SplitPlan(k, seed, assignments)


def fold_view(ds, plan, fold):
    """``(train, test)`` datasets for one fold; both keep the dataset order."""
    if not 0 <= fold < plan.k:
        raise ConfigurationError(f"fold {fold} outside 0..{plan.k - 1}")
    if len(plan.assignments) != len(ds):
        raise DimensionError("split plan does not match dataset size")
    return ds.subset(plan.train_indices(fold)), ds.subset(plan.test_indices(fold))


def stratified_holdout(ds, fraction, seed):
    """Split off a stratified validation part. Returns ``(train, val)``."""
    rng = np.random.default_rng(seed)
    val_idx = []
    for c in range(ds.n_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        take = int(round(fraction * len(members)))
        if len(members) > 1:
            take = min(max(take, 1), len(members) - 1)
        else:
            take = 0
        val_idx.extend(members[:take])
    mask = np.zeros(len(ds), dtype=bool)
    mask[np.asarray(val_idx, dtype=np.int64)] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))
