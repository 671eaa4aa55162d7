"""Dataset layout, image decoding, preprocessing, splitting and sampling.

On disk a dataset is ``root/<class_dir>/<image>``; sorted class directory
names define the class ids. The manifest is a JSON document with the keys
``classes``, ``records`` (``id``, ``class``, ``split``, ``path``) and
``stats`` (per-channel ``mean`` and ``var``).
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SIZE = 105
NORM_EPS = 1e-8
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Malformed dataset, unreadable image or impossible sampling constraint."""


def worker_count():
    env = os.environ.get("RESINSORT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError(f"RESINSORT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# Image I/O
# --------------------------------------------------------------------------

def _ppm_tokens(buf):
    """Yield (token, end_offset) for the header fields of a binary PPM."""
    pos = 0
    n = len(buf)
    while True:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        yield buf[start:pos], pos


def read_ppm(path):
    """Decode a binary (P6) PPM into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        tokens = _ppm_tokens(buf)
        magic, _ = next(tokens)
        if magic != b"P6":
            raise DataError("not a binary PPM (P6)")
        width = int(next(tokens)[0])
        height = int(next(tokens)[0])
        maxval_tok, end = next(tokens)
        maxval = int(maxval_tok)
    except (StopIteration, ValueError) as exc:
        raise DataError(f"corrupt PPM header in {path}") from exc
    except DataError as exc:
        raise DataError(f"{exc}: {path}") from None
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise DataError(f"corrupt PPM header in {path}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    count = width * height * 3
    data = buf[end + 1:end + 1 + count * dtype.itemsize]
    if len(data) != count * dtype.itemsize:
        raise DataError(f"truncated PPM pixel data in {path}")
    pixels = np.frombuffer(data, dtype=dtype).reshape(height, width, 3)
    if maxval != 255:
        # exact integer rounding (half up) to the 0..255 scale
        pixels = ((pixels.astype(np.int64) * 510 + maxval) // (2 * maxval)).astype(np.uint8)
    return pixels


def write_ppm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 array")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(pixels).tobytes())


def _read_with_pillow(path):
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataError(f"no decoder for {path} (install Pillow for non-PPM formats)") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


# extension -> decoder; PPM is native, everything else goes through Pillow
DECODERS = {".ppm": read_ppm}
for _ext in (".png", ".jpg", ".jpeg", ".bmp"):
    DECODERS[_ext] = _read_with_pillow


def decode_image(path):
    path = Path(path)
    decoder = DECODERS.get(path.suffix.lower())
    if decoder is None:
        raise DataError(f"unsupported image format: {path}")
    return decoder(path)


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def bilinear_resize(pixels, height, width):
    """Bilinear resize with half-pixel centres and edge clamping."""
    img = np.asarray(pixels, dtype=np.float64)
    in_h, in_w = img.shape[:2]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(height, in_h)
    x0, x1, wx = axis(width, in_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def to_unit_range(pixels):
    return np.asarray(pixels, dtype=np.float64) / 255.0


def preprocess(pixels, mean, var, size=IMAGE_SIZE):
    """Resize to size x size, then per-channel (x - mean) / sqrt(var + 1e-8).

    ``pixels`` are raw uint8 values; statistics are on the [0, 1] scale.
    """
    img = bilinear_resize(to_unit_range(pixels), size, size)
    return (img - np.asarray(mean)) / np.sqrt(np.asarray(var) + NORM_EPS)


def channel_stats(images):
    """Per-channel mean and (population) variance over a stack of HWC images."""
    stack = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    return stack.mean(axis=0), stack.var(axis=0)


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

@dataclass
class Record:
    id: str
    class_id: int
    path: str
    split: str | None = None


@dataclass
class DatasetManifest:
    classes: list  # class codes (directory names), index = class id
    records: list
    root: str = "."
    mean: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    var: list = field(default_factory=lambda: [1.0, 1.0, 1.0])

    @property
    def num_classes(self):
        return len(self.classes)

    def class_index(self, code):
        if isinstance(code, int):
            return code
        try:
            return self.classes.index(code)
        except ValueError:
            raise DataError(f"unknown class {code!r}; known: {self.classes}") from None

    def indices(self, split=None, exclude_class=None):
        """Record indices in manifest order, optionally filtered."""
        return [i for i, r in enumerate(self.records)
                if (split is None or r.split == split)
                and (exclude_class is None or r.class_id != exclude_class)]

    def labels(self, idx=None):
        recs = self.records if idx is None else [self.records[i] for i in idx]
        return np.array([r.class_id for r in recs], dtype=np.int64)

    def abspath(self, record):
        p = Path(record.path)
        return p if p.is_absolute() else Path(self.root) / p

    def split_counts(self):
        counts = {s: [0] * self.num_classes for s in SPLITS}
        for r in self.records:
            if r.split in counts:
                counts[r.split][r.class_id] += 1
        return counts

    def to_dict(self, base=None):
        """JSON document; record paths are made relative to ``base`` when given."""
        def rel(r):
            if base is None:
                return r.path
            return Path(os.path.relpath(self.abspath(r), base)).as_posix()
        return {
            "classes": [{"id": i, "code": c, "name": class_name(c)} for i, c in enumerate(self.classes)],
            "records": [{"id": r.id, "class": r.class_id, "split": r.split, "path": rel(r)}
                        for r in self.records],
            "stats": {"mean": [float(m) for m in self.mean], "var": [float(v) for v in self.var]},
        }

    def save(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(base=path.parent), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        try:
            classes = [c["code"] for c in sorted(doc["classes"], key=lambda c: c["id"])]
            records = [Record(r["id"], int(r["class"]), r["path"], r.get("split"))
                       for r in doc["records"]]
            stats = doc["stats"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: missing {exc}") from exc
        return cls(classes, records, str(path.parent), list(stats["mean"]), list(stats["var"]))


def class_name(code):
    """'01-PET' -> 'PET'; codes without a separator are their own name."""
    for sep in ("-", "_", " "):
        head, _, tail = code.partition(sep)
        if tail and head.isdigit():
            return tail
    return code


def load_dataset(root):
    """Scan ``root/<class_dir>/*`` into a manifest (no split, unit stats).

    Every image is decoded once so that corrupt files fail here, naming the
    offending path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    classes, records = [], []
    for cid, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in DECODERS)
        if not files:
            raise DataError(f"class directory {d.name!r} contains no images")
        classes.append(d.name)
        for f in files:
            rel = f.relative_to(root).as_posix()
            records.append(Record(rel, cid, rel))
    manifest = DatasetManifest(classes, records, str(root))
    bad = []
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for rec, err in zip(records, pool.map(_probe, [manifest.abspath(r) for r in records])):
            if err:
                bad.append(f"{rec.path} ({err})")
    if bad:
        raise DataError("unreadable images: " + "; ".join(bad))
    return manifest


def _probe(path):
    try:
        decode_image(path)
    except DataError as exc:
        return str(exc)
    return None


def load_images(manifest, idx=None, size=IMAGE_SIZE, normalize=True):
    """Decode, resize and (optionally) normalize records into an (N, size, size, 3) array."""
    idx = range(len(manifest.records)) if idx is None else idx
    paths = [manifest.abspath(manifest.records[i]) for i in idx]
    if normalize:
        def work(p):
            return preprocess(decode_image(p), manifest.mean, manifest.var, size)
    else:
        def work(p):
            return bilinear_resize(to_unit_range(decode_image(p)), size, size)
    out = np.empty((len(paths), size, size, 3))
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for k, img in enumerate(pool.map(work, paths)):
            out[k] = img
    return out


def compute_stats(manifest, scope="train", size=IMAGE_SIZE):
    """Set manifest mean/var from the resized training images (or all with scope='all')."""
    if scope not in ("train", "all"):
        raise ValueError("scope must be 'train' or 'all'")
    idx = manifest.indices("train" if scope == "train" else None)
    if not idx:
        raise DataError("no images to compute normalization statistics from")
    mean, var = channel_stats(load_images(manifest, idx, size, normalize=False))
    manifest.mean, manifest.var = mean.tolist(), var.tolist()
    return manifest


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------

def largest_remainder(total, ratios):
    """Integer apportionment of ``total`` proportional to ``ratios``; ties go to earlier parts."""
    weight = sum(ratios)
    quotas = [total * r / weight for r in ratios]
    parts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - parts[i]), i))
    for i in order[:total - sum(parts)]:
        parts[i] += 1
    return parts


def split_dataset(manifest, ratios=(80, 10, 10), seed=0):
    """Assign train/val/test per class in place (seeded shuffle, largest remainder)."""
    if len(ratios) != 3 or sum(ratios) != 100 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative parts summing to 100, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.class_id, []).append(i)
    for cid in sorted(by_class):
        members = by_class[cid]
        if len(members) < 3:
            log.warning("class %s has %d image(s); all assigned to train",
                        manifest.classes[cid], len(members))
            for i in members:
                manifest.records[i].split = "train"
            continue
        order = rng.permutation(len(members))
        n_train, n_val, _ = largest_remainder(len(members), ratios)
        for rank, k in enumerate(order):
            name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            manifest.records[members[k]].split = name
    return manifest


# --------------------------------------------------------------------------
# Pair / triplet sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PairSample:
    first: int
    second: int
    y: int  # 0 same class, 1 different


@dataclass(frozen=True)
class TripletSample:
    anchor: int
    positive: int
    negative: int


class _ClassPool:
    """Record indices grouped by label for constrained uniform sampling."""

    def __init__(self, indices, labels):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.indices) != len(self.labels):
            raise ValueError("indices and labels must align")
        self.classes = np.unique(self.labels)
        self.members = {int(c): self.indices[self.labels == c] for c in self.classes}
        # anchors for positive pairs / triplets: images whose class has a partner
        self.anchorable = np.concatenate(
            [m for m in self.members.values() if len(m) >= 2] or [np.empty(0, np.int64)])
        self.label_of = dict(zip(self.indices.tolist(), self.labels.tolist()))

    def others(self, cid):
        return self.indices[self.labels != cid]

    def partner(self, idx, rng):
        same = self.members[self.label_of[idx]]
        same = same[same != idx]
        return int(same[rng.integers(len(same))])


def sample_pairs(indices, labels, n=5000, positive_fraction=0.5, rng=None):
    """``n`` pairs, ``round(n * positive_fraction)`` of them same-class, in shuffled order."""
    rng = np.random.default_rng(rng)
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must lie in [0, 1]")
    pool = _ClassPool(indices, labels)
    n_pos = int(math.floor(n * positive_fraction + 0.5))
    n_neg = n - n_pos
    if n_pos and not len(pool.anchorable):
        raise DataError("same-class pairs requested but no class has two images")
    if n_neg and len(pool.classes) < 2:
        raise DataError("different-class pairs requested but only one class is present")
    is_pos = np.zeros(n, dtype=bool)
    is_pos[:n_pos] = True
    rng.shuffle(is_pos)
    pairs = []
    for pos in is_pos:
        if pos:
            a = int(pool.anchorable[rng.integers(len(pool.anchorable))])
            pairs.append(PairSample(a, pool.partner(a, rng), 0))
        else:
            a = int(pool.indices[rng.integers(len(pool.indices))])
            others = pool.others(pool.label_of[a])
            pairs.append(PairSample(a, int(others[rng.integers(len(others))]), 1))
    return pairs


def sample_triplets(indices, labels, n=5000, rng=None):
    """``n`` (anchor, positive, negative) triplets, anchor != positive."""
    rng = np.random.default_rng(rng)
    pool = _ClassPool(indices, labels)
    if len(pool.classes) < 2:
        raise DataError("triplets need at least two classes")
    if not len(pool.anchorable):
        raise DataError("triplets need a class with at least two images")
    out = []
    for _ in range(n):
        a = int(pool.anchorable[rng.integers(len(pool.anchorable))])
        others = pool.others(pool.label_of[a])
        out.append(TripletSample(a, pool.partner(a, rng), int(others[rng.integers(len(others))])))
    return out
