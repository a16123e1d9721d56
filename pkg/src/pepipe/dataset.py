"""Image/annotation I/O, manifests and dataset splitting.

Annotations are darknet-style sidecars next to each image (``<stem>.txt``),
one box per line: ``class_id cx cy w h`` with coordinates normalized to the
image size.  Classification labels come from the image's parent directory
name (``yes/`` or ``no/``).

A manifest is a text file of image paths relative to its own directory,
preceded by ``#key=value`` header lines::

    #pepipe-manifest v1
    #split=train
    #image_size=64
    yes/pe_00000.png
    no/neg_00000.png
"""

import hashlib
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConsistencyError,
    DecodeError,
    InputError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)

MANIFEST_MAGIC = "#pepipe-manifest v1"
EDGE_TOL = 1e-6


@dataclass(frozen=True)
class BoxLabel:
    """Normalized darknet box; ``class_id`` is always 0 (PE)."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def to_pixels(self, image_w, image_h):
        x0 = (self.cx - self.w / 2) * image_w
        y0 = (self.cy - self.h / 2) * image_h
        return (x0, y0, x0 + self.w * image_w, y0 + self.h * image_h)

    @classmethod
    def from_pixels(cls, rect, image_w, image_h):
        x0, y0, x1, y1 = rect
        return cls(0, (x0 + x1) / 2 / image_w, (y0 + y1) / 2 / image_h, (x1 - x0) / image_w, (y1 - y0) / image_h)

    def validate(self):
        if self.class_id != 0:
            raise ValidationError(f"class_id must be 0 (single class), got {self.class_id}")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValidationError(f"box size out of range (0, 1]: w={self.w}, h={self.h}")
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise ValidationError(f"box center out of range [0, 1]: cx={self.cx}, cy={self.cy}")
        if (self.cx - self.w / 2 < -EDGE_TOL or self.cx + self.w / 2 > 1 + EDGE_TOL
                or self.cy - self.h / 2 < -EDGE_TOL or self.cy + self.h / 2 > 1 + EDGE_TOL):
            raise ValidationError(f"box extends outside the image: {self}")
        return self


# -- images --------------------------------------------------------------------

def _png_bit_depth(path):
    with open(path, "rb") as fh:
        head = fh.read(29)
    if head[:8] == b"\x89PNG\r\n\x1a\n" and head[12:16] == b"IHDR":
        return head[24], head[25]
    return None, None


def load_png_gray(path):
    """Read an 8-bit gray or RGB PNG as float32 ``(H, W, 1)`` in [0, 1]."""
    try:
        depth, color_type = _png_bit_depth(path)
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    if depth is not None and depth > 8:
        raise UnsupportedFormatError(f"{path}: {depth}-bit PNG is not supported (8-bit only)")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "P":
                img = img.convert("RGB")
                mode = "RGB"
            elif mode == "1":
                img = img.convert("L")
                mode = "L"
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if mode == "L":
        gray = arr.astype(np.float32)
    elif mode == "RGB":
        gray = arr.astype(np.float32).mean(axis=2)
    else:
        raise UnsupportedFormatError(f"{path}: image mode {mode!r} is not 8-bit gray or RGB")
    return (gray / 255.0)[..., None].astype(np.float32)


def to_uint8(pixels):
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_png_gray(path, pixels):
    Image.fromarray(to_uint8(pixels), mode="L").save(path, format="PNG")


# -- annotations ---------------------------------------------------------------

def parse_annotation(path, image_w, image_h):
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(f"expected 5 fields, got {len(parts)}", lineno)
            try:
                cls_id = int(parts[0])
                cx, cy, w, h = (float(v) for v in parts[1:])
            except ValueError as exc:
                raise ParseError(f"malformed number: {exc}", lineno) from exc
            try:
                boxes.append(BoxLabel(cls_id, cx, cy, w, h).validate())
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return boxes


def write_annotation(boxes, path):
    with open(path, "w") as fh:
        for b in boxes:
            b.validate()
            fh.write(f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")


def sidecar_path(image_path):
    return Path(image_path).with_suffix(".txt")


# -- manifests -----------------------------------------------------------------

@dataclass
class Manifest:
    root: Path
    entries: list  # image paths relative to root, posix style
    split: str = "all"
    image_size: int = 64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        self.entries = [str(PurePosixPath(e)) for e in self.entries]
        dupes = [k for k, n in Counter(self.entries).items() if n > 1]
        if dupes:
            raise ValidationError(f"duplicate manifest entries: {dupes[:3]}")

    def __len__(self):
        return len(self.entries)

    def image_path(self, entry):
        return self.root / entry

    def annotation_path(self, entry):
        return sidecar_path(self.root / entry)

    def label(self, entry):
        parts = PurePosixPath(entry).parts
        return parts[-2] if len(parts) > 1 else None

    def labels(self):
        return [self.label(e) for e in self.entries]

    def write(self, path):
        path = Path(path)
        lines = [MANIFEST_MAGIC, f"#split={self.split}", f"#image_size={self.image_size}"]
        lines += [f"#{k}={v}" for k, v in sorted(self.meta.items())]
        rel = os.path.relpath(self.root, path.parent)
        lines += [str(PurePosixPath(Path(rel)) / e) if rel != "." else e for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        if not lines or lines[0].strip() != MANIFEST_MAGIC:
            raise ParseError(f"{path}: missing '{MANIFEST_MAGIC}' header", 1)
        header, entries = {}, []
        for lineno, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition("=")
                if not sep:
                    raise ParseError(f"{path}: bad header line {line!r}", lineno)
                header[key.strip()] = value.strip()
            else:
                entries.append(line)
        split = header.pop("split", "all")
        size = int(header.pop("image_size", 64))
        return cls(path.parent, entries, split, size, header)

    def validate(self, load_images=True):
        """Fail fast: every file exists and (optionally) decodes at the declared size."""
        for e in self.entries:
            p = self.image_path(e)
            if not p.is_file():
                raise ConsistencyError(f"manifest entry missing on disk: {p}")
            if load_images:
                img = load_png_gray(p)
                if img.shape[:2] != (self.image_size, self.image_size):
                    raise ValidationError(f"{p}: size {img.shape[:2]} != manifest image_size {self.image_size}")
        return self

    def checksum(self):
        """SHA-256 over entry names, images and sidecars (in entry order)."""
        h = hashlib.sha256()
        h.update(f"{self.split}|{self.image_size}".encode())
        for e in self.entries:
            h.update(e.encode())
            h.update(self.image_path(e).read_bytes())
            ann = self.annotation_path(e)
            if ann.exists():
                h.update(ann.read_bytes())
        return h.hexdigest()


def load_classification(manifest, classes=("yes", "no")):
    """Images ``(N, H, W, 1)`` and integer labels (index into ``classes``)."""
    images, labels = [], []
    for e in manifest.entries:
        lab = manifest.label(e)
        if lab not in classes:
            raise ValidationError(f"{e}: label directory {lab!r} not in {classes}")
        images.append(load_png_gray(manifest.image_path(e)))
        labels.append(classes.index(lab))
    size = manifest.image_size
    arr = np.stack(images) if images else np.zeros((0, size, size, 1), np.float32)
    return arr, np.asarray(labels, dtype=np.int64)


def load_detection(manifest):
    """Images ``(N, H, W, 1)`` and per-image lists of pixel rectangles."""
    images, boxes = [], []
    for e in manifest.entries:
        img = load_png_gray(manifest.image_path(e))
        h, w = img.shape[:2]
        ann = manifest.annotation_path(e)
        if not ann.exists():
            raise ConsistencyError(f"missing annotation sidecar {ann}")
        images.append(img)
        boxes.append([b.to_pixels(w, h) for b in parse_annotation(ann, w, h)])
    size = manifest.image_size
    arr = np.stack(images) if images else np.zeros((0, size, size, 1), np.float32)
    return arr, boxes


def _allocate(n, fractions):
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


SPLIT_NAMES = ("train", "val", "test")


def split_dataset(manifest, fractions, seed, stratify=None):
    """Seeded shuffle split into len(fractions) disjoint manifests.

    Classification manifests (entries with label directories) are stratified
    per class unless ``stratify`` is False.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(manifest) == 0:
        raise InputError("cannot split an empty manifest")
    if not 2 <= len(fractions) <= 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InputError(f"split fractions must be 2-3 non-negative values summing to 1, got {fractions}")
    labels = manifest.labels()
    if stratify is None:
        stratify = len(set(labels)) > 1
    groups = {}
    for e, lab in zip(manifest.entries, labels):
        groups.setdefault(lab if stratify else None, []).append(e)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for key in sorted(groups, key=lambda k: (k is None, k or "")):
        members = sorted(groups[key])
        members = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for i, c in enumerate(_allocate(len(members), fractions)):
            parts[i].extend(members[start : start + c])
            start += c
    return tuple(
        replace(manifest, entries=sorted(p), split=SPLIT_NAMES[i], meta=dict(manifest.meta))
        for i, p in enumerate(parts)
    )


# -- statistics ----------------------------------------------------------------

@dataclass
class DatasetStats:
    n_images: int = 0
    class_counts: dict = field(default_factory=dict)
    n_boxes: int = 0
    box_histogram: dict = field(default_factory=dict)  # boxes per image -> image count
    mean_boxes_per_image: float = 0.0  # over images with at least one box
    min_boxes: int = 0
    max_boxes: int = 0

    def as_kv(self):
        kv = {
            "n_images": self.n_images,
            "n_boxes": self.n_boxes,
            "mean_boxes_per_image": f"{self.mean_boxes_per_image:.4f}",
            "min_boxes": self.min_boxes,
            "max_boxes": self.max_boxes,
        }
        for k, v in sorted(self.class_counts.items()):
            kv[f"class.{k}"] = v
        for k, v in sorted(self.box_histogram.items()):
            kv[f"hist.{k}"] = v
        return kv

    def kv_text(self):
        return "".join(f"{k}={v}\n" for k, v in self.as_kv().items())

    def summary(self):
        classes = ", ".join(f"{k}: {v}" for k, v in sorted(self.class_counts.items())) or "none"
        hist = "  ".join(f"{k}:{v}" for k, v in sorted(self.box_histogram.items())) or "none"
        return (
            f"images            {self.n_images}  ({classes})\n"
            f"bounding boxes    {self.n_boxes}\n"
            f"boxes per image   mean {self.mean_boxes_per_image:.2f}, "
            f"range {self.min_boxes}..{self.max_boxes} (positive images)\n"
            f"histogram         {hist}\n"
        )


def dataset_stats(manifest):
    stats = DatasetStats(n_images=len(manifest))
    counts = []
    size = manifest.image_size
    for e in manifest.entries:
        lab = manifest.label(e)
        stats.class_counts[lab] = stats.class_counts.get(lab, 0) + 1
        ann = manifest.annotation_path(e)
        if not ann.exists():
            raise ConsistencyError(f"missing annotation file {ann}")
        counts.append(len(parse_annotation(ann, size, size)))
    stats.n_boxes = sum(counts)
    stats.box_histogram = dict(sorted(Counter(counts).items()))
    positive = [c for c in counts if c > 0]
    if positive:
        stats.mean_boxes_per_image = sum(positive) / len(positive)
        stats.min_boxes, stats.max_boxes = min(positive), max(positive)
    return stats
