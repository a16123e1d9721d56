"""Synthetic CTPA-like phantoms: bright vessel ridges with dark filling defects.

Every image is a pure function of ``(seed, index, kind)``: smoothed
low-intensity background, gaussian-profile vessels along random polylines,
and (for positive images) dark ellipses centered on a vessel ridge.  Boxes
are the tight pixel bounds of each rasterized ellipse.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import BoxLabel, Manifest, dataset_stats, save_png_gray, write_annotation
from .errors import ConfigError, GenerationError

POSITIVE, NEGATIVE, PRETEXT = 1, 0, 2
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass
class PhantomConfig:
    image_size: int = 64
    n_positive: int = 250
    n_negative: int = 250
    lesions_per_image: tuple = (1, 8)
    lesion_count_mean: float = 2.16
    lesion_diameter_frac: tuple = (0.04, 0.15)
    lesion_aspect: tuple = (0.4, 0.7)  # minor/major, major axis along the vessel
    lesion_level: tuple = (0.0, 0.08)  # absolute interior intensity
    vessel_count: tuple = (2, 5)
    pretext_vessel_count: tuple = (1, 6)
    pretext_lesion_prob: float = 0.0
    vessel_width_frac: tuple = (0.04, 0.06)  # gaussian sigma / image size
    vessel_intensity: tuple = (0.5, 0.6)
    background_level: tuple = (0.25, 0.4)
    distractor_count: tuple = (0, 3)  # dark off-vessel blobs in every image (airway-like)
    noise_amplitude: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lesions_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"lesions_per_image must satisfy 1 <= min <= max, got {self.lesions_per_image}")
        if not lo <= self.lesion_count_mean <= hi:
            raise ConfigError("lesion_count_mean must lie inside lesions_per_image")
        dlo, dhi = self.lesion_diameter_frac
        if not 0 < dlo <= dhi < 1:
            raise ConfigError(f"lesion diameter fractions must be in (0, 1), got {self.lesion_diameter_frac}")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        for name in ("vessel_count", "pretext_vessel_count"):
            vlo, vhi = getattr(self, name)
            if vlo < 1 or vhi < vlo:
                raise ConfigError(f"{name} must satisfy 1 <= min <= max")
        llo, lhi = self.lesion_level
        if not 0 <= llo <= lhi < self.background_level[0]:
            raise ConfigError("lesion_level must lie in [0, background_level min)")
        if self.distractor_count[0] < 0 or self.distractor_count[1] < self.distractor_count[0]:
            raise ConfigError("distractor_count must satisfy 0 <= min <= max")
        if self.noise_amplitude < 0:
            raise ConfigError("noise_amplitude must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class PhantomImage:
    pixels: np.ndarray  # (H, W, 1) float32 in [0, 1]
    boxes: list  # pixel rectangles (x_min, y_min, x_max, y_max), integer-valued
    class_label: str  # "yes" / "no"
    vessel_count: int = 0
    lesion_masks: list = field(default_factory=list, repr=False)
    vessel_map: np.ndarray = field(default=None, repr=False)  # ridge intensity above background

    @property
    def vessel_bucket(self):
        """Pretext class: vessel count 1-2 -> 0, 3-4 -> 1, 5-6 -> 2."""
        return min((self.vessel_count - 1) // 2, 2)


def _polyline(rng, size):
    """Smooth random walk through an interior point, extended both ways."""
    start = rng.uniform(0.2 * size, 0.8 * size, 2)
    heading = rng.uniform(0, 2 * math.pi)
    step = size / 10.0
    pts = [start]
    for direction in (0.0, math.pi):
        p, h = start.copy(), heading + direction
        branch = []
        for _ in range(7):
            h += rng.normal(0, 0.3)
            p = p + step * np.array([math.cos(h), math.sin(h)])
            branch.append(p)
        if direction == 0.0:
            pts = pts + branch
        else:
            pts = branch[::-1] + pts
    return np.array(pts)


def _segment_distance(px, py, pts):
    """Distance from every pixel center to the nearest polyline segment."""
    a, b = pts[:-1], pts[1:]
    d = b - a
    len2 = np.maximum((d**2).sum(axis=1), 1e-12)
    qx = px[..., None] - a[:, 0]
    qy = py[..., None] - a[:, 1]
    t = np.clip((qx * d[:, 0] + qy * d[:, 1]) / len2, 0.0, 1.0)
    ex = qx - t * d[:, 0]
    ey = qy - t * d[:, 1]
    return np.sqrt((ex**2 + ey**2).min(axis=-1))


def _lesion_count(rng, cfg):
    lo, hi = cfg.lesions_per_image
    while True:
        k = lo + int(rng.poisson(cfg.lesion_count_mean - lo))
        if k <= hi:
            return k


def _ellipse_mask(size, cx, cy, a, b, theta):
    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _overlaps(box, boxes, margin=1):
    x0, y0, x1, y1 = box
    for b in boxes:
        if x0 - margin < b[2] and b[0] < x1 + margin and y0 - margin < b[3] and b[1] < y1 + margin:
            return True
    return False


def _add_distractors(img, ridge, boxes, rng, cfg):
    """Dark blobs away from every vessel; never labelled."""
    size = cfg.image_size
    dlo, dhi = cfg.lesion_diameter_frac
    off_vessel = ridge < 0.05
    for _ in range(int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))):
        for _attempt in range(20):
            cx, cy = rng.uniform(0, size, 2)
            a = rng.uniform(dlo, dhi) * size / 2.0
            b = a * rng.uniform(0.6, 1.0)
            mask = _ellipse_mask(size, cx, cy, a, b, rng.uniform(0, math.pi))
            if mask.any() and off_vessel[mask].all():
                img[mask] = rng.uniform(*cfg.lesion_level)
                break


def _rng(cfg, index, kind):
    return np.random.default_rng([cfg.seed, index, kind])


def generate_image(config, index, positive=True, kind=None):
    """Render phantom ``index``; ``positive`` selects the Yes/No class."""
    kind = kind if kind is not None else (POSITIVE if positive else NEGATIVE)
    rng = _rng(config, index, kind)
    size = config.image_size
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = xs + 0.5, ys + 0.5

    lo_bg, hi_bg = config.background_level
    bg = gaussian_filter(rng.random((size, size)), sigma=size / 10.0, mode="reflect")
    bg = (bg - bg.min()) / max(bg.max() - bg.min(), 1e-12)
    bg = lo_bg + (hi_bg - lo_bg) * bg

    vlo, vhi = config.pretext_vessel_count if kind == PRETEXT else config.vessel_count
    n_vessels = int(rng.integers(vlo, vhi + 1))
    ridge = np.zeros((size, size))
    vessels = []
    for _ in range(n_vessels):
        pts = _polyline(rng, size)
        sigma = rng.uniform(*config.vessel_width_frac) * size
        amp = rng.uniform(*config.vessel_intensity)
        d = _segment_distance(px, py, pts)
        ridge = np.maximum(ridge, amp * np.exp(-(d**2) / (2 * sigma**2)))
        vessels.append((pts, sigma, amp))
    img = np.minimum(bg + ridge, 1.0)

    boxes, masks = [], []
    has_lesions = kind == POSITIVE or (kind == PRETEXT and rng.random() < config.pretext_lesion_prob)
    if has_lesions:
        dlo, dhi = config.lesion_diameter_frac
        for _ in range(_lesion_count(rng, config)):
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                pts, _, _ = vessels[int(rng.integers(len(vessels)))]
                seg = int(rng.integers(len(pts) - 1))
                t = rng.random()
                cx, cy = pts[seg] + t * (pts[seg + 1] - pts[seg])
                theta = math.atan2(*(pts[seg + 1] - pts[seg])[::-1])
                a = rng.uniform(dlo, dhi) * size / 2.0
                b = a * rng.uniform(*config.lesion_aspect)
                if not (a + 1 <= cx <= size - a - 1 and a + 1 <= cy <= size - a - 1):
                    continue
                mask = _ellipse_mask(size, cx, cy, a, b, theta)
                rows, cols = np.nonzero(mask)
                if rows.size == 0:
                    continue
                box = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
                if box[2] - box[0] < 2 or box[3] - box[1] < 2 or _overlaps(box, boxes):
                    continue
                img[mask] = rng.uniform(*config.lesion_level)
                boxes.append(box)
                masks.append(mask)
                break
            else:
                raise GenerationError(
                    f"could not place lesion {len(boxes) + 1} on a vessel after "
                    f"{MAX_PLACEMENT_ATTEMPTS} attempts (seed={config.seed}, index={index})"
                )

    _add_distractors(img, ridge, boxes, rng, config)
    img = img + config.noise_amplitude * rng.normal(size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    label = "yes" if boxes else "no"
    return PhantomImage(img[..., None], boxes, label, n_vessels, masks, ridge)


def generate_pretext_image(config, index):
    return generate_image(config, index, kind=PRETEXT)


# -- datasets on disk ----------------------------------------------------------

def _render_job(job):
    config, index, kind = job
    ph = generate_image(config, index, kind=kind)
    return ph.pixels, ph.boxes, ph.vessel_bucket


def render_many(config, jobs, workers=1):
    """Render ``(index, kind)`` jobs in order; identical output for any worker count."""
    payload = [(config, i, k) for i, k in jobs]
    if workers <= 1 or len(payload) < 2:
        return [_render_job(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_render_job, payload, chunksize=8))


def _write_item(out_dir, rel, pixels, boxes):
    path = out_dir / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png_gray(path, pixels)
    size = pixels.shape[0]
    write_annotation([BoxLabel.from_pixels(b, size, size) for b in boxes], path.with_suffix(".txt"))


def _write_stats(manifest, out_dir):
    stats = dataset_stats(manifest)
    (out_dir / "stats.txt").write_text(stats.summary())
    (out_dir / "stats.kv").write_text(stats.kv_text())
    return stats


def generate_dataset(config, n_positive, n_negative, out_dir, workers=1):
    """Write a yes/ + no/ dataset with sidecars, manifest and stats; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, POSITIVE) for i in range(n_positive)] + [(i, NEGATIVE) for i in range(n_negative)]
    results = render_many(config, jobs, workers)
    entries = []
    for (i, kind), (pixels, boxes, _) in zip(jobs, results):
        rel = f"yes/pe_{i:05d}.png" if kind == POSITIVE else f"no/neg_{i:05d}.png"
        _write_item(out_dir, rel, pixels, boxes)
        entries.append(rel)
    manifest = Manifest(out_dir, entries, "all", config.image_size)
    manifest.write(out_dir / "manifest.txt")
    _write_stats(manifest, out_dir)
    return manifest


def generate_pretext_dataset(config, n_images, out_dir, workers=1):
    """Vessel-count bucket dataset (bucket0/ bucket1/ bucket2/) for backbone pretraining."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, PRETEXT) for i in range(n_images)]
    entries = []
    for (i, _), (pixels, boxes, bucket) in zip(jobs, render_many(config, jobs, workers)):
        rel = f"bucket{bucket}/px_{i:05d}.png"
        _write_item(out_dir, rel, pixels, boxes)
        entries.append(rel)
    manifest = Manifest(out_dir, entries, "all", config.image_size)
    manifest.write(out_dir / "manifest.txt")
    return manifest


def pretext_arrays(config, n_images, workers=1):
    """In-memory pretext images ``(N, H, W, 1)`` and bucket labels."""
    res = render_many(config, [(i, PRETEXT) for i in range(n_images)], workers)
    return np.stack([r[0] for r in res]), np.array([r[2] for r in res], dtype=np.int64)
