"""Training-time augmentation: random affine warps and horizontal flips.

Affine matrices are 2x3 forward maps from input to output pixel-index
coordinates ``(x=column, y=row)``.  Warping inverse-maps every output pixel
and samples the input bilinearly, replicating edge pixels outside the image.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class AugmentConfig:
    rotation_deg_max: float = 10.0
    shift_frac: float = 0.05
    zoom_frac: float = 0.30
    shear_frac: float = 0.20
    hflip_prob: float = 0.5
    fill_mode: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_deg_max", "shift_frac", "zoom_frac", "shear_frac"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.zoom_frac >= 1:
            raise ConfigError("zoom_frac must be < 1")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob must be in [0, 1]")
        if self.fill_mode != "nearest":
            raise ConfigError(f"unsupported fill mode {self.fill_mode!r}")

    @classmethod
    def disabled(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _translate(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def compose_affine(height, width, angle_deg=0.0, shear=0.0, zoom=1.0, shift=(0.0, 0.0)):
    """center -> rotate -> shear (along x) -> zoom -> shift, about the image center."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    sh = np.array([[1.0, shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    zm = np.diag([zoom, zoom, 1.0])
    m = _translate(cx + shift[0], cy + shift[1]) @ zm @ sh @ rot @ _translate(-cx, -cy)
    return m[:2]


def sample_affine(config, rng, height, width):
    """Draw one random warp; returns ``(matrix 2x3, flip)``.

    Draw order is fixed (angle, shear, zoom, shift x, shift y, flip) so a
    seeded generator always yields the same sequence.
    """
    angle = rng.uniform(-config.rotation_deg_max, config.rotation_deg_max)
    shear = rng.uniform(-config.shear_frac, config.shear_frac)
    zoom = rng.uniform(1.0 - config.zoom_frac, 1.0 + config.zoom_frac)
    tx = rng.uniform(-config.shift_frac, config.shift_frac) * width
    ty = rng.uniform(-config.shift_frac, config.shift_frac) * height
    flip = bool(rng.random() < config.hflip_prob)
    return compose_affine(height, width, angle, shear, zoom, (tx, ty)), flip


def hflip_matrix(width):
    return np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0]])


def _bilinear(img, xs, ys):
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(img.dtype)
    fy = (ys - y0).astype(img.dtype)
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bot - top)


def apply_affine(image, matrix, fill_mode="nearest"):
    """Warp a grayscale ``(H, W)`` or ``(H, W, 1)`` image by a forward affine map."""
    if fill_mode != "nearest":
        raise ConfigError(f"unsupported fill mode {fill_mode!r}")
    img = np.asarray(image)
    squeeze = img.ndim == 3
    if squeeze:
        if img.shape[2] != 1:
            raise InputError(f"expected a single-channel image, got shape {img.shape}")
        img = img[..., 0]
    m = np.asarray(matrix, dtype=np.float64)
    lin = m[:, :2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise InputError("affine matrix is singular")
    inv = np.linalg.inv(lin)
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - m[0, 2], ys - m[1, 2]
    src_x = inv[0, 0] * dx + inv[0, 1] * dy
    src_y = inv[1, 0] * dx + inv[1, 1] * dy
    out = _bilinear(img, src_x, src_y)
    out = np.clip(out, img.min(), img.max()).astype(img.dtype)
    return out[..., None] if squeeze else out


def hflip(image):
    return np.ascontiguousarray(np.asarray(image)[:, ::-1])


def augment_image(image, config, rng):
    """Random warp plus optional horizontal flip for one training image."""
    h, w = image.shape[:2]
    matrix, flip = sample_affine(config, rng, h, w)
    out = image
    if not np.array_equal(matrix, np.eye(2, 3)):
        out = apply_affine(out, matrix, config.fill_mode)
    return hflip(out) if flip else out


def flip_boxes(boxes, image_width):
    """Mirror pixel rectangles ``(x_min, y_min, x_max, y_max)`` across the vertical axis."""
    out = []
    for b in boxes:
        x0, y0, x1, y1 = b
        if x0 < 0 or x1 > image_width or x1 <= x0 or y1 <= y0:
            raise InputError(f"box {tuple(b)} is outside an image of width {image_width}")
        out.append((image_width - x1, y0, image_width - x0, y1))
    return out


def resize_bilinear(image, out_h, out_w):
    """Half-pixel-centred bilinear resize of a ``(H, W, 1)`` image."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    out = _bilinear(img[..., 0] if img.ndim == 3 else img, gx, gy)
    return out[..., None] if img.ndim == 3 else out
