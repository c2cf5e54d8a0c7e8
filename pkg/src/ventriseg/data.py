"""Image/label preprocessing and augmentation.

Structures are stored in a fixed channel order: LV endocardium, LV
epicardium, RV endocardium. Masks are ``uint8`` arrays holding 0/1; images
are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .tensor import Rng, percentile

STRUCTURES = ("lv_endo", "lv_epi", "rv_endo")
PHASES = ("ED", "ES")


@dataclass
class LabeledSlice:
    image: np.ndarray                 # (1, 1, H, W) float64
    masks: np.ndarray                 # (1, 3, H, W) uint8, zero where not annotated
    presence: np.ndarray              # (3,) bool
    pixel_spacing_mm: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.presence = np.asarray(self.presence, dtype=bool)
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 1):
            raise ValueError(f"image must be (1, 1, H, W), got {self.image.shape}")
        if self.masks.shape != (1, 3) + self.image.shape[2:]:
            raise ValueError(f"masks {self.masks.shape} do not match image {self.image.shape}")


def stack_slices(slices):
    """Batch a sequence of slices into ``(images, masks, presence)`` arrays."""
    images = np.concatenate([s.image for s in slices], axis=0)
    masks = np.concatenate([s.masks for s in slices], axis=0)
    presence = np.stack([s.presence for s in slices], axis=0)
    return images, masks, presence


def normalize_percentile(images, low=1.0, high=99.0):
    """Affinely map the batch's 1st/99th pooled percentiles to -0.5/+0.5.

    Values beyond the percentiles are left unclipped.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.size == 0:
        raise ValueError("empty sample")
    p_lo = percentile(images, low)
    p_hi = percentile(images, high)
    if not p_hi > p_lo:
        raise ValueError("degenerate intensity range")
    return (images - p_lo) / (p_hi - p_lo) - 0.5


def _nearest(masks, rows, cols):
    """Sample every channel of ``(1, C, H, W)`` masks at rounded coordinates; outside -> 0."""
    H, W = masks.shape[2:]
    r = np.floor(rows + 0.5).astype(np.int64)
    c = np.floor(cols + 0.5).astype(np.int64)
    inside = (r >= 0) & (r < H) & (c >= 0) & (c < W)
    out = np.zeros(masks.shape[:2] + rows.shape, dtype=masks.dtype)
    out[:, :, inside] = masks[:, :, r[inside], c[inside]]
    return out


def _bilinear(image, rows, cols, cval):
    coords = np.stack([rows.ravel(), cols.ravel()])
    out = ndimage.map_coordinates(image[0, 0], coords, order=1, mode="constant", cval=cval)
    return out.reshape((1, 1) + rows.shape)


def crop_resize(sl: LabeledSlice, crop_fraction, out_size) -> LabeledSlice:
    """Central square crop of side ``crop_fraction * min(H, W)`` resized to ``out_size``.

    Image: bilinear. Masks: nearest, so they stay binary. Pixel spacing is
    scaled by ``crop side / out_size``.
    """
    if not 0.0 < crop_fraction <= 1.0:
        raise ValueError(f"crop_fraction must lie in (0, 1], got {crop_fraction}")
    H, W = sl.image.shape[2:]
    side = crop_fraction * min(H, W)
    if side < 2:
        raise ValueError(f"crop of {side:.3g} px is smaller than 2 px")
    step = side / out_size
    centers = (np.arange(out_size) + 0.5) * step - 0.5
    rows, cols = np.meshgrid((H - side) / 2 + centers, (W - side) / 2 + centers, indexing="ij")
    image = _bilinear(sl.image, rows, cols, cval=float(sl.image.min()))
    masks = _nearest(sl.masks, rows, cols)
    spacing = tuple(float(s) * step for s in sl.pixel_spacing_mm)
    return replace(sl, image=image, masks=masks, pixel_spacing_mm=spacing)


@dataclass
class AugmentParams:
    """Maximum magnitudes of the random transform components."""

    flip_prob: float = 0.5
    shear: float = 0.1            # radians
    shift: float = 0.05           # fraction of the image side
    zoom: float = 0.1             # zoom factor drawn from [1 - zoom, 1 + zoom]
    rotation: float = 0.2         # radians

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        for name in ("shear", "shift", "zoom", "rotation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.zoom >= 1.0:
            raise ValueError("zoom must be < 1")


@dataclass
class AffineSample:
    flip: bool = False
    shear: float = 0.0
    rotation: float = 0.0
    zoom: float = 1.0
    shift: tuple = field(default=(0.0, 0.0))   # (rows, cols) in pixels

    def matrix(self):
        """Forward 2x2 map on centred ``(x, y)``: shear, then rotate, then zoom."""
        shear = np.array([[1.0, np.tan(self.shear)], [0.0, 1.0]])
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return self.zoom * rot @ shear


def sample_transform(params: AugmentParams, rng: Rng, size) -> AffineSample:
    H, W = size
    u = rng.uniform(-1.0, 1.0, 5)
    flip = bool(rng.random() < params.flip_prob)
    return AffineSample(flip=flip, shear=params.shear * u[0], rotation=params.rotation * u[1],
                        zoom=1.0 + params.zoom * u[2],
                        shift=(params.shift * H * u[3], params.shift * W * u[4]))


def apply_transform(sl: LabeledSlice, t: AffineSample, cval=None) -> LabeledSlice:
    """Resample ``sl`` through the affine ``t``; presence flags are untouched."""
    H, W = sl.image.shape[2:]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                             indexing="ij")
    # invert: output pixel -> source pixel
    x = cols - cx - t.shift[1]
    y = rows - cy - t.shift[0]
    inv = np.linalg.inv(t.matrix())
    sx = inv[0, 0] * x + inv[0, 1] * y
    sy = inv[1, 0] * x + inv[1, 1] * y
    if t.flip:
        sx = -sx
    src_cols = sx + cx
    src_rows = sy + cy
    if cval is None:
        cval = float(sl.image.min())
    image = _bilinear(sl.image, src_rows, src_cols, cval)
    masks = _nearest(sl.masks, src_rows, src_cols)
    return replace(sl, image=image, masks=masks)


def augment(sl: LabeledSlice, params: AugmentParams, rng: Rng, cval=None) -> LabeledSlice:
    """Random flip/shear/rotate/zoom/shift applied identically to image and masks."""
    return apply_transform(sl, sample_transform(params, rng, sl.image.shape[2:]), cval=cval)
