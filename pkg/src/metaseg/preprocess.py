"""Image preprocessing: CLAHE, shared geometric augmentation, resize, crop.

Training path: CLAHE, one random rot90/flip transform shared by every sample
of a batch, resize to 140x140 (bilinear for images, nearest for masks), then
a random 128x128 crop from the same offsets for all batch members.
Deployment path: CLAHE and a plain resize to 128x128, no randomness.
"""

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ShapeError
from .seeding import rng_from

RESIZE_HW = (140, 140)
CROP_HW = (128, 128)
DEPLOY_HW = (128, 128)
CLAHE_CLIP = 2.0
CLAHE_TILE = (8, 8)


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ShapeError(f"expected 2-D grayscale image, got shape {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ShapeError(f"image {img.shape} smaller than 8x8")
    return img


def clahe(image) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a [0,1] image."""
    img = _check_image(image)
    as8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    eq = cv2.createCLAHE(clipLimit=CLAHE_CLIP, tileGridSize=CLAHE_TILE).apply(as8)
    return eq.astype(np.float32) / 255.0


def resize_image(image, hw) -> np.ndarray:
    h, w = hw
    img = np.ascontiguousarray(image, dtype=np.float32)
    return cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask, hw) -> np.ndarray:
    # nearest keeps the value set intact for dense and weak masks alike
    h, w = hw
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    return cv2.resize(m, (w, h), interpolation=cv2.INTER_NEAREST)


@dataclass(frozen=True)
class GeomTransform:
    """One batch-shared geometric augmentation; fully determined by a seed."""

    rot90: int  # quarter turns
    flip_h: bool
    flip_v: bool
    crop_y: int
    crop_x: int

    @classmethod
    def draw(cls, rng_seed) -> "GeomTransform":
        rng = rng_from(rng_seed, "geom")
        max_y = RESIZE_HW[0] - CROP_HW[0]
        max_x = RESIZE_HW[1] - CROP_HW[1]
        return cls(
            rot90=int(rng.integers(4)),
            flip_h=bool(rng.integers(2)),
            flip_v=bool(rng.integers(2)),
            crop_y=int(rng.integers(max_y + 1)),
            crop_x=int(rng.integers(max_x + 1)),
        )

    def apply(self, image, mask):
        """Rotate/flip image and mask together, resize, crop to 128x128."""
        img = np.asarray(image, dtype=np.float32)
        m = np.asarray(mask, dtype=np.uint8)
        if img.shape != m.shape:
            raise ShapeError(f"image {img.shape} vs mask {m.shape}")
        if self.rot90 % 4:
            img = np.rot90(img, self.rot90)
            m = np.rot90(m, self.rot90)
        if self.flip_h:
            img, m = img[:, ::-1], m[:, ::-1]
        if self.flip_v:
            img, m = img[::-1, :], m[::-1, :]
        img = resize_image(img, RESIZE_HW)
        m = resize_mask(m, RESIZE_HW)
        ch, cw = CROP_HW
        y, x = self.crop_y, self.crop_x
        return img[y : y + ch, x : x + cw], m[y : y + ch, x : x + cw]


def preprocess_train(image, mask, rng_seed):
    """CLAHE + seeded geometric transform; same seed, same transform."""
    img = clahe(image)
    m = np.asarray(mask, dtype=np.uint8)
    return GeomTransform.draw(rng_seed).apply(img, m)


def preprocess_deploy(image) -> np.ndarray:
    """CLAHE + deterministic resize to 128x128."""
    return resize_image(clahe(image), DEPLOY_HW)
