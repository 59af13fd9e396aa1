"""Image/mask loading, resizing, and paired augmentation.

Images are float32 H×W×3 RGB arrays in [0, 1]; masks are uint8 H×W arrays
in {0, 1}. Loading resamples images bilinearly and raw label masks with
nearest-neighbor. Inside augmentation, masks follow the image's bilinear
grid and are rebinarized at 0.5 on exit, which makes a mask pushed through
the image path land exactly on the transformed mask. Every augmentation
draws its randomness from a generator derived from ``(config.seed,
sample_index, epoch)``, so results do not depend on loader parallelism or
call order.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import CropLargerThanImage, DimensionMismatch, UnreadableImage

ALL_AUGMENTATIONS = ("center_crop", "random_crop", "hflip", "vflip",
                     "scale", "cutout", "grayscale")

# Applied order: geometric size-changing ops first, then flips, then the
# restore-resize, then cutout/grayscale so their effect survives unresampled.
_APPLY_ORDER = ("center_crop", "random_crop", "scale", "hflip", "vflip",
                "cutout", "grayscale")

_augment_calls = 0


@dataclass
class AugmentationConfig:
    enabled: tuple = ALL_AUGMENTATIONS
    probability: float = 0.5
    crop_fraction_range: tuple = (0.7, 1.0)
    scale_range: tuple = (0.75, 1.25)
    cutout_size_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1]: {self.probability}")
        for name, (lo, hi) in (("crop_fraction_range", self.crop_fraction_range),
                               ("scale_range", self.scale_range)):
            if not (0.0 < lo <= hi <= 1.5):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1.5: {(lo, hi)}")
        unknown = set(self.enabled) - set(ALL_AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations: {sorted(unknown)}")


def imread_rgb(path):
    """Decode an 8-bit image file to float32 RGB in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise UnreadableImage(f"cannot decode image: {path}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return rgb.astype(np.float32) / 255.0


def imread_mask(path):
    """Decode a single-channel mask file to its raw integer labels."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise UnreadableImage(f"cannot decode mask: {path}")
    return raw


def binarize_mask(raw_mask):
    """Map instance labels to a binary mask: 1 wherever the label is nonzero."""
    return (np.asarray(raw_mask) > 0).astype(np.uint8)


def resize_image(image, target_size):
    """Bilinear resize to ``(width, height)``; no-op when already that size."""
    width, height = target_size
    if image.shape[1] == width and image.shape[0] == height:
        return image
    return cv2.resize(image, (width, height), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask, target_size):
    """Nearest-neighbor resize to ``(width, height)``; preserves binarity."""
    width, height = target_size
    if mask.shape[1] == width and mask.shape[0] == height:
        return mask
    return cv2.resize(mask, (width, height), interpolation=cv2.INTER_NEAREST)


def resize_binary_mask(mask, target_size):
    """Resize a {0,1} mask on the image's bilinear grid, rebinarized at 0.5.

    Augmentation resizes masks this way so that a mask fed through the image
    path (bilinear) and thresholded matches the mask path exactly.
    """
    width, height = target_size
    if mask.shape[1] == width and mask.shape[0] == height:
        return mask
    resized = cv2.resize(mask.astype(np.float32), (width, height),
                         interpolation=cv2.INTER_LINEAR)
    return (resized > 0.5).astype(np.uint8)


def load_sample(record, target_size=(512, 256)):
    """Load one record and resize it to ``(width, height)``.

    The image is scaled to [0, 1] and resized bilinearly; the mask is
    binarized (any nonzero label means instrument) and resized with
    nearest-neighbor interpolation.
    """
    width, height = target_size
    if width <= 0 or height <= 0 or width % 32 or height % 32:
        raise ValueError(f"target size must be positive and divisible by 32: {target_size}")
    image = imread_rgb(record.image_path)
    raw_mask = imread_mask(record.mask_path)
    if image.shape[:2] != raw_mask.shape[:2]:
        raise DimensionMismatch(
            f"image {image.shape[:2]} vs mask {raw_mask.shape[:2]} for {record.image_path}")
    image = resize_image(image, target_size)
    mask = resize_mask(binarize_mask(raw_mask), target_size)
    return image, mask


def sample_rng(seed, sample_index, epoch):
    """Generator keyed by (seed, sample, epoch), independent of call order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=seed, spawn_key=(sample_index, epoch))))


def crop_window(image, mask, top, left, crop_h, crop_w):
    """Cut the same window from image and mask."""
    if crop_h > image.shape[0] or crop_w > image.shape[1]:
        raise CropLargerThanImage(
            f"crop {crop_h}x{crop_w} exceeds image {image.shape[0]}x{image.shape[1]}")
    return (image[top:top + crop_h, left:left + crop_w],
            mask[top:top + crop_h, left:left + crop_w])


def center_crop(image, mask, fraction):
    h, w = mask.shape
    crop_h, crop_w = max(1, round(h * fraction)), max(1, round(w * fraction))
    top, left = (h - crop_h) // 2, (w - crop_w) // 2
    return crop_window(image, mask, top, left, crop_h, crop_w)


def random_crop(image, mask, fraction, rng):
    h, w = mask.shape
    crop_h, crop_w = max(1, round(h * fraction)), max(1, round(w * fraction))
    if crop_h > h or crop_w > w:
        raise CropLargerThanImage(
            f"crop {crop_h}x{crop_w} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - crop_h + 1))
    left = int(rng.integers(0, w - crop_w + 1))
    return crop_window(image, mask, top, left, crop_h, crop_w)


def scale_pair(image, mask, factor):
    h, w = mask.shape
    new = (max(1, round(w * factor)), max(1, round(h * factor)))
    return resize_image(image, new), resize_binary_mask(mask, new)


def cutout(image, mask, size_fraction, rng):
    """Zero a random rectangle in the image and clear the same mask region."""
    h, w = mask.shape
    cut_h, cut_w = max(1, round(h * size_fraction)), max(1, round(w * size_fraction))
    top = int(rng.integers(0, h - cut_h + 1))
    left = int(rng.integers(0, w - cut_w + 1))
    image = image.copy()
    mask = mask.copy()
    image[top:top + cut_h, left:left + cut_w] = 0.0
    mask[top:top + cut_h, left:left + cut_w] = 0
    return image, mask


def to_grayscale(image):
    """Replace RGB with its BT.601 luma replicated across the 3 channels."""
    luma = image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)
    return np.repeat(luma[..., None], 3, axis=2)


def augment(image, mask, config, sample_index=0, epoch=0):
    """Apply the configured augmentation suite to one image/mask pair.

    Geometric ops (crops, scale, flips) use identical parameters for image
    and mask; grayscale touches the image only; cutout clears the same
    rectangle in both. The output is resized back to the input extent, so
    shapes are stable across the pipeline. Fully deterministic given
    ``(config.seed, sample_index, epoch)``.
    """
    global _augment_calls
    _augment_calls += 1
    if image.shape[:2] != mask.shape[:2]:
        raise DimensionMismatch(f"image {image.shape[:2]} vs mask {mask.shape[:2]}")

    rng = sample_rng(config.seed, sample_index, epoch)
    target = (mask.shape[1], mask.shape[0])
    # The mask rides through resampling as float on the image's bilinear
    # grid and is binarized once at the end; an inner threshold would break
    # the exact mask-as-image consistency of chained resizes.
    mask_f = mask.astype(np.float32)
    # One decision draw per op, whether enabled or not, so adding an op to
    # the enabled set does not reshuffle the randomness of the others.
    for op in _APPLY_ORDER:
        fire = rng.random() < config.probability
        if op not in config.enabled or not fire:
            continue
        if op == "center_crop":
            fraction = rng.uniform(*config.crop_fraction_range)
            image, mask_f = center_crop(image, mask_f, fraction)
        elif op == "random_crop":
            fraction = rng.uniform(*config.crop_fraction_range)
            image, mask_f = random_crop(image, mask_f, fraction, rng)
        elif op == "scale":
            factor = rng.uniform(*config.scale_range)
            h, w = mask_f.shape
            new = (max(1, round(w * factor)), max(1, round(h * factor)))
            image, mask_f = resize_image(image, new), resize_image(mask_f, new)
        elif op == "hflip":
            image, mask_f = image[:, ::-1].copy(), mask_f[:, ::-1].copy()
        elif op == "vflip":
            image, mask_f = image[::-1].copy(), mask_f[::-1].copy()
        elif op == "cutout":
            if mask_f.shape != (target[1], target[0]):
                image = resize_image(image, target)
                mask_f = resize_image(mask_f, target)
            image, mask_f = cutout(image, mask_f, config.cutout_size_fraction, rng)
        elif op == "grayscale":
            image = to_grayscale(image)
    if mask_f.shape != (target[1], target[0]):
        image = resize_image(image, target)
        mask_f = resize_image(mask_f, target)
    mask = (mask_f > 0.5).astype(np.uint8)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment_call_count():
    """Number of augment() invocations since the last reset (leak detector)."""
    return _augment_calls


def reset_augment_call_count():
    global _augment_calls
    _augment_calls = 0
