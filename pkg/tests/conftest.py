import os

import cv2
import numpy as np
import pytest
import torch
from torch import nn

from lapseg.data import scan_dataset


def make_frame(rng, width, height, labels=(37, 91)):
    """One synthetic laparoscopy-like frame: dark tissue, bright tool blob.

    The mask uses raw instance labels so binarization is exercised.
    """
    image = rng.uniform(0.05, 0.3, size=(height, width, 3)).astype(np.float32)
    mask = np.zeros((height, width), np.uint8)
    yy, xx = np.ogrid[:height, :width]
    for label in labels:
        cy = int(rng.integers(height // 4, 3 * height // 4))
        cx = int(rng.integers(width // 4, 3 * width // 4))
        ry = int(rng.integers(height // 8, height // 4))
        rx = int(rng.integers(width // 8, width // 4))
        blob = ((yy - cy) / max(ry, 1)) ** 2 + ((xx - cx) / max(rx, 1)) ** 2 <= 1.0
        mask[blob] = label
        image[blob] = rng.uniform(0.75, 1.0, size=(int(blob.sum()), 3))
    return (image * 255).round().astype(np.uint8), mask


def write_dataset(root, frames_per_procedure, width=96, height=64, seed=7):
    """Write a paired_dirs tree with prokto/rectum procedure sub-folders."""
    rng = np.random.default_rng(seed)
    for procedure, count in frames_per_procedure.items():
        os.makedirs(os.path.join(root, "images", procedure), exist_ok=True)
        os.makedirs(os.path.join(root, "masks", procedure), exist_ok=True)
        for i in range(count):
            image, mask = make_frame(rng, width, height)
            bgr = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
            cv2.imwrite(os.path.join(root, "images", procedure, f"frame_{i:03d}.png"), bgr)
            cv2.imwrite(os.path.join(root, "masks", procedure, f"frame_{i:03d}.png"), mask)


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    write_dataset(str(root), {"prokto": 6, "rectum": 6})
    return str(root)


@pytest.fixture(scope="session")
def manifest(dataset_root):
    return scan_dataset(dataset_root, layout="paired_dirs")


@pytest.fixture(scope="session")
def overfit_root(tmp_path_factory):
    """Eight 64x64 single-blob frames, easy to memorize."""
    root = tmp_path_factory.mktemp("overfit")
    rng = np.random.default_rng(0)
    os.makedirs(os.path.join(root, "images"))
    os.makedirs(os.path.join(root, "masks"))
    yy, xx = np.ogrid[:64, :64]
    for i in range(8):
        image = rng.uniform(0.0, 0.25, size=(64, 64, 3)).astype(np.float32)
        mask = np.zeros((64, 64), np.uint8)
        cy, cx = rng.integers(20, 44, 2)
        ry, rx = rng.integers(12, 24, 2)
        blob = ((yy - cy) / max(int(ry), 1)) ** 2 + ((xx - cx) / max(int(rx), 1)) ** 2 <= 1.0
        mask[blob] = 255
        image[blob] = rng.uniform(0.8, 1.0, size=(int(blob.sum()), 3))
        bgr = cv2.cvtColor((image * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
        cv2.imwrite(os.path.join(root, "images", f"blob_{i}.png"), bgr)
        cv2.imwrite(os.path.join(root, "masks", f"blob_{i}.png"), mask)
    return str(root)


@pytest.fixture(scope="session")
def overfit_manifest(overfit_root):
    return scan_dataset(overfit_root, layout="paired_dirs")


@pytest.fixture(scope="session")
def selfmask_root(tmp_path_factory):
    """Frames whose image pixels equal the mask, for oracle-stub validation."""
    root = tmp_path_factory.mktemp("selfmask")
    rng = np.random.default_rng(3)
    os.makedirs(os.path.join(root, "images"))
    os.makedirs(os.path.join(root, "masks"))
    for i in range(4):
        mask = (rng.random((64, 64)) < 0.3).astype(np.uint8)
        image = np.repeat(mask[:, :, None] * 255, 3, axis=2)
        cv2.imwrite(os.path.join(root, "images", f"f{i}.png"), image)
        cv2.imwrite(os.path.join(root, "masks", f"f{i}.png"), mask * 255)
    return str(root)


class StubModel(nn.Module):
    """Fixed-function 'model' turning its input into probabilities.

    ``mode='first_channel'`` emits the first input channel (an oracle on
    image-equals-mask data); ``mode='constant'`` emits a uniform value.
    """

    def __init__(self, config, mode="first_channel", value=0.5):
        super().__init__()
        self.config = config
        self.mode = mode
        self.value = value
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        if self.mode == "first_channel":
            return x[:, :1].clamp(0.0, 1.0)
        return torch.full((x.shape[0], 1, x.shape[2], x.shape[3]), self.value)


@pytest.fixture
def fixed_rng():
    return np.random.default_rng(1234)
