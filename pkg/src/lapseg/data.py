"""Dataset indexing: sample records, directory scanning, manifest CSV, splits.

A manifest is the canonical dataset index. It can be scanned from a directory
tree (``paired_dirs`` layout: ``<root>/images/**`` and ``<root>/masks/**``
with matching relative names) or loaded from a CSV file with the fixed header
``image_path,mask_path,procedure_id,frame_id,split``. Relative paths in a CSV
are resolved against the directory containing the CSV.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadRatios, EmptyDataset, MissingMask

CSV_HEADER = ["image_path", "mask_path", "procedure_id", "frame_id", "split"]
SPLITS = ("train", "val", "test", "unassigned")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    mask_path: str
    procedure_id: str = ""
    frame_id: str = ""
    split: str = "unassigned"


@dataclass
class Manifest:
    records: list[SampleRecord] = field(default_factory=list)
    root: str = ""
    seed: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _walk_files(directory):
    out = []
    for dirpath, _dirnames, filenames in os.walk(directory):
        for name in filenames:
            if name.lower().endswith(IMAGE_EXTENSIONS):
                full = os.path.join(dirpath, name)
                out.append(os.path.relpath(full, directory))
    return sorted(out)


def scan_paired_dirs(root):
    """Index ``<root>/images`` against ``<root>/masks`` by relative name.

    Masks may use a different image extension than their frame (e.g. ``.jpg``
    frames with ``.png`` masks); matching is done on the relative path with
    the extension stripped. Records carry absolute paths so the resulting
    manifest is valid from any working directory.
    """
    root = os.path.abspath(root)
    images_dir = os.path.join(root, "images")
    masks_dir = os.path.join(root, "masks")
    if not os.path.isdir(images_dir) or not os.path.isdir(masks_dir):
        raise EmptyDataset(f"expected 'images' and 'masks' directories under {root}")

    mask_by_stem = {}
    for rel in _walk_files(masks_dir):
        stem, _ext = os.path.splitext(rel)
        mask_by_stem[stem] = os.path.join(masks_dir, rel)

    records = []
    for rel in _walk_files(images_dir):
        stem, _ext = os.path.splitext(rel)
        if stem not in mask_by_stem:
            raise MissingMask(f"no mask found for image {os.path.join(images_dir, rel)}")
        parts = stem.split(os.sep)
        procedure_id = parts[0] if len(parts) > 1 else ""
        frame_id = parts[-1]
        records.append(SampleRecord(
            image_path=os.path.join(images_dir, rel),
            mask_path=mask_by_stem[stem],
            procedure_id=procedure_id,
            frame_id=frame_id,
        ))
    return records


def scan_dataset(root, layout="paired_dirs", seed=0):
    """Build a Manifest from ``root`` using the given layout.

    ``paired_dirs`` scans parallel image/mask trees; ``manifest_csv`` treats
    ``root`` as a CSV file in the manifest format. Record order is
    deterministic (lexicographic by image path) and every referenced file is
    verified to exist.
    """
    if layout == "paired_dirs":
        records = scan_paired_dirs(root)
    elif layout == "manifest_csv":
        manifest = read_manifest_csv(root)
        records = manifest.records
        root = manifest.root
    else:
        raise ValueError(f"unknown layout: {layout!r}")

    if not records:
        raise EmptyDataset(f"no image/mask pairs found under {root}")
    seen = set()
    for rec in records:
        if rec.image_path in seen:
            raise ValueError(f"duplicate image_path in manifest: {rec.image_path}")
        seen.add(rec.image_path)
        if not os.path.isfile(rec.image_path):
            raise MissingMask(f"missing image file: {rec.image_path}")
        if not os.path.isfile(rec.mask_path):
            raise MissingMask(f"missing mask file for image {rec.image_path}: {rec.mask_path}")
    return Manifest(records=records, root=str(root), seed=seed)


def split_manifest(manifest, ratios=(0.8, 0.1, 0.1), seed=0):
    """Partition a manifest into (train, val, test) by a seeded shuffle.

    Sizes follow the floor rule: val and test get ``floor(r * N)`` records
    each and train receives the remainder, which puts the 5983-frame
    ROBUST-MIS training set at 4787/598/598 under ratios (0.8, 0.1, 0.1).
    """
    r_train, r_val, r_test = ratios
    if min(ratios) < 0 or max(ratios) <= 0:
        raise BadRatios(f"ratios must be non-negative with a positive sum: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must sum to 1.0, got {sum(ratios)}")
    n = len(manifest)
    if n == 0:
        raise EmptyDataset("cannot split an empty manifest")

    n_val = math.floor(r_val * n)
    n_test = math.floor(r_test * n)
    n_train = n - n_val - n_test

    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    shuffled = [manifest.records[i] for i in order]

    def take(records, split_name):
        return [replace(rec, split=split_name) for rec in records]

    train = take(shuffled[:n_train], "train")
    val = take(shuffled[n_train:n_train + n_val], "val")
    test = take(shuffled[n_train + n_val:], "test")
    make = lambda recs: Manifest(records=recs, root=manifest.root, seed=seed)
    return make(train), make(val), make(test)


def read_manifest_csv(path):
    """Load a manifest CSV; relative paths resolve against the CSV's directory."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))

    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"bad manifest header {header!r}, expected {CSV_HEADER!r}")
        for row in reader:
            if not row:
                continue
            image_path, mask_path, procedure_id, frame_id, split = row
            if split not in SPLITS:
                raise ValueError(f"bad split value {split!r} in {path}")
            records.append(SampleRecord(
                image_path=resolve(image_path),
                mask_path=resolve(mask_path),
                procedure_id=procedure_id,
                frame_id=frame_id,
                split=split,
            ))
    return Manifest(records=records, root=base)


def write_manifest_csv(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in manifest.records:
            writer.writerow([rec.image_path, rec.mask_path,
                             rec.procedure_id, rec.frame_id, rec.split])
