"""Corpus layout, loading, deterministic splits, and augmentation.

A corpus is a directory of images plus optional mask directories matched by
stem; PNG files hold one slice, NIfTI volumes are cut into axial slices at
load time. Splits are reproducible functions of (seed, granularity), and
scan granularity never separates slices of one scan.

Run:  python demos/05_dataset_layout.py
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from dtrattunet.config import SplitSpec, tiny_model_config
from dtrattunet.data import augment, load_dataset, make_synthetic_samples, preprocess, split
from dtrattunet.nifti import write_nifti

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "corpus"
    for sub in ("images", "infection_masks", "lung_masks"):
        (root / sub).mkdir(parents=True)

    print("writing 6 PNG slices and one 4-slice NIfTI volume...")
    for s in make_synthetic_samples(6, seed=0):
        arr = np.clip(s.image * 255, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(root / "images" / f"{s.source_id}.png")
        Image.fromarray(s.infection_mask.astype(np.uint8)).save(
            root / "infection_masks" / f"{s.source_id}.png"
        )
        Image.fromarray(s.lung_mask.astype(np.uint8)).save(
            root / "lung_masks" / f"{s.source_id}.png"
        )

    volume_samples = make_synthetic_samples(4, seed=9)
    stack = lambda arrays, dtype: np.stack(arrays, axis=-1).astype(dtype)
    write_nifti(root / "images" / "scan-7.nii.gz",
                stack([(s.image * 1000) for s in volume_samples], np.int16))
    write_nifti(root / "infection_masks" / "scan-7.nii.gz",
                stack([s.infection_mask for s in volume_samples], np.uint8))
    write_nifti(root / "lung_masks" / "scan-7.nii.gz",
                stack([s.lung_mask for s in volume_samples], np.uint8))

    samples = load_dataset(root)
    print(f"loaded {len(samples)} slices; volume slices carry suffixed ids:")
    for s in samples:
        if s.scan_id == "scan-7":
            print(f"  {s.source_id:<14} scan={s.scan_id}")

    print("\nslice-level 70/30 split (deterministic given seed and granularity):")
    spec = SplitSpec(train_fraction=0.7, seed=0, granularity="slice")
    train_side, test_side = split(samples, spec)
    print(f"  {len(train_side)} train / {len(test_side)} test")

    print("scan-level split keeps every scan whole:")
    spec = SplitSpec(train_fraction=0.7, seed=0, granularity="scan")
    train_side, test_side = split(samples, spec)
    print(f"  train scans: {sorted({s.scan_id for s in train_side})}")
    print(f"  test scans:  {sorted({s.scan_id for s in test_side})}")

    print("\npreprocessing resizes, min-max scales, and replicates channels:")
    config = tiny_model_config()
    inputs, targets = preprocess(samples[0], config)
    print(f"  input {tuple(inputs.shape)} in [{inputs.min():.2f}, {inputs.max():.2f}]; "
          f"targets: {sorted(targets)}")

    print("\naugmentation takes an explicit rng (rotation 10%, flips 20% each):")
    rng = np.random.default_rng(5)
    changed = sum(
        not np.array_equal(augment(inputs, targets, rng)[0].numpy(), inputs.numpy())
        for _ in range(100)
    )
    print(f"  {changed}/100 draws altered the slice")
