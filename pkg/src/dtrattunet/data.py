"""Corpus loading, preprocessing, stochastic augmentation, and deterministic splits.

On-disk layout::

    root/
      images/           *.png | *.nii | *.nii.gz
      infection_masks/  same stems as images (optional)
      lung_masks/       same stems as images (optional)
      manifest.csv      optional; authoritative when present
                        columns: stem, scan_id, subset (optional)

PNG files hold one slice each; NIfTI volumes are cut into axial slices at
load time, producing source ids like ``scan7#004``. Loading and augmentation
are pure per sample given an explicit rng, so they parallelize across samples
as long as each worker derives its own rng stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ModelConfig
from .nifti import axial_slices, read_nifti


class DatasetError(Exception):
    """Raised when a corpus violates the documented layout or label contract."""


@dataclass
class SliceSample:
    """One CT slice with optional infection and lung masks plus provenance.

    Missing masks stay ``None``; they are never fabricated as zero fills.
    Infection labels: 0 background, 1 infection (binary) or 1 GGO and
    2 consolidation (multi-class). Lung labels: 0 or 1.
    """

    image: np.ndarray
    source_id: str
    scan_id: str
    infection_mask: np.ndarray | None = None
    lung_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 2:
            raise DatasetError(f"{self.source_id}: image must be 2-D, got shape {self.image.shape}")
        for name, mask, allowed in (
            ("infection_mask", self.infection_mask, {0, 1, 2}),
            ("lung_mask", self.lung_mask, {0, 1}),
        ):
            if mask is None:
                continue
            if mask.shape != self.image.shape:
                raise DatasetError(
                    f"{self.source_id}: {name} shape {mask.shape} does not match image {self.image.shape}"
                )
            values = set(np.unique(mask).tolist())
            if not values <= allowed:
                raise DatasetError(
                    f"{self.source_id}: {name} holds labels {sorted(values)}, allowed {sorted(allowed)}"
                )


@dataclass(frozen=True)
class DatasetLayout:
    images_dir: str = "images"
    infection_dir: str = "infection_masks"
    lung_dir: str = "lung_masks"
    manifest: str = "manifest.csv"


_EXTENSIONS = (".png", ".nii", ".nii.gz")


def _stem(path: Path) -> str:
    name = path.name
    for ext in sorted(_EXTENSIONS, key=len, reverse=True):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _read_slices(path: Path) -> list[np.ndarray]:
    try:
        if path.name.endswith(".png"):
            with Image.open(path) as img:
                if img.mode not in ("L", "I", "I;16", "F"):
                    img = img.convert("L")
                return [np.asarray(img)]
        return axial_slices(read_nifti(path))
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"unreadable file {path}: {exc}") from exc


def _as_labels(arr: np.ndarray, path: Path) -> np.ndarray:
    rounded = np.rint(arr)
    if not np.array_equal(rounded, np.asarray(arr, dtype=np.float64)):
        raise DatasetError(f"{path}: mask holds non-integer values")
    return rounded.astype(np.int64)


def file_stem(path) -> str:
    """Stem with the image extension removed (handles the double .nii.gz)."""
    return _stem(Path(path))


def read_image_slices(path) -> list[np.ndarray]:
    """Read a PNG (one slice) or NIfTI volume (axial slices) as 2-D arrays."""
    return _read_slices(Path(path))


def _index_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    index: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if not path.is_file() or not path.name.endswith(_EXTENSIONS):
            continue
        stem = _stem(path)
        if stem in index:
            raise DatasetError(f"duplicate stem {stem!r}: {index[stem]} and {path}")
        index[stem] = path
    return index


def _read_manifest(path: Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for required in ("stem", "scan_id"):
            if required not in fields:
                raise DatasetError(f"{path}: manifest is missing the {required!r} column")
        rows = {}
        for row in reader:
            stem = row["stem"].strip()
            if stem in rows:
                raise DatasetError(f"{path}: duplicate manifest stem {stem!r}")
            rows[stem] = {"scan_id": row["scan_id"].strip(), "subset": (row.get("subset") or "").strip()}
    return rows


def load_dataset(root, layout: DatasetLayout = DatasetLayout()) -> list[SliceSample]:
    """Load every slice under ``root``; see the module docstring for the layout.

    Raises FileNotFoundError when the root itself is missing, DatasetError for
    orphan masks (a mask stem with no image), unreadable files, or slice-count
    mismatches between a volume and its masks. An empty corpus is an empty
    list, not an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")

    images = _index_files(root / layout.images_dir)
    infection_files = _index_files(root / layout.infection_dir)
    lung_files = _index_files(root / layout.lung_dir)

    orphans = sorted((set(infection_files) | set(lung_files)) - set(images))
    if orphans:
        raise DatasetError(
            "masks without a matching image: " + ", ".join(orphans)
        )

    manifest_path = root / layout.manifest
    manifest = _read_manifest(manifest_path) if manifest_path.is_file() else None
    if manifest is not None:
        missing = sorted(set(manifest) - set(images))
        if missing:
            raise DatasetError(
                f"{manifest_path}: manifest stems with no image file: " + ", ".join(missing)
            )
        stems = list(manifest)
    else:
        stems = list(images)

    samples: list[SliceSample] = []
    for stem in stems:
        image_slices = _read_slices(images[stem])
        mask_slices: dict[str, list[np.ndarray] | None] = {}
        for kind, index in (("infection", infection_files), ("lung", lung_files)):
            if stem not in index:
                mask_slices[kind] = None
                continue
            slices = [_as_labels(s, index[stem]) for s in _read_slices(index[stem])]
            if len(slices) != len(image_slices):
                raise DatasetError(
                    f"{index[stem]}: {len(slices)} mask slices for {len(image_slices)} image slices"
                )
            mask_slices[kind] = slices

        scan_id = manifest[stem]["scan_id"] if manifest else stem
        meta = {"path": str(images[stem])}
        if manifest and manifest[stem]["subset"]:
            meta["subset"] = manifest[stem]["subset"]
        multi = len(image_slices) > 1
        for k, image in enumerate(image_slices):
            source_id = f"{stem}#{k:03d}" if multi else stem
            samples.append(
                SliceSample(
                    image=np.asarray(image),
                    source_id=source_id,
                    scan_id=scan_id,
                    infection_mask=None if mask_slices["infection"] is None else mask_slices["infection"][k],
                    lung_mask=None if mask_slices["lung"] is None else mask_slices["lung"][k],
                    meta=dict(meta),
                )
            )
    return samples


def _resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(
        image[None, None], size=(size, size), mode="bilinear", align_corners=False
    )[0, 0]


def _resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    resized = F.interpolate(mask[None, None].float(), size=(size, size), mode="nearest-exact")
    return resized[0, 0].long()


def preprocess(
    sample: SliceSample,
    config: ModelConfig,
    hu_window: tuple[float, float] | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Turn a raw slice into a model-ready pair (input tensor, target masks).

    The image is resized bilinearly to the configured square size, then
    scaled to [0, 1] (per-slice min-max, or a fixed HU window when given) and
    replicated across the configured input channels. Masks are resized with
    nearest-neighbor interpolation so the label set never grows. A constant
    image scales to all zeros and sets ``meta['constant_image']``.
    """
    image = torch.from_numpy(np.array(sample.image, dtype=np.float32, copy=True))
    image = _resize_image(image, config.image_size)

    if hu_window is not None:
        low, high = hu_window
        if not high > low:
            raise ValueError(f"invalid intensity window {hu_window}")
        image = (image.clamp(low, high) - low) / (high - low)
    else:
        lo, hi = image.min(), image.max()
        if hi > lo:
            image = (image - lo) / (hi - lo)
        else:
            image = torch.zeros_like(image)
            sample.meta["constant_image"] = True

    inputs = image[None].repeat(config.input_channels, 1, 1)

    targets: dict[str, torch.Tensor] = {}
    if sample.infection_mask is not None:
        mask = torch.from_numpy(np.array(sample.infection_mask, copy=True))
        targets["infection"] = _resize_mask(mask, config.image_size)
    if sample.lung_mask is not None:
        mask = torch.from_numpy(np.array(sample.lung_mask, copy=True))
        targets["lung"] = _resize_mask(mask, config.image_size)
    return inputs, targets


def _rotate(image: torch.Tensor, angle_deg: float, mode: str) -> torch.Tensor:
    # rotation about the pixel-grid center; out-of-frame pixels fill with 0
    stack = image[None].float()
    rad = math.radians(angle_deg)
    cos, sin = math.cos(rad), math.sin(rad)
    theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=stack.dtype)
    grid = F.affine_grid(theta[None], list(stack.shape), align_corners=False)
    out = F.grid_sample(stack, grid, mode=mode, padding_mode="zeros", align_corners=False)
    return out[0]


def augment(
    inputs: torch.Tensor,
    masks: dict[str, torch.Tensor],
    rng: np.random.Generator,
    rotate_prob: float = 0.1,
    max_rotate_deg: float = 35.0,
    hflip_prob: float = 0.2,
    vflip_prob: float = 0.2,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Random rotation and horizontal/vertical flips, identical across masks.

    The image is rotated bilinearly, masks with nearest-neighbor sampling;
    the rng must be passed explicitly so draws stay reproducible. Defaults:
    rotation within +-35 degrees at 10%, each flip at 20%.
    """
    inputs = inputs.clone()
    masks = {k: v.clone() for k, v in masks.items()}

    if rng.random() < rotate_prob:
        angle = float(rng.uniform(-max_rotate_deg, max_rotate_deg))
        inputs = _rotate(inputs, angle, "bilinear")
        masks = {k: _rotate(v[None], angle, "nearest")[0].round().long() for k, v in masks.items()}
    if rng.random() < hflip_prob:
        inputs = torch.flip(inputs, dims=[-1])
        masks = {k: torch.flip(v, dims=[-1]) for k, v in masks.items()}
    if rng.random() < vflip_prob:
        inputs = torch.flip(inputs, dims=[-2])
        masks = {k: torch.flip(v, dims=[-2]) for k, v in masks.items()}
    return inputs, masks


def split(samples: list[SliceSample], spec) -> tuple[list[SliceSample], list[SliceSample]]:
    """Disjoint, exhaustive, deterministic train/test partition.

    Partitioning is by source id (slice granularity) or scan id (scan
    granularity, which never separates slices of one scan). The train side
    receives ``floor(train_fraction * units)`` units.
    """
    if not samples:
        raise DatasetError("cannot split an empty sample list")
    key = (lambda s: s.source_id) if spec.granularity == "slice" else (lambda s: s.scan_id)
    units = sorted({key(s) for s in samples})
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(units))
    n_train = math.floor(spec.train_fraction * len(units))
    if n_train == 0 or n_train == len(units):
        raise DatasetError(
            f"train_fraction {spec.train_fraction} leaves an empty side for {len(units)} units"
        )
    train_keys = {units[i] for i in order[:n_train]}
    train = [s for s in samples if key(s) in train_keys]
    test = [s for s in samples if key(s) not in train_keys]
    return train, test


def _disc(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.ogrid[:height, :width]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def make_synthetic_samples(
    n: int, image_size: int = 64, task: str = "binary", seed: int = 0
) -> list[SliceSample]:
    """Generate slices with disc-shaped lungs and blob infections inside them.

    Useful for smoke tests and demos: the corpus is tiny, fully labeled, and
    easily memorized by a reduced model.
    """
    samples = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        s = image_size
        lung = np.zeros((s, s), dtype=bool)
        centers = []
        for cx_frac in (0.32, 0.68):
            cy = s * rng.uniform(0.45, 0.55)
            cx = s * cx_frac + rng.uniform(-2, 2)
            radius = s * rng.uniform(0.2, 0.26)
            lung |= _disc(s, s, cy, cx, radius)
            centers.append((cy, cx, radius))

        infection = np.zeros((s, s), dtype=np.int64)
        for blob in range(int(rng.integers(1, 4))):
            cy, cx, radius = centers[int(rng.integers(0, 2))]
            angle = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0, radius * 0.45)
            blob_r = s * rng.uniform(0.05, 0.1)
            blob_mask = _disc(s, s, cy + dist * np.sin(angle), cx + dist * np.cos(angle), blob_r) & lung
            label = 1 if task == "binary" else int(rng.integers(1, 3))
            infection[blob_mask] = label

        image = np.full((s, s), 0.08, dtype=np.float32)
        image[lung] = 0.35
        image[infection == 1] = 0.62
        image[infection == 2] = 0.88
        image += rng.normal(0.0, 0.015, size=(s, s)).astype(np.float32)

        samples.append(
            SliceSample(
                image=image,
                source_id=f"synthetic-{i:03d}",
                scan_id=f"synthetic-scan-{i // 4:02d}",
                infection_mask=infection,
                lung_mask=lung.astype(np.int64),
            )
        )
    return samples
