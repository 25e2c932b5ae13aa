import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from dtrattunet.config import tiny_model_config
from dtrattunet.data import make_synthetic_samples


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_multiclass_config():
    return tiny_model_config(task="multiclass")


@pytest.fixture
def synthetic_samples():
    return make_synthetic_samples(8, seed=1)


def write_png_corpus(root: Path, samples, with_infection=True, with_lung=True, manifest=None):
    """Lay a sample list out on disk in the documented corpus structure."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    if with_infection:
        (root / "infection_masks").mkdir(exist_ok=True)
    if with_lung:
        (root / "lung_masks").mkdir(exist_ok=True)
    for s in samples:
        arr = np.clip(s.image * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(root / "images" / f"{s.source_id}.png")
        if with_infection and s.infection_mask is not None:
            Image.fromarray(s.infection_mask.astype(np.uint8), mode="L").save(
                root / "infection_masks" / f"{s.source_id}.png"
            )
        if with_lung and s.lung_mask is not None:
            Image.fromarray(s.lung_mask.astype(np.uint8), mode="L").save(
                root / "lung_masks" / f"{s.source_id}.png"
            )
    if manifest is not None:
        lines = ["stem,scan_id,subset"]
        lines += [f"{stem},{scan},{subset}" for stem, scan, subset in manifest]
        (root / "manifest.csv").write_text("\n".join(lines) + "\n")
    return root


@pytest.fixture
def png_corpus(tmp_path, synthetic_samples):
    return write_png_corpus(tmp_path / "corpus", synthetic_samples)
