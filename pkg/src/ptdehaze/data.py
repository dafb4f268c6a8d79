"""Paired hazy/clean dataset ingestion, augmentation and batching.

Expected layout: `<root>/{train,val}/{hazy,clean}/<stem>.(png|jpg)`; a
`GT` directory is accepted in place of `clean`. Haze maps are computed on
the full image and cropped together with the augmentation window so the
map matches what inference would see.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import priors
from .errors import DatasetError, ParameterError, ShapeError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
CLEAN_DIR_NAMES = ("clean", "GT", "gt")
DEFAULT_CROP = 256


@dataclass(frozen=True)
class SamplePair:
    id: str
    hazy_path: Path
    clean_path: Path
    split: str
    cached_hazemap_path: Path | None = None


def load_image(path) -> np.ndarray:
    """Decode to HxWx3 float64 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _index_images(directory: Path) -> dict:
    files = {}
    if not directory.is_dir():
        return files
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            files[p.stem] = p
    return files


def _find_clean_dir(split_dir: Path) -> Path | None:
    for name in CLEAN_DIR_NAMES:
        candidate = split_dir / name
        if candidate.is_dir():
            return candidate
    return None


def scan_dataset(root, splits=("train", "val")) -> list:
    """Pair hazy and clean images by filename stem, lexicographically ordered.

    Orphan stems are excluded with a warning; an entirely empty scan raises.
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"dataset root {root} does not exist")
    pairs = []
    seen_ids = set()
    for split in splits:
        split_dir = root / split
        hazy = _index_images(split_dir / "hazy")
        clean_dir = _find_clean_dir(split_dir)
        clean = _index_images(clean_dir) if clean_dir else {}
        for stem in sorted(set(hazy) | set(clean)):
            if stem not in hazy or stem not in clean:
                side = "clean" if stem in hazy else "hazy"
                log.warning("skipping '%s/%s': missing %s image", split, stem, side)
                continue
            sample_id = stem
            if sample_id in seen_ids:
                # same stem in another split; keep ids dataset-unique
                sample_id = f"{split}-{stem}"
                log.warning("stem '%s' occurs in multiple splits; using id '%s'",
                            stem, sample_id)
            seen_ids.add(sample_id)
            cache = priors.haze_map_cache_path(hazy[stem])
            pairs.append(SamplePair(
                id=sample_id, hazy_path=hazy[stem], clean_path=clean[stem],
                split=split, cached_hazemap_path=cache if cache.exists() else None,
            ))
    if not pairs:
        raise DatasetError(f"no hazy/clean pairs found under {root}")
    return pairs


@dataclass
class LoadedPair:
    id: str
    split: str
    hazy: np.ndarray
    clean: np.ndarray
    hazemap: np.ndarray


def load_pair(pair: SamplePair, patch_size: int = priors.DEFAULT_PATCH_SIZE,
              radius: int = priors.DEFAULT_SMOOTH_RADIUS,
              eps: float = priors.DEFAULT_SMOOTH_EPS,
              use_cache: bool = False, write_cache: bool = False) -> LoadedPair:
    """Decode one pair; the haze map is computed on the full hazy image."""
    hazy = load_image(pair.hazy_path)
    clean = load_image(pair.clean_path)
    if hazy.shape != clean.shape:
        raise ShapeError(
            f"pair '{pair.id}': hazy {hazy.shape} vs clean {clean.shape} dimensions differ"
        )
    hm = None
    if use_cache:
        hm = priors.load_haze_map_cache(pair.hazy_path, patch_size, radius, eps)
    if hm is None:
        hm = priors.extract_haze_map(hazy, patch_size, radius, eps)
        if write_cache:
            priors.save_haze_map_cache(hm, pair.hazy_path)
    if hm.values.shape != hazy.shape[:2]:
        raise ShapeError(f"pair '{pair.id}': cached haze map shape {hm.values.shape} "
                         f"does not match image {hazy.shape[:2]}")
    return LoadedPair(id=pair.id, split=pair.split, hazy=hazy, clean=clean,
                      hazemap=hm.values)


def augment(loaded: LoadedPair, crop: int, rng: np.random.Generator,
            flip: bool = True):
    """Synchronized random crop and horizontal flip of hazy/clean/hazemap."""
    h, w = loaded.hazy.shape[:2]
    if crop % 16:
        raise ParameterError(f"crop size must be divisible by 16, got {crop}")
    if crop > min(h, w):
        raise ParameterError(f"crop {crop} exceeds image size {h}x{w}")
    r = int(rng.integers(0, h - crop + 1))
    c = int(rng.integers(0, w - crop + 1))
    hazy = loaded.hazy[r:r + crop, c:c + crop]
    clean = loaded.clean[r:r + crop, c:c + crop]
    hazemap = loaded.hazemap[r:r + crop, c:c + crop]
    if flip and rng.random() < 0.5:
        hazy = hazy[:, ::-1]
        clean = clean[:, ::-1]
        hazemap = hazemap[:, ::-1]
    return hazy.copy(), clean.copy(), hazemap.copy()


def make_batches(pairs, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled batches; the final short batch is kept."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield [pairs[i] for i in order[start:start + batch_size]]
