import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

sys.path.insert(0, str(Path(__file__).parent))

from ptdehaze import data as data_mod  # noqa: E402

AIRLIGHT = 0.95


def smooth_texture(h, w, rng, low=0.05, high=0.7):
    """Natural-looking random field: blurred noise rescaled to [low, high]."""
    noise = gaussian_filter(rng.random((h, w, 3)), sigma=(3, 3, 0))
    lo, hi = noise.min(), noise.max()
    return low + (noise - lo) / (hi - lo + 1e-12) * (high - low)


def hazy_from_clean(clean, transmission, airlight=AIRLIGHT):
    """Standard haze imaging model: I = J*t + A*(1 - t)."""
    t = transmission[..., None]
    return clean * t + airlight * (1.0 - t)


def synthetic_pair(h, w, seed, t_low=0.35, t_high=0.9):
    """A clean/hazy pair with spatially varying haze density."""
    rng = np.random.default_rng(seed)
    clean = smooth_texture(h, w, rng)
    t = gaussian_filter(rng.random((h, w)), sigma=6)
    lo, hi = t.min(), t.max()
    t = t_low + (t - lo) / (hi - lo + 1e-12) * (t_high - t_low)
    return clean, hazy_from_clean(clean, t)


def write_dataset(root: Path, n_train=2, n_val=1, size=48, seed=0):
    """Materialize a tiny paired dataset in the expected directory layout."""
    for split, count, offset in (("train", n_train, 0), ("val", n_val, 1000)):
        hazy_dir = root / split / "hazy"
        clean_dir = root / split / "clean"
        hazy_dir.mkdir(parents=True, exist_ok=True)
        clean_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            clean, hazy = synthetic_pair(size, size, seed + offset + i)
            stem = f"{split}{i:02d}"
            data_mod.save_image(hazy_dir / f"{stem}.png", hazy)
            data_mod.save_image(clean_dir / f"{stem}.png", clean)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyset")
    return write_dataset(root, n_train=2, n_val=1, size=48)
