import sys, os
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

import numpy as np
import pytest

from mamsr.image_io import save_png
from mamsr.model import NetworkConfig, init_params, network_forward_cached
from mamsr.tensor_ops import PoolStatistic


def smooth_image(h: int, w: int, phase: float = 0.0) -> np.ndarray:
    """Band-limited RGB test image in roughly [0.2, 0.8]."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    channels = []
    for c in range(3):
        p = phase + 0.7 * c
        channels.append(0.5 + 0.18 * np.sin(2 * np.pi * x / 37.0 + p) * np.cos(2 * np.pi * y / 29.0 - p)
                        + 0.1 * np.sin(2 * np.pi * (x + y) / 53.0 + 2 * p))
    return np.stack(channels, axis=-1).astype(np.float32)


def kink_margin(cache, stats=()) -> float:
    """Distance of the nearest ReLU input from 0 (and of max-pool ties) over a network cache."""
    margin = np.inf
    for block in cache.blocks:
        margin = min(margin, float(np.min(np.abs(block.h1))))
        for feed in block.icd_feeds:
            margin = min(margin, float(np.min(np.abs(feed.hidden_pre))))
        if PoolStatistic.MAX in stats or PoolStatistic.MAX_AVG in stats:
            flat = np.sort(block.x.reshape(block.x.shape[0], block.x.shape[1], -1), axis=-1)
            margin = min(margin, float(np.min(flat[..., -1] - flat[..., -2])))
    return margin


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return NetworkConfig(blocks=2, channels=8, reduction=4, scale=2)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=7)


@pytest.fixture
def make_image():
    return smooth_image


@pytest.fixture
def png_folder(tmp_path):
    """Factory writing `count` smooth PNGs of size h x w into a fresh folder."""
    def write(name: str = "hr", count: int = 3, h: int = 32, w: int = 32):
        folder = tmp_path / name
        folder.mkdir()
        for i in range(count):
            save_png(smooth_image(h, w, phase=0.9 * i), folder / f"img{i:02d}.png")
        return folder
    return write


@pytest.fixture
def kink_free_network():
    """Factory returning (img, params) in float64 whose ReLU inputs all sit at least `margin` from 0."""
    def build(cfg: NetworkConfig, seed: int, h: int = 5, w: int = 5, margin: float = 1e-3, attempts: int = 200):
        rng = np.random.default_rng(seed)
        stats = (cfg.csi_stat, cfg.icd_stat)
        for _ in range(attempts):
            params = init_params(cfg, int(rng.integers(2 ** 31)), dtype=np.float64)
            for name in params.names():
                if name.endswith(".bias"):
                    params.values[name][:] = rng.normal(0, 0.1, params[name].shape)
            img = rng.uniform(-0.5, 0.5, (1, 3, h, w))
            _, cache = network_forward_cached(img, params, cfg)
            if kink_margin(cache, stats) > margin:
                return img, params
        raise RuntimeError("no kink-free draw found")
    return build
