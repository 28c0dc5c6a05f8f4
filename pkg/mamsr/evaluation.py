"""
Y-channel PSNR/SSIM and dataset evaluation.

Protocol per image: mod-crop HR, bicubic-downscale (or read the paired LR file),
upscale, clip to [0, 1], convert both images to BT.601 studio-swing Y, then
score with `shave` border pixels removed from every side.
"""
import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.signal import convolve2d

from mamsr.image_io import DatasetError, ImageError, bicubic_resize, downscale, list_pngs, load_png, modcrop
from mamsr.model import ModelParams, NetworkConfig, network_forward

Y_COEFFS = np.array([65.481, 128.553, 24.966])
Y_OFFSET = 16.0

PIXEL_MAX = 255.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

Upscaler = Callable[[np.ndarray], np.ndarray]


class ImageTooSmallError(ImageError):
    pass


def check_scorable(hr: np.ndarray, shave: int):
    """Raise ImageTooSmallError unless the shaved HR image still fits one SSIM window."""
    h, w = hr.shape[:2]
    if min(h, w) - 2 * shave < SSIM_WINDOW:
        raise ImageTooSmallError(f"{w}x{h} leaves less than {SSIM_WINDOW}x{SSIM_WINDOW} pixels "
                                 f"after a {shave}-pixel shave")


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) RGB in [0, 1] -> (H, W) luma on the [16, 235] scale."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got {img.shape}")
    return Y_OFFSET + img.astype(np.float64) @ Y_COEFFS


def _shaved(a: np.ndarray, b: np.ndarray, shave: int) -> Tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    if shave < 0:
        raise ValueError(f"shave must be >= 0, got {shave}")
    h, w = a.shape[:2]
    if h <= 2 * shave or w <= 2 * shave:
        raise ValueError(f"shaving {shave} pixels leaves nothing of a {w}x{h} image")
    if shave:
        a, b = a[shave:h - shave, shave:w - shave], b[shave:h - shave, shave:w - shave]
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """PSNR in dB of two Y images on the 0-255 scale; inf when they are identical."""
    a, b = _shaved(a, b, shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PIXEL_MAX ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """Mean SSIM over the valid region with an 11x11 Gaussian window (sigma 1.5), L = 255."""
    a, b = _shaved(a, b, shave)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape[1]}x{a.shape[0]}")
    c1 = (SSIM_K1 * PIXEL_MAX) ** 2
    c2 = (SSIM_K2 * PIXEL_MAX) ** 2
    window = gaussian_window()

    def filt(img):
        return convolve2d(img, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.mean(ssim_map))


def model_upscaler(params: ModelParams, cfg: NetworkConfig, rgb_mean=None) -> Upscaler:
    """Wrap a network as an (H, W, 3) -> (sH, sW, 3) upscaler; the mean is removed and re-added."""
    mean = np.zeros(3) if rgb_mean is None else np.asarray(rgb_mean, dtype=np.float64)
    mean32 = mean.astype(np.float32)

    def upscale(lr: np.ndarray) -> np.ndarray:
        x = (lr.astype(np.float32) - mean32).transpose(2, 0, 1)[None]
        out = network_forward(x, params, cfg)[0].transpose(1, 2, 0)
        return out + mean32

    return upscale


def bicubic_upscaler(scale: int) -> Upscaler:
    def upscale(lr: np.ndarray) -> np.ndarray:
        h, w = lr.shape[:2]
        return bicubic_resize(lr, w * scale, h * scale)

    return upscale


@dataclass
class ImageScore:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    scale: int
    shave: int
    dataset: str
    rows: List[ImageScore] = field(default_factory=list)
    skipped: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([row.psnr_db for row in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([row.ssim for row in self.rows])) if self.rows else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# dataset={self.dataset}\n# scale={self.scale}\n# shave={self.shave}\n")
        for name, reason in self.skipped:
            buf.write(f"# skipped={name}: {reason}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "psnr_db", "ssim"])
        for row in self.rows:
            writer.writerow([row.name, f"{row.psnr_db:.4f}", f"{row.ssim:.6f}"])
        writer.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    def format_table(self) -> str:
        width = max([len(row.name) for row in self.rows] + [len("mean"), len("name")])
        lines = [f"{'name':<{width}}  {'psnr_db':>9}  {'ssim':>8}", "-" * (width + 21)]
        for row in self.rows:
            lines.append(f"{row.name:<{width}}  {row.psnr_db:>9.4f}  {row.ssim:>8.6f}")
        lines.append("-" * (width + 21))
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:>9.4f}  {self.mean_ssim:>8.6f}")
        return "\n".join(lines)


def score_image(name: str, sr: np.ndarray, hr: np.ndarray, shave: int) -> ImageScore:
    sr_y = rgb_to_y(np.clip(sr, 0.0, 1.0))
    hr_y = rgb_to_y(np.clip(hr, 0.0, 1.0))
    return ImageScore(name, psnr(sr_y, hr_y, shave), ssim(sr_y, hr_y, shave))


def load_eval_pair(path: Path, scale: int, lr_dir=None) -> Tuple[np.ndarray, np.ndarray]:
    """(LR, HR) for one evaluation image; HR is mod-cropped to the scale."""
    hr = modcrop(load_png(path), scale)
    if lr_dir is None:
        return downscale(hr, scale), hr
    lr = load_png(Path(lr_dir) / path.name)
    if lr.shape[0] * scale != hr.shape[0] or lr.shape[1] * scale != hr.shape[1]:
        raise ImageError(f"{path.name}: LR {lr.shape[1]}x{lr.shape[0]} does not pair with HR "
                         f"{hr.shape[1]}x{hr.shape[0]} at x{scale}")
    return lr, hr


def evaluate(upscaler: Optional[Upscaler], hr_dir, scale: int, dataset_name: Optional[str] = None,
             lr_dir=None, threads: int = 1, identity_check: bool = False) -> EvalReport:
    """
    Score every PNG in hr_dir; results keep the sorted file order whatever the thread count.

    identity_check scores the ground truth against itself (upscaler unused).
    Unreadable or too-small images are skipped with a warning and listed in the report.
    """
    hr_dir = Path(hr_dir)
    if not hr_dir.is_dir():
        raise DatasetError(f"{hr_dir}: not a directory")
    paths = list_pngs(hr_dir)
    if not paths:
        raise DatasetError(f"{hr_dir}: no PNG images")
    if upscaler is None and not identity_check:
        raise ValueError("an upscaler is required unless identity_check is set")

    report = EvalReport(scale=scale, shave=scale, dataset=dataset_name or hr_dir.name)

    def run(path: Path):
        try:
            lr, hr = load_eval_pair(path, scale, lr_dir)
            check_scorable(hr, report.shave)
        except ImageError as e:
            return path.name, e
        sr = hr if identity_check else upscaler(lr)
        return path.name, score_image(path.name, sr, hr, report.shave)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, paths))

    for name, outcome in results:
        if isinstance(outcome, ImageError):
            print(f"⚠️  Skipping {name}: {outcome}")
            report.skipped.append((name, str(outcome)))
        else:
            report.rows.append(outcome)
    if not report.rows:
        raise DatasetError(f"{hr_dir}: no readable images large enough to score")
    return report


def validation_hook(net_cfg: NetworkConfig, hr_dir, rgb_mean, lr_dir=None) -> Callable[[ModelParams], float]:
    """Mean Y-PSNR of the current parameters on a held-out folder, loaded once."""
    pairs = []
    for path in list_pngs(hr_dir):
        lr, hr = load_eval_pair(path, net_cfg.scale, lr_dir)
        try:
            check_scorable(hr, net_cfg.scale)
        except ImageTooSmallError as e:
            print(f"⚠️  Skipping {path.name}: {e}")
            continue
        pairs.append((path.name, lr, hr))
    if not pairs:
        raise DatasetError(f"{hr_dir}: no scorable PNG images")

    def validate(params: ModelParams) -> float:
        upscale = model_upscaler(params, net_cfg, rgb_mean)
        scores = [score_image(name, upscale(lr), hr, net_cfg.scale) for name, lr, hr in pairs]
        return float(np.mean([s.psnr_db for s in scores]))

    return validate
