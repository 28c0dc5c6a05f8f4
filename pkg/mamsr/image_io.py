"""
PNG loading/saving and bicubic resampling.

Images are (H, W, 3) float32 arrays with values in [0, 1].
"""
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image, UnidentifiedImageError

CUBIC_A = -0.5
_SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I")


class ImageError(Exception):
    pass


class DatasetError(Exception):
    pass


class ImageNotFoundError(ImageError):
    pass


class MalformedImageError(ImageError):
    pass


class UnsupportedColorTypeError(ImageError):
    pass


def load_png(path) -> np.ndarray:
    """
    Load an 8- or 16-bit PNG as RGB in [0, 1]; grayscale is expanded, alpha dropped.

    16-bit grayscale keeps full precision. Pillow decodes 16-bit RGB(A) to
    8 bits per channel, so those files load at 8-bit precision with a warning.
    """
    path = Path(path)
    try:
        image = Image.open(path)
        # the raw mode is only visible before load() clears the tile list
        rawmodes = [str(tile[3]) for tile in image.tile]
        image.load()
    except FileNotFoundError as e:
        raise ImageNotFoundError(f"{path}: no such file") from e
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise MalformedImageError(f"{path}: cannot decode image ({e})") from e
    if image.format != "PNG":
        raise MalformedImageError(f"{path}: not a PNG file ({image.format})")
    if image.mode in ("RGB", "RGBA") and any(";16" in mode for mode in rawmodes):
        print(f"⚠️  {path.name}: 16-bit color decoded at 8-bit precision")

    if image.mode == "P":
        image = image.convert("RGBA" if "transparency" in image.info else "RGB")
    if image.mode in ("RGBA", "LA"):
        print(f"⚠️  {path.name}: dropping alpha channel")
        image = image.convert(image.mode[:-1])

    if image.mode == "RGB":
        return np.asarray(image, dtype=np.float32) / 255.0
    if image.mode == "L":
        gray = np.asarray(image, dtype=np.float32) / 255.0
    elif image.mode in _SIXTEEN_BIT_MODES:
        gray = np.asarray(image).astype(np.float32) / 65535.0
    else:
        raise UnsupportedColorTypeError(f"{path}: unsupported color type {image.mode}")
    return np.repeat(gray[:, :, None], 3, axis=2)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path):
    """Save an (H, W, 3) image as 8-bit RGB; values are clamped to [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    Image.fromarray(to_uint8(img)).save(Path(path), format="PNG")


def save_gray_png(img: np.ndarray, path):
    if img.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got {img.shape}")
    Image.fromarray(to_uint8(img)).save(Path(path), format="PNG")


def list_pngs(directory) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resample_weights(in_size: int, out_size: int) -> np.ndarray:
    """
    (out_size, in_size) matrix of cubic-convolution weights.

    Sampling is center-aligned; when downscaling the kernel is stretched by
    1/scale for anti-aliasing. Taps past the border are clamped onto the edge
    sample and every row is normalized to sum to 1.
    """
    scale = out_size / in_size
    kernel_scale = min(scale, 1.0)
    support = 2.0 / kernel_scale
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    taps = int(np.ceil(2 * support)) + 2
    idx = np.floor(centers - support).astype(int)[:, None] + np.arange(taps)[None, :]

    weights = cubic_kernel((idx - centers[:, None]) * kernel_scale)
    weights /= weights.sum(axis=1, keepdims=True)

    matrix = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size)[:, None], taps, axis=1)
    np.add.at(matrix, (rows, np.clip(idx, 0, in_size - 1)), weights)
    return matrix


def bicubic_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    h, w = img.shape[:2]
    rows = resample_weights(h, out_h)
    cols = resample_weights(w, out_w)
    out = np.einsum("oh,hw...->ow...", rows, img.astype(np.float64))
    out = np.einsum("pw,ow...->op...", cols, out)
    return out.astype(img.dtype)


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    """Crop bottom/right so both sides are multiples of scale."""
    h, w = img.shape[:2]
    return img[:h - h % scale, :w - w % scale]


def downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic LR counterpart of a mod-cropped HR image."""
    h, w = hr.shape[:2]
    return bicubic_resize(hr, w // scale, h // scale)
