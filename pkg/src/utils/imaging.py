"""PNG I/O, 8-bit quantization and heatmap overlays"""
import io
import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .storage import atomic_write

logger = logging.getLogger(__name__)

PNG_MAGIC = b'\x89PNG\r\n\x1a\n'


def detect_image_format(image_bytes: bytes) -> str:
    """Detect image format from magic bytes"""
    if image_bytes.startswith(PNG_MAGIC):
        return "png"
    elif image_bytes.startswith(b'\xff\xd8\xff'):
        return "jpeg"
    elif image_bytes.startswith(b'GIF87a') or image_bytes.startswith(b'GIF89a'):
        return "gif"
    elif len(image_bytes) > 12 and image_bytes[8:12] == b'WEBP':
        return "webp"
    return "unknown"


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] float array to 8-bit"""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _png_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    # no metadata chunks, so identical arrays give identical files
    Image.fromarray(array).save(buffer, format='PNG', optimize=False)
    return buffer.getvalue()


def save_rgb_png(path: Path, image: np.ndarray) -> None:
    """
    Save an H×W×3 float image in [0,1] as 8-bit RGB PNG

    Args:
        path: Target file
        image: H×W×3 array with values in [0,1]
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H×W×3 image, got shape {image.shape}")
    with atomic_write(path, 'wb') as f:
        f.write(_png_bytes(to_uint8(image)))


def save_uint8_png(path: Path, array: np.ndarray) -> None:
    """Save an 8-bit array (H×W or H×W×3) as PNG"""
    with atomic_write(path, 'wb') as f:
        f.write(_png_bytes(np.asarray(array, dtype=np.uint8)))


def load_rgb_png(path: Path) -> np.ndarray:
    """Load an RGB PNG as H×W×3 float32 in [0,1]"""
    with open(path, 'rb') as f:
        data = f.read()
    if detect_image_format(data) != 'png':
        raise ValueError(f"{path} is not a PNG file")
    with Image.open(io.BytesIO(data)) as img:
        array = np.asarray(img.convert('RGB'), dtype=np.uint8)
    return array.astype(np.float32) / 255.0


def load_uint8_png(path: Path) -> np.ndarray:
    """Load a single-channel PNG as an integer array"""
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.uint8).copy()


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H×W×3 float array -> 3×H×W float32 tensor"""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1).contiguous()


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    """3×H×W tensor -> H×W×3 float array"""
    return tensor.detach().cpu().permute(1, 2, 0).numpy()


def heatmap_to_gray(values: np.ndarray) -> np.ndarray:
    """[0,1] heatmap -> 8-bit grayscale, value = round(255·v)"""
    return to_uint8(values)


def overlay_heatmap(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """
    Alpha-blend a jet-colored heatmap over an image

    Args:
        image: H×W×3 float image in [0,1]
        heatmap: H×W map in [0,1]
        alpha: Heatmap weight

    Returns:
        H×W×3 uint8 overlay
    """
    if heatmap.shape != image.shape[:2]:
        raise ValueError(f"heatmap shape {heatmap.shape} does not match image {image.shape[:2]}")
    colored = colormaps['jet'](np.clip(heatmap, 0.0, 1.0))[..., :3]
    blended = alpha * colored + (1.0 - alpha) * np.asarray(image, dtype=np.float64)
    return to_uint8(blended)


def compose_grid(rows: Sequence[Sequence[np.ndarray]], scale: int = 1, pad: int = 2) -> np.ndarray:
    """
    Tile uint8 H×W×3 panels into one grid image (white padding)

    Args:
        rows: Panels per row; rows may have different lengths
        scale: Nearest-neighbour upscaling factor for each panel
        pad: Padding in pixels between panels
    """
    panels: List[List[np.ndarray]] = []
    for row in rows:
        panels.append([np.kron(p, np.ones((scale, scale, 1), dtype=np.uint8)) for p in row])
    cell_h = max(p.shape[0] for row in panels for p in row)
    cell_w = max(p.shape[1] for row in panels for p in row)
    n_cols = max(len(row) for row in panels)
    height = len(panels) * cell_h + (len(panels) + 1) * pad
    width = n_cols * cell_w + (n_cols + 1) * pad
    grid = np.full((height, width, 3), 255, dtype=np.uint8)
    for r, row in enumerate(panels):
        for c, panel in enumerate(row):
            top = pad + r * (cell_h + pad)
            left = pad + c * (cell_w + pad)
            grid[top:top + panel.shape[0], left:left + panel.shape[1]] = panel
    return grid
