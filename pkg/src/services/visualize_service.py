"""Figures: co/anti/adversarial attention overlays and training-iteration strips"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..utils import attention, imaging
from .attack_service import PerturbationGenerator, apply_generator, task_attention
from .model_service import TaskModelBundle

logger = logging.getLogger(__name__)


@dataclass
class AttentionPanels:
    """Per-image maps of one figure batch, all N×H×W except the images"""
    clean: torch.Tensor
    adversarial: torch.Tensor
    co: np.ndarray
    anti: np.ndarray
    adversarial_attention: np.ndarray


def compute_panels(bundle: TaskModelBundle, images: torch.Tensor, G: PerturbationGenerator,
                   epsilon: float) -> AttentionPanels:
    """
    Co-attention and anti-attention of clean images, the CTA image and D's attention on it

    Args:
        bundle: Frozen task models and extractor D
        images: N×3×H×W clean images
        G: Trained generator
        epsilon: Epsilon used to clip the generator output
    """
    task_maps = [
        task_attention(bundle.task_model(task), bundle.taps[task], task, images, bundle.det_threshold)
        for task in ('cls', 'det', 'seg')
    ]
    co = attention.co_attention(task_maps)
    anti = attention.anti_attention(co)
    adversarial = apply_generator(G, images, epsilon)
    adv_map = task_attention(bundle.extractor_D, bundle.taps['D'], 'cls', adversarial)
    return AttentionPanels(
        clean=images.detach(),
        adversarial=adversarial,
        co=co.values.detach().cpu().numpy(),
        anti=anti.values.detach().cpu().numpy(),
        adversarial_attention=adv_map.values.detach().cpu().numpy(),
    )


def snapshot_row(image: np.ndarray, image_id: int, snapshots: Optional[Dict[str, np.ndarray]],
                 alpha: float) -> List[np.ndarray]:
    """Overlays of the adversarial attention recorded at each snapshot epoch (empty if not retained)"""
    if not snapshots:
        return []
    indices = [int(i) for i in snapshots['indices']]
    if image_id not in indices:
        return []
    column = indices.index(image_id)
    maps = snapshots['maps']
    if maps[0, column].shape != image.shape[:2]:
        logger.warning(f"Snapshot size {maps[0, column].shape} does not match image {image.shape[:2]}, skipping")
        return []
    return [imaging.overlay_heatmap(image, maps[e, column], alpha) for e in range(maps.shape[0])]


def render_grid(panels: AttentionPanels, i: int, alpha: float, scale: int,
                iteration_strip: Sequence[np.ndarray] = ()) -> np.ndarray:
    """
    Grid for image i: clean, co overlay, anti overlay, adversarial, adversarial attention overlay

    A second row holds the per-epoch attention snapshots when given.
    """
    clean = imaging.tensor_to_image(panels.clean[i])
    adversarial = imaging.tensor_to_image(panels.adversarial[i])
    rows = [[
        imaging.to_uint8(clean),
        imaging.overlay_heatmap(clean, panels.co[i], alpha),
        imaging.overlay_heatmap(clean, panels.anti[i], alpha),
        imaging.to_uint8(adversarial),
        imaging.overlay_heatmap(adversarial, panels.adversarial_attention[i], alpha),
    ]]
    if iteration_strip:
        rows.append(list(iteration_strip))
    return imaging.compose_grid(rows, scale=scale)


def write_figures(bundle: TaskModelBundle, images: torch.Tensor, image_ids: Sequence[int],
                  G: PerturbationGenerator, epsilon: float, out_dir: Path, alpha: float = 0.5,
                  scale: int = 2, snapshots: Optional[Dict[str, np.ndarray]] = None) -> List[Path]:
    """
    Write one grid PNG per image plus the raw heatmaps as grayscale PNGs

    Args:
        bundle: Frozen task models and extractor D
        images: N×3×H×W held-out images selected by image_ids
        image_ids: Dataset ids of the images (used in file names)
        G: Trained generator at the figure epsilon
        epsilon: Figure epsilon
        out_dir: Figures directory
        alpha: Heatmap weight in the overlays
        scale: Upscaling factor of each grid cell
        snapshots: Output of checkpoint_service.load_snapshots, if any

    Returns:
        Grid PNG paths
    """
    if images.shape[0] != len(image_ids):
        raise ValueError(f"got {images.shape[0]} images for {len(image_ids)} ids")
    out_dir = Path(out_dir)
    panels = compute_panels(bundle, images, G, epsilon)
    written = []
    for i, image_id in enumerate(image_ids):
        clean = imaging.tensor_to_image(panels.clean[i])
        strip = snapshot_row(clean, image_id, snapshots, alpha)
        grid_path = out_dir / f"grid_{image_id:05d}.png"
        imaging.save_uint8_png(grid_path, render_grid(panels, i, alpha, scale, strip))
        for name, maps in (('co', panels.co), ('anti', panels.anti), ('adv', panels.adversarial_attention)):
            imaging.save_uint8_png(out_dir / 'heatmaps' / f"{name}_{image_id:05d}.png", imaging.heatmap_to_gray(maps[i]))
        imaging.save_rgb_png(out_dir / 'adversarial' / f"adv_{image_id:05d}.png",
                             imaging.tensor_to_image(panels.adversarial[i]))
        written.append(grid_path)
        logger.info(f"Saved figure for image {image_id} ({len(strip)} snapshot epochs)")
    return written
