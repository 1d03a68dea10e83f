"""Attention figures"""
import numpy as np
import torch
import torch.nn as nn

from src.services import visualize_service
from src.services.attack_service import PerturbationGenerator
from src.utils import imaging

EPS16 = 16 / 255


def _generator():
    torch.manual_seed(0)
    G = PerturbationGenerator(EPS16)
    nn.init.normal_(G.out[1].weight, std=0.5)
    return G.eval()


def test_compute_panels_shapes(tiny_bundle, tiny_split):
    panels = visualize_service.compute_panels(tiny_bundle, tiny_split.images[:2], _generator(), EPS16)
    assert panels.co.shape == panels.anti.shape == panels.adversarial_attention.shape == (2, 32, 32)
    assert np.allclose(panels.co + panels.anti, 1.0, atol=1e-6)
    assert (panels.adversarial - panels.clean).abs().max().item() <= EPS16 + 1e-6


def test_write_figures_with_snapshot_strip(tiny_bundle, tiny_split, tmp_path):
    snapshots = {
        'epochs': np.array([5, 10]),
        'indices': np.array([3]),
        'maps': np.random.default_rng(0).uniform(size=(2, 1, 32, 32)).astype(np.float32),
    }
    images = tiny_split.images[[2, 3]]
    paths = visualize_service.write_figures(tiny_bundle, images, [2, 3], _generator(), EPS16, tmp_path,
                                            scale=1, snapshots=snapshots)
    assert [p.name for p in paths] == ['grid_00002.png', 'grid_00003.png']

    with_strip = imaging.load_uint8_png(paths[1])
    without_strip = imaging.load_uint8_png(paths[0])
    # five panels per row, 2 px padding
    assert without_strip.shape == (32 + 4, 5 * 32 + 6 * 2, 3)
    assert with_strip.shape == (2 * 32 + 3 * 2, 5 * 32 + 6 * 2, 3)
    for name in ('co', 'anti', 'adv'):
        heatmap = imaging.load_uint8_png(tmp_path / 'heatmaps' / f"{name}_00002.png")
        assert heatmap.shape == (32, 32)
    assert (tmp_path / 'adversarial' / 'adv_00003.png').exists()


def test_snapshot_row_skips_unknown_ids():
    image = np.zeros((32, 32, 3))
    snapshots = {'epochs': np.array([1]), 'indices': np.array([0]), 'maps': np.zeros((1, 1, 32, 32))}
    assert visualize_service.snapshot_row(image, 5, snapshots, 0.5) == []
    assert visualize_service.snapshot_row(image, 0, None, 0.5) == []
    assert len(visualize_service.snapshot_row(image, 0, snapshots, 0.5)) == 1
