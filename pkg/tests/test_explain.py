"""Grad-CAM channel weights, map normalisation and heatmap overlays."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from mammo.errors import InvalidClass, ShapeMismatch
from mammo.explain import SaliencyMap, gradcam, overlay, overlay_and_export
from mammo.ingest import ImageTensor
from mammo.models import attach_head, build_backbone


class _PooledConv(nn.Module):
    """logit = W . mean(conv(x)); d logit / d A_k is W_k / (rows * cols) everywhere."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(0)
        self.conv = nn.Conv2d(1, 4, 3, padding=1)
        self.head = nn.Linear(4, 2)

    def forward(self, x):
        return self.head(self.conv(x.unsqueeze(1)).mean(dim=(2, 3)))


def _image(rows=12, cols=8, seed=0):
    return np.random.default_rng(seed).random((rows, cols))


def test_channel_weights_match_finite_differences():
    model = _PooledConv().double()
    img = _image()
    saliency = gradcam(model, img, target_class=1, layer=model.conv)
    assert saliency.source_layer == "conv"

    # shifting channel k's bias moves every activation of A_k at once
    x = torch.as_tensor(img).unsqueeze(0)
    eps = 1e-6
    numeric = []
    for k in range(4):
        with torch.no_grad():
            model.conv.bias[k] += eps
            up = float(model(x)[0, 1])
            model.conv.bias[k] -= 2 * eps
            down = float(model(x)[0, 1])
            model.conv.bias[k] += eps
        numeric.append((up - down) / (2 * eps) / img.size)
    assert np.allclose(saliency.channel_weights, numeric, atol=1e-6)
    assert np.allclose(saliency.channel_weights,
                       model.head.weight[1].detach().numpy() / img.size)


def test_grid_is_normalised_to_image_size():
    model = _PooledConv()
    saliency = gradcam(model, _image(), target_class=0, layer=model.conv)
    assert saliency.shape == (12, 8)
    assert saliency.grid.min() >= 0.0
    assert saliency.grid.max() == pytest.approx(1.0) or saliency.grid.max() == 0.0


def test_backbone_default_layer():
    model = attach_head(build_backbone(stage_blocks=(1, 1, 1, 1), seed=0), "baseline")
    img = ImageTensor(_image(64, 32).astype(np.float32))
    saliency = gradcam(model, img, target_class=0)
    assert saliency.source_layer == "backbone.layer4"
    assert saliency.shape == (64, 32) and saliency.channel_weights.shape == (512,)
    assert np.isfinite(saliency.grid).all()
    assert 0.0 <= saliency.grid.min() <= saliency.grid.max() <= 1.0


def test_invalid_class_and_shape():
    model = _PooledConv()
    with pytest.raises(InvalidClass):
        gradcam(model, _image(), target_class=2, layer=model.conv)
    with pytest.raises(ShapeMismatch):
        gradcam(model, np.zeros((2, 12, 8)), target_class=0, layer=model.conv)


def _saliency(grid):
    return SaliencyMap(grid=grid.astype(np.float32), target_class=0, source_layer="x",
                       channel_weights=np.zeros(1))


def test_zero_map_overlay_is_the_gray_image():
    gray = ImageTensor(np.full((6, 4), 0.2, np.float32))
    rgb = overlay(_saliency(np.zeros((6, 4))), gray, alpha=0.4)
    assert rgb.shape == (6, 4, 3)
    assert np.allclose(rgb, 0.2)


def test_hot_region_turns_red():
    gray = ImageTensor(np.full((6, 4), 0.2, np.float32))
    grid = np.zeros((6, 4))
    grid[:2] = 1.0
    rgb = overlay(_saliency(grid), gray, alpha=0.4)
    assert (rgb[:2, :, 0] > 0.2).all() and (rgb[:2, :, 1] < 0.2).all()
    assert np.allclose(rgb[2:], 0.2)
    with pytest.raises(ShapeMismatch):
        overlay(_saliency(np.zeros((3, 4))), gray)


def test_overlay_export(tmp_path):
    gray = ImageTensor(np.full((6, 4), 0.5, np.float32))
    grid = np.linspace(0, 1, 24).reshape(6, 4)
    path = overlay_and_export(_saliency(grid), gray, tmp_path / "cam" / "a.png")
    with Image.open(path) as im:
        assert im.mode == "RGB" and im.size == (4, 6)


def test_gradcam_restores_training_mode():
    model = _PooledConv().train()
    gradcam(model, _image(), target_class=1, layer=model.conv)
    assert model.training
    model.eval()
    gradcam(model, _image(), target_class=1, layer=model.conv)
    assert not model.training
