"""Grad-CAM saliency over a convolutional stage, and heatmap overlays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image
from torch import nn

from .errors import InvalidClass, IoFailure, NonFiniteGradient, ShapeMismatch
from .ingest import ImageTensor, to_uint8
from .logging import get_logger
from .util import PathLike

log = get_logger(__name__)

DEFAULT_ALPHA = 0.4
DEFAULT_COLORMAP = "jet"


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    grid: np.ndarray  # (rows, cols) in [0, 1]
    target_class: int
    source_layer: str
    channel_weights: np.ndarray

    @property
    def shape(self):
        return self.grid.shape


def _default_layer(model: nn.Module) -> nn.Module:
    backbone = getattr(model, "backbone", None)
    if backbone is not None and hasattr(backbone, "layer4"):
        return backbone.layer4
    raise ValueError("model has no backbone.layer4; pass the layer explicitly")


def _layer_name(model: nn.Module, layer: nn.Module) -> str:
    for name, module in model.named_modules():
        if module is layer:
            return name
    return type(layer).__name__


def _as_batch(img: Union[ImageTensor, np.ndarray, torch.Tensor], dtype) -> torch.Tensor:
    if isinstance(img, ImageTensor):
        img = img.pixels
    x = torch.as_tensor(np.asarray(img) if not isinstance(img, torch.Tensor) else img)
    if x.dim() != 2:
        raise ShapeMismatch(f"expected a single (rows, cols) image, got {tuple(x.shape)}")
    return x.to(dtype).unsqueeze(0)


def gradcam(model: nn.Module, img: Union[ImageTensor, np.ndarray, torch.Tensor],
            target_class: int, layer: Optional[nn.Module] = None) -> SaliencyMap:
    """Grad-CAM of ``target_class``'s logit (pre-softmax / pre-sigmoid) at ``layer``.

    Channel weights are the spatial mean of d(logit)/d(activation); the map is
    ReLU(sum_k w_k A_k), upsampled bilinearly to the image size and divided by its max.
    """
    layer = layer if layer is not None else _default_layer(model)
    param = next(model.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    device = param.device if param is not None else torch.device("cpu")
    x = _as_batch(img, dtype).to(device).requires_grad_(True)

    captured = {}
    handle = layer.register_forward_hook(lambda _m, _i, out: captured.__setitem__("a", out))
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
    finally:
        handle.remove()
        model.train(was_training)
    if not 0 <= int(target_class) < logits.shape[1]:
        raise InvalidClass(f"class {target_class} out of range for {logits.shape[1]} outputs")

    activations = captured["a"]
    (grads,) = torch.autograd.grad(logits[0, int(target_class)], activations, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(activations)
    if not torch.isfinite(grads).all():
        raise NonFiniteGradient(f"non-finite gradient at {_layer_name(model, layer)}")

    with torch.no_grad():
        weights = grads[0].mean(dim=(1, 2))
        raw = F.relu((weights[:, None, None] * activations[0]).sum(dim=0))
        up = F.interpolate(raw[None, None], size=tuple(x.shape[-2:]), mode="bilinear",
                           align_corners=False)[0, 0].clamp_min(0)
        peak = up.max()
        grid = up / peak if peak > 0 else torch.zeros_like(up)
    return SaliencyMap(grid=grid.cpu().numpy().astype(np.float32), target_class=int(target_class),
                       source_layer=_layer_name(model, layer),
                       channel_weights=weights.detach().cpu().numpy())


def overlay(saliency: SaliencyMap, img: ImageTensor, alpha: float = DEFAULT_ALPHA,
            cmap: str = DEFAULT_COLORMAP) -> np.ndarray:
    """RGB [0, 1] blend: per-pixel weight ``alpha * map`` on the colormapped heat."""
    gray = img.pixels if isinstance(img, ImageTensor) else np.asarray(img)
    if saliency.grid.shape != gray.shape:
        raise ShapeMismatch(f"map {saliency.grid.shape} vs image {gray.shape}")
    heat = colormaps[cmap](saliency.grid)[..., :3]
    weight = (alpha * saliency.grid)[..., None]
    return (1.0 - weight) * gray[..., None] + weight * heat


def overlay_and_export(saliency: SaliencyMap, img: ImageTensor, path: PathLike,
                       alpha: float = DEFAULT_ALPHA, cmap: str = DEFAULT_COLORMAP) -> Path:
    rgb = overlay(saliency, img, alpha, cmap)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(rgb)).save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    log.debug("Wrote Grad-CAM overlay %s", path)
    return path
