"""Class activation maps over the final feature map."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from ..model import LEPDNet

log = logging.getLogger(__name__)


@torch.no_grad()
def cam(model: LEPDNet, image: np.ndarray, location: np.ndarray, target_class: int):
    """Return ``(heatmap, overlay)`` for one patch.

    The heatmap is the classifier-weighted channel sum of the final feature
    map, passed through ReLU, min-max scaled and bilinearly upsampled to the
    input size. A constant map yields all zeros.
    """
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        img = torch.as_tensor(np.asarray(image), dtype=dtype)[None, None]
        loc = torch.as_tensor(np.asarray(location), dtype=dtype)[None]
        z, _ = model.features(img, loc)
    finally:
        model.train(was_training)
    weights = model.head.weight[target_class]
    heat = torch.relu(torch.einsum("c,chw->hw", weights, z[0]))
    lo, hi = heat.min(), heat.max()
    size = img.shape[-2:]
    if float(hi - lo) <= 0:
        log.warning("CAM for class %d is constant; returning zeros", target_class)
        heatmap = np.zeros(tuple(size), dtype=np.float32)
    else:
        heat = (heat - lo) / (hi - lo)
        up = F.interpolate(heat[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]
        heatmap = up.clamp(0, 1).cpu().numpy().astype(np.float32)
    return heatmap, overlay(np.asarray(image), heatmap)


def overlay(image: np.ndarray, heatmap: np.ndarray, opacity: float = 0.45) -> np.ndarray:
    colored = colormaps["jet"](heatmap)[..., :3]
    gray = np.repeat(np.clip(image, 0, 1)[..., None], 3, axis=-1)
    return np.round(255 * ((1 - opacity) * gray + opacity * colored)).astype(np.uint8)


def save_overlay(path, overlay_rgb: np.ndarray) -> None:
    Image.fromarray(overlay_rgb, mode="RGB").save(path)


def mass_ratio_hit(heatmap: np.ndarray, bbox, border_fraction: float = 0.25) -> bool:
    """True when mean activation inside ``bbox`` exceeds the border-band mean."""
    h, w = heatmap.shape
    x0, y0, x1, y1 = bbox
    inside = heatmap[y0:y1, x0:x1].mean()
    band = np.ones_like(heatmap, dtype=bool)
    by, bx = int(round(border_fraction * h)), int(round(border_fraction * w))
    band[by:h - by, bx:w - bx] = False
    return bool(inside > heatmap[band].mean())
