"""Grad-CAM saliency maps over the fundus encoder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn


@dataclass
class SaliencyMap:
    grid: np.ndarray        # (H, W) in [0, 1]
    target_layer: str
    image_id: str
    raw: np.ndarray         # rectified map at layer resolution, before upsampling


def default_target_layer(model: nn.Module) -> nn.Module:
    for owner in (model, getattr(model, "fundus", None), getattr(model, "backbone", None)):
        if owner is None:
            continue
        if hasattr(owner, "target_layer"):
            return owner.target_layer
        backbone = getattr(owner, "backbone", None)
        if backbone is not None and hasattr(backbone, "target_layer"):
            return backbone.target_layer
    raise ValueError(f"{type(model).__name__} has no fundus encoder to explain")


def _layer_name(model: nn.Module, layer: nn.Module) -> str:
    for name, mod in model.named_modules():
        if mod is layer:
            return name or type(layer).__name__
    return type(layer).__name__


def normalize_map(cam: torch.Tensor) -> torch.Tensor:
    """Min-max to [0, 1]; an all-zero map stays zero, another constant map becomes one."""
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return torch.zeros_like(cam) if hi == 0 else torch.ones_like(cam)


def grad_cam(model: nn.Module, inputs, target_layer: nn.Module | None = None,
             image_id: str = "") -> SaliencyMap:
    """Saliency for the positive-class logit of a single image.

    ``inputs`` is whatever ``model`` consumes: an image tensor (1, 3, H, W) or
    a dict with an ``images`` entry of that shape.
    """
    images = inputs["images"] if isinstance(inputs, dict) else inputs
    if images is None or images.ndim != 4 or images.shape[0] != 1:
        raise ValueError("grad_cam explains one image: expected a (1, 3, H, W) tensor")
    layer = target_layer if target_layer is not None else default_target_layer(model)
    captured = {}

    def hook(_mod, _inp, out):
        captured["act"] = out

    handle = layer.register_forward_hook(hook)
    was = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logit = model(inputs).reshape(-1)
            if logit.numel() != 1:
                raise ValueError("model must return one logit for the image")
            act = captured.get("act")
            if act is None:
                raise ValueError("target layer was not reached in the forward pass")
            if act.ndim != 4:
                raise ValueError(f"target layer output has shape {tuple(act.shape)}; "
                                 "Grad-CAM needs spatial (N, C, h, w) activations")
            grad, = torch.autograd.grad(logit[0], act)
    finally:
        handle.remove()
        model.train(was)

    with torch.no_grad():
        weights = grad.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * act).sum(dim=1, keepdim=True))
        up = F.interpolate(cam, size=images.shape[-2:], mode="bilinear", align_corners=False)
        up = up.clamp(min=0)
        grid = normalize_map(up[0, 0])
    return SaliencyMap(grid.double().numpy(), _layer_name(model, layer), image_id,
                       cam[0, 0].double().numpy())


def overlay(image: np.ndarray, grid: np.ndarray, colormap: str = "jet", alpha: float = 0.4) -> np.ndarray:
    """Blend a colour-mapped saliency grid onto an HxWx3 image in [0, 1]."""
    from matplotlib import colormaps

    heat = colormaps[colormap](grid)[..., :3]
    base = np.clip(image, 0, 1)
    return np.clip((1 - alpha) * base + alpha * heat, 0, 1)


def save_saliency(smap: SaliencyMap, image: np.ndarray, out_dir, colormap: str = "jet",
                  alpha: float = 0.4) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = "".join(c if c.isalnum() or c in "-_" else "_" for c in smap.image_id) or "image"
    png, npy = out_dir / f"{stem}.png", out_dir / f"{stem}.npy"
    rgb = overlay(image, smap.grid, colormap, alpha)
    Image.fromarray((rgb * 255).round().astype(np.uint8)).save(png)
    np.save(npy, smap.grid)
    return [png, npy]


def select_positive(table, k: int, seed: int) -> np.ndarray:
    """Row indices of ``k`` randomly chosen positive-label images."""
    pos = np.flatnonzero(np.asarray(table.label) == 1)
    if len(pos) == 0:
        raise ValueError("no positive-labelled images to explain")
    k = min(k, len(pos))
    return np.sort(np.random.default_rng(seed).choice(pos, size=k, replace=False))


def explain_batch(model: nn.Module, table, k: int = 8, seed: int = 0, out_dir=None,
                  colormap: str = "jet") -> tuple[list[SaliencyMap], list[Path]]:
    if table.images is None:
        raise ValueError("explaining needs a table with images")
    maps, files = [], []
    for i in select_positive(table, k, seed):
        inputs, _ = table.batch([i])
        smap = grad_cam(model, inputs, image_id=str(table.image_id[i]))
        maps.append(smap)
        if out_dir is not None:
            files += save_saliency(smap, table.images[i], out_dir, colormap)
    return maps, files
