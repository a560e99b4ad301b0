"""FundusPath, DemographicPath and FusionPath as composable torch modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

BACKBONES = ("toy-conv", "vit", "resnet50", "densenet201")


class BackboneWeightsError(RuntimeError):
    """Checkpoint missing or incompatible with the backbone."""


@dataclass
class EncoderConfig:
    backbone: str = "toy-conv"
    image_size: int = 512
    # None keeps the backbone's native embedding (no projection head)
    fundus_feature_dim: int | None = 8
    head_learning_rate: float = 1e-3
    backbone_learning_rate: float = 1e-4
    weights_path: str | None = None
    toy_channels: tuple[int, ...] = (8, 16, 32)
    vit: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.fundus_feature_dim is not None and self.fundus_feature_dim < 1:
            raise ValueError("fundus_feature_dim must be >= 1")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")
        self.toy_channels = tuple(self.toy_channels)


@dataclass
class PathConfig:
    """Layer counts count Linear layers, output layer included; use
    ``demographic_layers=3`` for the reading "two hidden layers + output"."""

    demographic_layers: int = 2
    demographic_standalone_layers: int = 4
    demographic_feature_dim: int = 32
    fusion_layers: int = 4
    hidden_width: int = 64
    dropout_rate: float = 0.2
    negative_slope: float = 0.01

    def __post_init__(self):
        for name in ("demographic_layers", "demographic_standalone_layers", "fusion_layers",
                     "demographic_feature_dim", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")


def mlp(in_dim: int, out_dim: int, n_layers: int, hidden: int, dropout: float,
        slope: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    width = in_dim
    for _ in range(n_layers - 1):
        layers += [nn.Linear(width, hidden), nn.LeakyReLU(slope), nn.Dropout(dropout)]
        width = hidden
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


# ------------------------------------------------------------- backbones

class ToyConvBackbone(nn.Module):
    """Three strided conv blocks and global average pooling."""

    def __init__(self, channels=(8, 16, 32), slope: float = 0.01):
        super().__init__()
        blocks, c_in = [], 3
        for c in channels:
            blocks.append(nn.Sequential(nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                                        nn.LeakyReLU(slope)))
            c_in = c
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed_dim = c_in

    @property
    def target_layer(self) -> nn.Module:
        return self.blocks[-1]

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class TokenGrid(nn.Module):
    """Reshape (B, 1 + h*w, D) tokens to a (B, D, h, w) patch grid."""

    def __init__(self, grid: int):
        super().__init__()
        self.grid = grid

    def forward(self, tokens):
        patches = tokens[:, 1:]
        b, _, d = patches.shape
        return patches.transpose(1, 2).reshape(b, d, self.grid, self.grid)


class ViTBackbone(nn.Module):
    """torchvision ViT returning the final class token.

    The last encoder block's input is routed through :class:`TokenGrid` so
    saliency methods see a spatial patch grid that still feeds the output.
    """

    def __init__(self, image_size: int, patch_size: int = 16, num_layers: int = 24,
                 num_heads: int = 16, hidden_dim: int = 1024, mlp_dim: int = 4096):
        super().__init__()
        from torchvision.models.vision_transformer import VisionTransformer

        self.vit = VisionTransformer(image_size=image_size, patch_size=patch_size,
                                     num_layers=num_layers, num_heads=num_heads,
                                     hidden_dim=hidden_dim, mlp_dim=mlp_dim)
        self.vit.heads = nn.Identity()
        self.grid = TokenGrid(image_size // patch_size)
        self.embed_dim = hidden_dim

    @property
    def target_layer(self) -> nn.Module:
        return self.grid

    def forward(self, x):
        v = self.vit
        x = v._process_input(x)
        cls = v.class_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + v.encoder.pos_embedding
        x = v.encoder.dropout(x)
        layers = list(v.encoder.layers)
        for layer in layers[:-1]:
            x = layer(x)
        grid = self.grid(x)
        x = torch.cat([x[:, :1], grid.flatten(2).transpose(1, 2)], dim=1)
        x = v.encoder.ln(layers[-1](x))
        return x[:, 0]


class TorchvisionCNN(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        import torchvision

        if name == "resnet50":
            net = torchvision.models.resnet50(weights=None)
            self.embed_dim = net.fc.in_features
            net.fc = nn.Identity()
            self._target = net.layer4
        else:
            net = torchvision.models.densenet201(weights=None)
            self.embed_dim = net.classifier.in_features
            net.classifier = nn.Identity()
            self._target = net.features
        self.net = net

    @property
    def target_layer(self) -> nn.Module:
        return self._target

    def forward(self, x):
        return self.net(x)


def timm_vit_to_torchvision(state: dict) -> dict:
    """Rename a timm-style ViT state dict (as RETFound ships) to torchvision keys."""
    out = {}
    for key, value in state.items():
        parts = key.split(".")
        if parts[0] in ("head", "decoder_embed", "mask_token") or key.startswith("decoder"):
            continue
        if key == "cls_token":
            out["vit.class_token"] = value
        elif key == "pos_embed":
            out["vit.encoder.pos_embedding"] = value
        elif key.startswith("patch_embed.proj."):
            out["vit.conv_proj." + parts[-1]] = value
        elif parts[0] in ("norm", "fc_norm"):
            out["vit.encoder.ln." + parts[-1]] = value
        elif parts[0] == "blocks":
            i, rest = parts[1], ".".join(parts[2:])
            prefix = f"vit.encoder.layers.encoder_layer_{i}."
            mapping = {
                "norm1.weight": "ln_1.weight", "norm1.bias": "ln_1.bias",
                "norm2.weight": "ln_2.weight", "norm2.bias": "ln_2.bias",
                "attn.qkv.weight": "self_attention.in_proj_weight",
                "attn.qkv.bias": "self_attention.in_proj_bias",
                "attn.proj.weight": "self_attention.out_proj.weight",
                "attn.proj.bias": "self_attention.out_proj.bias",
                "mlp.fc1.weight": "mlp.0.weight", "mlp.fc1.bias": "mlp.0.bias",
                "mlp.fc2.weight": "mlp.3.weight", "mlp.fc2.bias": "mlp.3.bias",
            }
            if rest not in mapping:
                raise BackboneWeightsError(f"unrecognised ViT key {key!r}")
            out[prefix + mapping[rest]] = value
        else:
            raise BackboneWeightsError(f"unrecognised ViT key {key!r}")
    return out


def load_backbone_weights(backbone: nn.Module, path) -> None:
    path = Path(path)
    if not path.is_file():
        raise BackboneWeightsError(f"backbone weights not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    if isinstance(backbone, ViTBackbone) and any(k.startswith("blocks.") for k in state):
        state = timm_vit_to_torchvision(state)
    if isinstance(backbone, TorchvisionCNN):
        state = {("net." + k if not k.startswith("net.") else k): v for k, v in state.items()
                 if not k.split(".")[0] in ("fc", "classifier")}
    try:
        backbone.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise BackboneWeightsError(f"{path}: {exc}") from None


def build_backbone(cfg: EncoderConfig, require_weights: bool = True) -> nn.Module:
    """``require_weights=False`` builds an uninitialized pretrained architecture
    (used when a full checkpoint will be loaded over it)."""
    if cfg.backbone == "toy-conv":
        net = ToyConvBackbone(cfg.toy_channels)
        if cfg.weights_path:
            load_backbone_weights(net, cfg.weights_path)
        return net
    if cfg.backbone == "vit":
        net = ViTBackbone(cfg.image_size, **cfg.vit)
    else:
        net = TorchvisionCNN(cfg.backbone)
    if not require_weights:
        return net
    if not cfg.weights_path:
        raise BackboneWeightsError(f"backbone {cfg.backbone!r} needs weights_path")
    load_backbone_weights(net, cfg.weights_path)
    return net


# ----------------------------------------------------------------- paths

class FundusPath(nn.Module):
    """Backbone plus a newly initialized linear head.

    ``mode="features"`` emits ``fundus_feature_dim`` values (or the raw
    embedding when that is None); ``mode="logit"`` emits one score.
    """

    def __init__(self, cfg: EncoderConfig, mode: str = "features",
                 backbone: nn.Module | None = None, require_weights: bool = True):
        super().__init__()
        if mode not in ("features", "logit"):
            raise ValueError(f"mode must be 'features' or 'logit', got {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.backbone = backbone if backbone is not None else build_backbone(cfg, require_weights)
        if mode == "logit":
            self.head = nn.Linear(self.backbone.embed_dim, 1)
            self.out_dim = 1
        elif cfg.fundus_feature_dim is None:
            self.head = nn.Identity()
            self.out_dim = self.backbone.embed_dim
        else:
            self.head = nn.Linear(self.backbone.embed_dim, cfg.fundus_feature_dim)
            self.out_dim = cfg.fundus_feature_dim

    def forward(self, images):
        if images.shape[-1] != self.cfg.image_size or images.shape[-2] != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}px images, got {tuple(images.shape[-2:])}")
        return self.head(self.backbone(images))


class DemographicPath(nn.Module):
    """FCNN on (standardized age, gender code)."""

    def __init__(self, cfg: PathConfig, mode: str = "features", in_dim: int = 2):
        super().__init__()
        if mode not in ("features", "logit"):
            raise ValueError(f"mode must be 'features' or 'logit', got {mode!r}")
        self.mode = mode
        if mode == "features":
            self.out_dim = cfg.demographic_feature_dim
            n_layers = cfg.demographic_layers
        else:
            self.out_dim = 1
            n_layers = cfg.demographic_standalone_layers
        self.net = mlp(in_dim, self.out_dim, n_layers, cfg.hidden_width,
                       cfg.dropout_rate, cfg.negative_slope)

    def forward(self, demo):
        if not torch.all(torch.isfinite(demo)):
            raise ValueError("demographic inputs must be finite")
        return self.net(demo)


class FusionPath(nn.Module):
    """FCNN mapping a concatenated vector of fixed width to one logit."""

    def __init__(self, in_width: int, cfg: PathConfig):
        super().__init__()
        self.in_width = in_width
        self.net = mlp(in_width, 1, cfg.fusion_layers, cfg.hidden_width,
                       cfg.dropout_rate, cfg.negative_slope)

    def forward(self, fused):
        if fused.shape[-1] != self.in_width:
            raise ValueError(f"fusion input width {fused.shape[-1]} != expected {self.in_width}")
        return self.net(fused)


def _eval_call(module: nn.Module, *args):
    was = module.training
    module.eval()
    try:
        with torch.no_grad():
            return module(*args)
    finally:
        module.train(was)


def fundus_encode(path: FundusPath, images):
    """Evaluation-mode forward (deterministic)."""
    return _eval_call(path, images)


def demographic_forward(path: DemographicPath, inputs):
    return _eval_call(path, inputs)


def fusion_forward(path: FusionPath, fused):
    return _eval_call(path, fused)
