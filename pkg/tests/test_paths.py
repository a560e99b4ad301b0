import numpy as np
import pytest
import torch

from fundusfusion.fusion import FusionSpec, assemble
from fundusfusion.paths import (
    BackboneWeightsError,
    DemographicPath,
    EncoderConfig,
    FundusPath,
    FusionPath,
    PathConfig,
    ToyConvBackbone,
    ViTBackbone,
    build_backbone,
    demographic_forward,
    fundus_encode,
    fusion_forward,
    timm_vit_to_torchvision,
)
from fundusfusion.training import bce_loss


def test_fundus_features_shape_at_default_size():
    torch.manual_seed(0)
    path = FundusPath(EncoderConfig(image_size=512), "features")
    out = fundus_encode(path, torch.randn(16, 3, 512, 512))
    assert out.shape == (16, 8)


def test_fundus_logit_mode_and_eval_determinism():
    torch.manual_seed(0)
    path = FundusPath(EncoderConfig(image_size=32), "logit")
    x = torch.randn(4, 3, 32, 32)
    a, b = fundus_encode(path, x), fundus_encode(path, x)
    assert a.shape == (4, 1)
    assert torch.equal(a, b)


def test_native_feature_mode_skips_projection():
    path = FundusPath(EncoderConfig(image_size=32, fundus_feature_dim=None, toy_channels=(4, 6, 10)))
    assert path.out_dim == 10
    assert fundus_encode(path, torch.zeros(2, 3, 32, 32)).shape == (2, 10)


def test_zero_head_gives_zero_features():
    path = FundusPath(EncoderConfig(image_size=32), "features")
    with torch.no_grad():
        path.head.weight.zero_()
        path.head.bias.zero_()
    assert torch.count_nonzero(fundus_encode(path, torch.zeros(3, 3, 32, 32))) == 0


def test_wrong_image_size_rejected():
    path = FundusPath(EncoderConfig(image_size=32))
    with pytest.raises(ValueError, match="32px"):
        path(torch.zeros(1, 3, 64, 64))


def test_demographic_feature_and_logit_variants():
    cfg = PathConfig()
    feat = DemographicPath(cfg, "features")
    logit = DemographicPath(cfg, "logit")
    x = torch.randn(5, 2)
    assert demographic_forward(feat, x).shape == (5, 32)
    assert demographic_forward(logit, x).shape == (5, 1)
    linear = lambda m: sum(isinstance(l, torch.nn.Linear) for l in m.net)
    assert linear(feat) == 2 and linear(logit) == 4
    assert torch.equal(demographic_forward(feat, x), demographic_forward(feat, x))


def test_demographic_hand_propagated_single_unit():
    cfg = PathConfig(demographic_layers=2, demographic_feature_dim=1, hidden_width=1,
                     dropout_rate=0.0, negative_slope=0.1)
    path = DemographicPath(cfg, "features")
    first, last = path.net[0], path.net[-1]
    with torch.no_grad():
        first.weight.copy_(torch.tensor([[-2.0, 0.5]]))
        first.bias.fill_(0.25)
        last.weight.fill_(3.0)
        last.bias.fill_(-1.0)
    # hidden = leaky(-2*1 + 0.5*0 + 0.25) = 0.1 * -1.75; out = 3*h - 1
    expected = 3.0 * (0.1 * -1.75) - 1.0
    out = demographic_forward(path, torch.tensor([[1.0, 0.0]]))
    assert out.item() == pytest.approx(expected, abs=1e-7)


def test_demographic_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        DemographicPath(PathConfig())(torch.tensor([[float("nan"), 1.0]]))


def test_fusion_width_contract():
    cfg = PathConfig()
    path = FusionPath(40, cfg)
    assert fusion_forward(path, torch.randn(3, 40)).shape == (3, 1)
    with pytest.raises(ValueError, match="39"):
        path(torch.randn(3, 39))
    assert fusion_forward(FusionPath(2, cfg), torch.randn(3, 2)).shape == (3, 1)


def test_zero_fusion_weights_give_zero_logit():
    path = FusionPath(40, PathConfig())
    with torch.no_grad():
        for p in path.parameters():
            p.zero_()
    assert torch.count_nonzero(fusion_forward(path, torch.randn(6, 40) * 100)) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(fundus_feature_dim=0)
    with pytest.raises(ValueError):
        EncoderConfig(backbone="alexnet")
    with pytest.raises(ValueError):
        PathConfig(fusion_layers=0)
    with pytest.raises(ValueError):
        PathConfig(dropout_rate=1.0)


def _sampled_gradient_errors(model, inputs, y, per_block=4, eps=1e-5):
    """Relative errors between autograd and central differences for a few
    parameter entries in every block."""
    gen = torch.Generator().manual_seed(3)
    errors = {}
    for name, block in model.blocks().items():
        errs = []
        params = [p for p in block.parameters() if p.requires_grad]
        for _ in range(per_block):
            p = params[int(torch.randint(len(params), (1,), generator=gen))]
            flat = p.data.view(-1)
            j = int(torch.randint(flat.numel(), (1,), generator=gen))
            model.zero_grad()
            bce_loss(model(inputs), y).backward()
            analytic = p.grad.view(-1)[j].item()
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + eps
                up = bce_loss(model(inputs), y).item()
                flat[j] = orig - eps
                down = bce_loss(model(inputs), y).item()
                flat[j] = orig
            numeric = (up - down) / (2 * eps)
            errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        errors[name] = errs
    return errors


def test_joint_forward_gradients_match_finite_differences():
    enc = EncoderConfig(image_size=16, toy_channels=(3, 4, 5))
    spec = FusionSpec("intermediate", encoder=enc, paths=PathConfig(dropout_rate=0.0, hidden_width=8),
                      seed=1)
    model = assemble(spec).double()
    model.eval()
    g = torch.Generator().manual_seed(0)
    inputs = {"images": torch.randn(4, 3, 16, 16, generator=g, dtype=torch.float64),
              "demo": torch.randn(4, 2, generator=g, dtype=torch.float64)}
    y = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    errors = _sampled_gradient_errors(model, inputs, y)
    assert set(errors) == {"fundus", "demographic", "fusion"}
    for block, errs in errors.items():
        assert max(errs) < 1e-4, (block, errs)


def test_pretrained_backbones_require_weights(tmp_path):
    with pytest.raises(BackboneWeightsError, match="weights_path"):
        build_backbone(EncoderConfig(backbone="resnet50", image_size=64))
    with pytest.raises(BackboneWeightsError, match="not found"):
        build_backbone(EncoderConfig(backbone="resnet50", image_size=64,
                                     weights_path=str(tmp_path / "nope.pt")))


def test_toy_weights_round_trip_and_mismatch(tmp_path):
    src = ToyConvBackbone((4, 6, 8))
    torch.save(src.state_dict(), tmp_path / "toy.pt")
    net = build_backbone(EncoderConfig(image_size=32, toy_channels=(4, 6, 8),
                                       weights_path=str(tmp_path / "toy.pt")))
    for a, b in zip(src.state_dict().values(), net.state_dict().values()):
        assert torch.equal(a, b)
    with pytest.raises(BackboneWeightsError):
        build_backbone(EncoderConfig(image_size=32, toy_channels=(4, 6, 9),
                                     weights_path=str(tmp_path / "toy.pt")))


TINY_VIT = dict(patch_size=8, num_layers=2, num_heads=2, hidden_dim=16, mlp_dim=32)


def test_vit_backbone_loads_checkpoint_and_exposes_patch_grid(tmp_path):
    torch.manual_seed(0)
    src = ViTBackbone(32, **TINY_VIT)
    torch.save({"model": src.state_dict()}, tmp_path / "vit.pt")
    path = FundusPath(EncoderConfig(backbone="vit", image_size=32, vit=TINY_VIT,
                                    weights_path=str(tmp_path / "vit.pt")))
    x = torch.randn(2, 3, 32, 32)
    assert fundus_encode(path, x).shape == (2, 8)
    grid = path.backbone.target_layer(torch.randn(2, 1 + 16, 16))
    assert grid.shape == (2, 16, 4, 4)
    # the grid detour must not change the encoder's output
    src.eval()
    with torch.no_grad():
        reference = src.vit(x)
        assert torch.allclose(src(x), reference, atol=1e-6)


def test_timm_key_conversion():
    state = {"cls_token": 1, "pos_embed": 2, "patch_embed.proj.weight": 3,
             "blocks.0.attn.qkv.weight": 4, "blocks.0.mlp.fc2.bias": 5, "norm.weight": 6,
             "head.weight": 7, "decoder_pred.bias": 8}
    out = timm_vit_to_torchvision(state)
    assert out == {"vit.class_token": 1, "vit.encoder.pos_embedding": 2,
                   "vit.conv_proj.weight": 3,
                   "vit.encoder.layers.encoder_layer_0.self_attention.in_proj_weight": 4,
                   "vit.encoder.layers.encoder_layer_0.mlp.3.bias": 5,
                   "vit.encoder.ln.weight": 6}
    with pytest.raises(BackboneWeightsError):
        timm_vit_to_torchvision({"blocks.0.weird": 1})
