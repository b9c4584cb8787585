import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import pytest
import torch

from controllab.backbone import BackboneConfig, build_backbone, group_count, timestep_embedding
from controllab.diffusion import ShapeMismatchError
from controllab.registry import ParamRegistry

REPO_ROOT = Path(__file__).parent.parent


def conv(cin, cout, k):
    return cout * cin * k * k + cout


def norm(c):
    return 2 * c


def linear(i, o):
    return i * o + o


def res_block(cin, cout, temb):
    skip = conv(cin, cout, 1) if cin != cout else 0
    return norm(cin) + conv(cin, cout, 3) + linear(temb, cout) + norm(cout) + conv(cout, cout, 3) + skip


def test_build_backbone_is_deterministic(tiny_backbone_cfg):
    """Same config and seed give bit-identical parameters and registries."""
    a, reg_a, port_a = build_backbone(tiny_backbone_cfg, seed=7)
    b, reg_b, port_b = build_backbone(tiny_backbone_cfg, seed=7)
    assert reg_a.names() == reg_b.names()
    assert port_a == port_b
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name


def test_different_seeds_differ(tiny_backbone_cfg):
    """Different seeds give different initial weights."""
    a, _, _ = build_backbone(tiny_backbone_cfg, seed=0)
    b, _, _ = build_backbone(tiny_backbone_cfg, seed=1)
    assert not torch.equal(a.conv_in.weight, b.conv_in.weight)


def test_registry_total_matches_shape_enumeration(tiny_backbone_cfg):
    """The tiny config's parameter count equals a layer-by-layer enumeration."""
    # Arrange
    temb = 16
    expected = (
        2 * linear(temb, temb)  # time_embed
        + conv(1, 8, 3)  # conv_in
        + res_block(8, 8, temb) + conv(8, 8, 3)  # down.0 + downsample
        + res_block(8, 16, temb)  # down.1
        + conv(16, 16, 1) + 2 * res_block(16, 16, temb)  # mid
        + res_block(32, 16, temb) + conv(16, 16, 3)  # up.1 + upsample
        + res_block(24, 8, temb)  # up.0
        + norm(8) + conv(8, 1, 3)  # output head
    )

    # Act
    model, registry, _ = build_backbone(tiny_backbone_cfg, seed=0)

    # Assert
    assert registry.total() == expected
    assert registry.total() == sum(p.numel() for p in model.parameters())


def test_default_registry_total_matches_shape_enumeration():
    """The default 64px config is enumerated level by level as well."""
    # Arrange
    temb = 128
    expected = (
        2 * linear(temb, temb)  # time_embed
        + conv(1, 32, 3)  # conv_in
        + res_block(32, 32, temb) + conv(32, 32, 3)  # down.0 + downsample
        + res_block(32, 64, temb) + conv(64, 64, 3)  # down.1 + downsample
        + res_block(64, 128, temb)  # down.2
        + conv(128, 128, 1) + 2 * res_block(128, 128, temb)  # mid
        + res_block(256, 128, temb) + conv(128, 128, 3)  # up.2 + upsample
        + res_block(192, 64, temb) + conv(64, 64, 3)  # up.1 + upsample
        + res_block(96, 32, temb)  # up.0
        + norm(32) + conv(32, 1, 3)  # output head
    )

    # Act
    model, registry, port = build_backbone(BackboneConfig(), seed=0)

    # Assert
    assert registry.total() == expected
    assert registry.total() == sum(p.numel() for p in model.parameters())
    assert (port.channels, port.size) == (128, 16)


def test_every_registered_tensor_reaches_the_output(tiny_backbone, random_maps):
    """Perturbing any single registry entry changes the forward; nothing is registered but unused."""
    # Arrange
    x = random_maps(2, 1, 16, 16)
    registry_names = [entry.name for entry in ParamRegistry.from_module(tiny_backbone)]
    params = dict(tiny_backbone.named_parameters())
    with torch.no_grad():
        reference = tiny_backbone(x, 20)

        for name in registry_names:
            # Act
            original = params[name].clone()
            params[name].add_(random_maps(*params[name].shape))
            moved = tiny_backbone(x, 20)
            params[name].copy_(original)

            # Assert
            assert not torch.equal(moved, reference), name
    assert sorted(registry_names) == sorted(params)


def test_float64_gradients_match_finite_differences(tiny_backbone_cfg, random_maps):
    """Central differences (h = 1e-4) agree with autograd on 10 parameters to 1e-3 relative."""
    # Arrange
    model, _, _ = build_backbone(tiny_backbone_cfg, seed=0)
    model = model.double()
    x = random_maps(2, 1, 16, 16).double()
    weights = random_maps(2, 1, 16, 16).double()
    t = torch.tensor([7, 31])
    named = list(model.named_parameters())
    picks = [named[i * len(named) // 10] for i in range(10)]

    def loss():
        return (model(x, t) * weights).sum()

    # Act
    loss().backward()

    # Assert
    h = 1e-4
    with torch.no_grad():
        for name, param in picks:
            flat = param.view(-1)
            i = int(param.grad.view(-1).abs().argmax())
            flat[i] += h
            up = float(loss())
            flat[i] -= 2 * h
            down = float(loss())
            flat[i] += h
            numeric = (up - down) / (2 * h)
            analytic = float(param.grad.view(-1)[i])
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
            assert rel < 1e-3, (name, numeric, analytic)


def test_port_matches_mid_block_input(tiny_backbone):
    """The injection port is the input of mid.proj_in at the lowest resolution."""
    port = tiny_backbone.port
    assert port.site == "mid.proj_in"
    assert (port.channels, port.size) == (16, 8)


def test_forward_preserves_shape_and_is_pure(tiny_backbone, random_maps):
    """The forward keeps the input shape and repeats bit-identically."""
    x = random_maps(3, 1, 16, 16)
    with torch.no_grad():
        a = tiny_backbone(x, 10)
        b = tiny_backbone(x, 10)
    assert a.shape == x.shape
    assert torch.equal(a, b)


def test_zero_injection_is_identity(tiny_backbone, random_maps):
    """Adding a zero map at the port leaves the output bit-identical."""
    x = random_maps(2, 1, 16, 16)
    zero = torch.zeros(2, 16, 8, 8)
    with torch.no_grad():
        assert torch.equal(tiny_backbone(x, 5, zero), tiny_backbone(x, 5))


def test_nonzero_injection_changes_output(tiny_backbone, random_maps):
    """A nonzero map at the port changes the output."""
    x = random_maps(2, 1, 16, 16)
    with torch.no_grad():
        assert not torch.equal(tiny_backbone(x, 5, torch.ones(2, 16, 8, 8)), tiny_backbone(x, 5))


def test_injection_shape_mismatch(tiny_backbone, random_maps):
    """An injected map of the wrong shape names the port in its error."""
    with pytest.raises(ShapeMismatchError, match="mid.proj_in"):
        tiny_backbone(random_maps(2, 1, 16, 16), 5, torch.zeros(2, 8, 8, 8))


def test_input_shape_mismatch(tiny_backbone, random_maps):
    """Inputs at the wrong resolution are rejected."""
    with pytest.raises(ShapeMismatchError):
        tiny_backbone(random_maps(2, 1, 32, 32), 5)


def test_read_mid_features_shape_and_consistency(tiny_backbone, random_maps):
    """read_mid_features returns the port features the forward pass sees."""
    x = random_maps(2, 1, 16, 16)
    with torch.no_grad():
        h = tiny_backbone.read_mid_features(x, 12)
        again = tiny_backbone.read_mid_features(x, 12)
        state = tiny_backbone.encode(x, 12)
    assert h.shape == (2, 16, 8, 8)
    assert torch.equal(h, again)
    assert torch.equal(h, state.h)


def test_per_sample_timesteps_match_scalar_calls(tiny_backbone, random_maps):
    """A batch of timesteps matches one call per sample."""
    x = random_maps(2, 1, 16, 16)
    with torch.no_grad():
        batched = tiny_backbone(x, torch.tensor([3, 40]))
        first = tiny_backbone(x[:1], 3)
        second = tiny_backbone(x[1:], 40)
    assert torch.allclose(batched[:1], first, atol=1e-6)
    assert torch.allclose(batched[1:], second, atol=1e-6)


MID_STATS_SCRIPT = """
import json, torch
from controllab.backbone import BackboneConfig, build_backbone
cfg = BackboneConfig(**json.loads('{cfg}'))
model, _, _ = build_backbone(cfg, seed=0)
x = torch.randn((2, 1, 16, 16), generator=torch.Generator().manual_seed(99))
with torch.no_grad():
    h = model.read_mid_features(x, 25)
print(json.dumps({{"mean": float(h.mean()), "var": float(h.var(unbiased=False))}}))
"""


def test_mid_feature_statistics_match_a_fresh_interpreter(tiny_backbone_cfg):
    """Port statistics for a fixed seed and input do not depend on process state."""
    # Arrange
    torch.manual_seed(12345)
    model, _, _ = build_backbone(tiny_backbone_cfg, seed=0)
    x = torch.randn((2, 1, 16, 16), generator=torch.Generator().manual_seed(99))
    script = MID_STATS_SCRIPT.format(cfg=json.dumps(dataclasses.asdict(tiny_backbone_cfg)))

    # Act
    with torch.no_grad():
        h = model.read_mid_features(x, 25)
    result = subprocess.run(
        [sys.executable, "-c", script], cwd=REPO_ROOT, capture_output=True, text=True, check=True
    )

    # Assert
    recorded = json.loads(result.stdout.strip().splitlines()[-1])
    assert float(h.mean()) == pytest.approx(recorded["mean"], rel=1e-6, abs=1e-9)
    assert float(h.var(unbiased=False)) == pytest.approx(recorded["var"], rel=1e-6)


@pytest.mark.parametrize(
    "overrides, match",
    [
        ({"image_size": 18, "channel_multipliers": [1, 2, 4]}, "divisible"),
        ({"time_embed_dim": 15}, "even"),
        ({"channel_multipliers": []}, "channel_multipliers"),
        ({"base_channels": 0}, "base_channels"),
    ],
)
def test_backbone_config_validation(overrides, match):
    """Inconsistent backbone configs are rejected with a pointed message."""
    with pytest.raises(ValueError, match=match):
        BackboneConfig(**overrides).validate()


def test_group_count_divides_channels():
    """Groups divide the channels and never hold a single channel, except for one-channel maps."""
    for channels in (1, 3, 8, 12, 24, 128):
        groups = group_count(channels)
        assert channels % groups == 0
        assert channels // groups >= 2 or channels == 1
    assert (group_count(8), group_count(128)) == (4, 8)


def test_timestep_embedding_shape():
    """The sinusoidal embedding is (b, dim) and bounded by one."""
    emb = timestep_embedding(torch.tensor([1, 500, 1000]), 16)
    assert emb.shape == (3, 16)
    assert torch.all(emb.abs() <= 1.0)
