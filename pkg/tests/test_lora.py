import pytest
import torch
from torch import nn

from controllab.checkpoint import CONTROL_PREFIX, save_checkpoint
from controllab.conditioners import ControlNeXtConditioner
from controllab.control import CrossNormConfig
from controllab.diffusion import ShapeMismatchError
from controllab.lora import (
    LoraAdapter,
    load_adapter,
    lora_attach,
    lora_delta,
    matrix_shape,
    random_adapter,
    save_adapter,
    zero_adapter,
)
from controllab.registry import ParamRegistry


@pytest.fixture
def identity_linear():
    layer = nn.Linear(2, 2, bias=False)
    with torch.no_grad():
        layer.weight.copy_(torch.eye(2))
    return layer


def params_of(module):
    return dict(module.named_parameters())


def test_attach_adds_scaled_low_rank_update(identity_linear):
    """W = I, A = [[1, 1]], B = [[1], [0]], alpha = rank gives [[2, 1], [0, 1]]."""
    # Arrange
    adapter = LoraAdapter(
        rank=1,
        alpha=1.0,
        factors={"weight": (torch.tensor([[1.0, 1.0]]), torch.tensor([[1.0], [0.0]]))},
    )
    registry = ParamRegistry.from_module(identity_linear)

    # Act
    handle = lora_attach(adapter, registry, params_of(identity_linear))

    # Assert
    assert identity_linear.weight.tolist() == [[2.0, 1.0], [0.0, 1.0]]
    handle.detach()
    assert torch.equal(identity_linear.weight, torch.eye(2))


def test_zero_adapter_is_exact_identity(tiny_backbone, random_maps):
    """A zero adapter leaves the forward bit-identical."""
    registry = ParamRegistry.from_module(tiny_backbone)
    targets = ["mid.proj_in.weight", "mid.block1.conv1.weight", "time_embed.0.weight"]
    adapter = zero_adapter(targets, registry, rank=2, alpha=4.0)
    x = random_maps(1, 1, 16, 16)
    with torch.no_grad():
        before = tiny_backbone(x, 7)
        with lora_attach(adapter, registry, params_of(tiny_backbone)):
            during = tiny_backbone(x, 7)
    assert torch.equal(before, during)


def test_attach_then_detach_restores_weights(tiny_backbone):
    """Detach restores every weight exactly and is idempotent."""
    registry = ParamRegistry.from_module(tiny_backbone)
    targets = ["mid.block1.conv1.weight", "up.0.blocks.0.conv2.weight"]
    before = {n: p.detach().clone() for n, p in tiny_backbone.named_parameters()}
    adapter = random_adapter(targets, registry, rank=2, alpha=2.0, seed=3)

    handle = lora_attach(adapter, registry, params_of(tiny_backbone))
    changed = {n for n, p in tiny_backbone.named_parameters() if not torch.equal(p, before[n])}
    handle.detach()
    handle.detach()

    assert changed == set(targets)
    for name, param in tiny_backbone.named_parameters():
        assert torch.equal(param, before[name]), name


def test_conv_kernel_delta_has_kernel_shape():
    """Conv adapters produce a delta in the kernel's shape."""
    shape = (4, 3, 3, 3)
    assert matrix_shape(shape) == (4, 27)
    adapter = LoraAdapter(rank=2, alpha=2.0, factors={"w": (torch.ones(2, 27), torch.ones(4, 2))})
    delta = lora_delta(adapter, "w", shape)
    assert delta.shape == shape
    assert torch.equal(delta, torch.full(shape, 2.0))


def test_lora_shape_errors(identity_linear):
    """Factor shapes must match the target and the rank."""
    registry = ParamRegistry.from_module(identity_linear)
    with pytest.raises(ShapeMismatchError):
        matrix_shape((3,))
    wrong_rank = LoraAdapter(rank=2, alpha=1.0, factors={"weight": (torch.ones(1, 2), torch.ones(2, 1))})
    with pytest.raises(ShapeMismatchError, match="rank"):
        lora_attach(wrong_rank, registry, params_of(identity_linear))
    wrong_width = LoraAdapter(rank=1, alpha=1.0, factors={"weight": (torch.ones(1, 3), torch.ones(2, 1))})
    with pytest.raises(ShapeMismatchError):
        lora_attach(wrong_width, registry, params_of(identity_linear))
    with pytest.raises(ValueError):
        LoraAdapter(rank=0, alpha=1.0).validate()


def test_unknown_targets_are_rejected(identity_linear):
    """Adapters may only target registered parameters."""
    registry = ParamRegistry.from_module(identity_linear)
    with pytest.raises(KeyError):
        zero_adapter(["bias"], registry, rank=1, alpha=1.0)
    adapter = LoraAdapter(rank=1, alpha=1.0, factors={"other": (torch.ones(1, 2), torch.ones(2, 1))})
    with pytest.raises(KeyError):
        lora_attach(adapter, registry, params_of(identity_linear))


def test_save_and_load_adapter(tmp_path, tiny_backbone):
    """An adapter archive restores rank, alpha and factors."""
    registry = ParamRegistry.from_module(tiny_backbone)
    adapter = random_adapter(["mid.proj_in.weight"], registry, rank=3, alpha=1.5, seed=0)
    path = str(tmp_path / "style.safetensors")

    save_adapter(path, adapter)
    restored = load_adapter(path)

    assert (restored.rank, restored.alpha, restored.targets) == (3, 1.5, ["mid.proj_in.weight"])
    a, b = adapter.factors["mid.proj_in.weight"]
    ra, rb = restored.factors["mid.proj_in.weight"]
    assert torch.equal(a, ra) and torch.equal(b, rb)


def test_load_adapter_rejects_other_archives(tmp_path, tiny_backbone):
    """A model checkpoint is not mistaken for an adapter."""
    path = str(tmp_path / "model.safetensors")
    save_checkpoint(path, {"": tiny_backbone}, config={})
    with pytest.raises(ValueError, match="not a LoRA adapter"):
        load_adapter(path)


def test_style_adapter_changes_outputs_but_not_control_module(tiny_backbone, tiny_extractor_cfg, random_maps):
    """A nonzero adapter on the backbone leaves the control module's parameters alone."""
    # Arrange
    conditioner = ControlNeXtConditioner(tiny_backbone, tiny_extractor_cfg, CrossNormConfig(), seed=0)
    control_before = {
        name: tensor.detach().clone()
        for name, tensor in conditioner.state_tensors().items()
        if name.startswith(CONTROL_PREFIX)
    }
    registry = ParamRegistry.from_module(tiny_backbone)
    adapter = random_adapter(["mid.proj_in.weight", "conv_out.weight"], registry, rank=2, alpha=2.0, seed=5)
    x, control = random_maps(2, 1, 16, 16), random_maps(2, 1, 16, 16)

    # Act
    with torch.no_grad():
        plain = conditioner(x, 9, control)
        with lora_attach(adapter, registry, params_of(tiny_backbone)):
            styled = conditioner(x, 9, control)
        restored = conditioner(x, 9, control)

    # Assert
    assert not torch.equal(plain, styled)
    assert torch.equal(plain, restored)
    control_after = conditioner.state_tensors()
    for name, tensor in control_before.items():
        assert torch.equal(control_after[name], tensor), name
