# src/models.py
"""
Network definitions and the backbone registry.

Desk-scale stand-ins keep the capacity ordering of the original cascade
(EfficientNet teachers > DenseNet assistant > 3-block student); the
full-scale torchvision backbones plug in through the same BackboneSpec.
Every registered network exposes three named feature taps.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from src.core import (
    DimensionError,
    FeatureMap,
    NetworkRole,
    PredictionVector,
    RegistryError,
    SoftLabelMode,
    clamp_probability_tensor,
    get_logger,
)
from src.losses import soften

logger = get_logger('models')

CAPACITY_CLASS = {NetworkRole.TEACHER: 3, NetworkRole.ASSISTANT: 2, NetworkRole.STUDENT: 1}


@dataclass(frozen=True)
class BackboneSpec:
    """Declarative description of a network: role, capacity, taps and head."""
    name: str
    role: NetworkRole
    capacity_class: int
    tap_names: Tuple[str, ...]
    head: str
    factory: Callable[[int, int], nn.Module] = field(compare=False, repr=False)
    input_channels: int = 1
    full_scale: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'role', NetworkRole(self.role))
        object.__setattr__(self, 'tap_names', tuple(self.tap_names))
        if not self.tap_names:
            raise RegistryError(f"Backbone '{self.name}' declares no feature taps")
        if self.capacity_class != CAPACITY_CLASS[self.role]:
            raise RegistryError(f"Backbone '{self.name}': capacity_class {self.capacity_class} "
                                f"does not match role {self.role.value}")


# ---------------------------------------
# Student: exactly three conv blocks
# ---------------------------------------
class StudentNet(nn.Module):
    """
    conv 64@5x5 -> conv 64@3x3 -> conv 128@3x3, each with same-padding,
    ReLU and 2x2 max-pool; global average pool and a two-layer head.
    """

    def __init__(self, class_count: int, input_channels: int = 1):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(input_channels, 64, kernel_size=5, padding=2), nn.ReLU(), nn.MaxPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(64, 64, kernel_size=3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.block3 = nn.Sequential(nn.Conv2d(64, 128, kernel_size=3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(128, 64),
            nn.ReLU(),
            nn.Linear(64, class_count),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.block3(self.block2(self.block1(x))))


# ---------------------------------------
# Desk-scale building blocks
# ---------------------------------------
def _norm(channels: int) -> nn.GroupNorm:
    # GroupNorm keeps outputs independent of batch composition
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ConvNormAct(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, groups: int = 1,
                 act: Optional[type] = nn.SiLU):
        layers = [nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, groups=groups, bias=False),
                  _norm(out_ch)]
        if act is not None:
            layers.append(act())
        super().__init__(*layers)


class MBConv(nn.Module):
    """Inverted residual: 1x1 expand, 3x3 depthwise, 1x1 project."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, expand: int = 4):
        super().__init__()
        hidden = in_ch * expand
        self.block = nn.Sequential(
            ConvNormAct(in_ch, hidden, kernel=1),
            ConvNormAct(hidden, hidden, kernel=3, stride=stride, groups=hidden),
            ConvNormAct(hidden, out_ch, kernel=1, act=None),
        )
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.block(x)
        return out + x if self.residual else out


class TinyEfficientNet(nn.Module):
    def __init__(self, class_count: int, input_channels: int, stem: int,
                 stages: Sequence[Tuple[int, int, int]], head_channels: int):
        super().__init__()
        self.stem = ConvNormAct(input_channels, stem, kernel=3, stride=2)
        in_ch = stem
        for index, (out_ch, repeats, stride) in enumerate(stages, start=1):
            blocks = []
            for r in range(repeats):
                blocks.append(MBConv(in_ch, out_ch, stride if r == 0 else 1))
                in_ch = out_ch
            self.add_module(f'stage{index}', nn.Sequential(*blocks))
        self.stage_count = len(stages)
        self.head = nn.Sequential(
            ConvNormAct(in_ch, head_channels, kernel=1),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(head_channels, class_count),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for index in range(1, self.stage_count + 1):
            x = getattr(self, f'stage{index}')(x)
        return self.head(x)


class DenseLayer(nn.Module):
    def __init__(self, in_ch: int, growth: int, bottleneck: int = 4):
        super().__init__()
        self.layers = nn.Sequential(
            _norm(in_ch), nn.ReLU(), nn.Conv2d(in_ch, bottleneck * growth, 1, bias=False),
            _norm(bottleneck * growth), nn.ReLU(), nn.Conv2d(bottleneck * growth, growth, 3, padding=1, bias=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, self.layers(x)], dim=1)


class TinyDenseNet(nn.Module):
    def __init__(self, class_count: int, input_channels: int, stem: int = 32, growth: int = 16,
                 layers_per_block: int = 4, block_count: int = 3):
        super().__init__()
        self.stem = ConvNormAct(input_channels, stem, kernel=3, stride=2, act=nn.ReLU)
        channels = stem
        self.block_count = block_count
        for index in range(1, block_count + 1):
            block = []
            for _ in range(layers_per_block):
                block.append(DenseLayer(channels, growth))
                channels += growth
            self.add_module(f'block{index}', nn.Sequential(*block))
            if index < block_count:
                self.add_module(f'transition{index}', nn.Sequential(
                    _norm(channels), nn.ReLU(), nn.Conv2d(channels, channels // 2, 1, bias=False), nn.AvgPool2d(2)))
                channels //= 2
        self.head = nn.Sequential(_norm(channels), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                                  nn.Linear(channels, class_count))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        for index in range(1, self.block_count + 1):
            x = getattr(self, f'block{index}')(x)
            if index < self.block_count:
                x = getattr(self, f'transition{index}')(x)
        return self.head(x)


class MixedBlock(nn.Module):
    """Four parallel branches (1x1, 3x3, double 3x3, pool) concatenated on channels."""

    def __init__(self, in_ch: int, c1: int, c3r: int, c3: int, c5r: int, c5: int, cp: int):
        super().__init__()
        self.branch1 = ConvNormAct(in_ch, c1, kernel=1, act=nn.ReLU)
        self.branch3 = nn.Sequential(ConvNormAct(in_ch, c3r, kernel=1, act=nn.ReLU),
                                     ConvNormAct(c3r, c3, kernel=3, act=nn.ReLU))
        self.branch5 = nn.Sequential(ConvNormAct(in_ch, c5r, kernel=1, act=nn.ReLU),
                                     ConvNormAct(c5r, c5, kernel=3, act=nn.ReLU),
                                     ConvNormAct(c5, c5, kernel=3, act=nn.ReLU))
        self.branch_pool = nn.Sequential(nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False),
                                         ConvNormAct(in_ch, cp, kernel=1, act=nn.ReLU))
        self.out_channels = c1 + c3 + c5 + cp

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.branch1(x), self.branch3(x), self.branch5(x), self.branch_pool(x)], dim=1)


class TinyInception(nn.Module):
    def __init__(self, class_count: int, input_channels: int):
        super().__init__()
        self.stem = ConvNormAct(input_channels, 32, kernel=3, stride=2, act=nn.ReLU)
        self.mixed1 = MixedBlock(32, 32, 32, 48, 16, 24, 16)
        self.pool1 = nn.MaxPool2d(2)
        self.mixed2 = MixedBlock(self.mixed1.out_channels, 64, 64, 96, 32, 48, 32)
        self.pool2 = nn.MaxPool2d(2)
        self.mixed3 = MixedBlock(self.mixed2.out_channels, 96, 96, 128, 48, 64, 64)
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                                  nn.Linear(self.mixed3.out_channels, class_count))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.mixed1(self.stem(x))
        x = self.mixed2(self.pool1(x))
        x = self.mixed3(self.pool2(x))
        return self.head(x)


# ---------------------------------------
# Full-scale torchvision backbones (random init)
# ---------------------------------------
def _replace_stem_conv(module: nn.Module, path: str, input_channels: int) -> nn.Module:
    parent_path, _, name = path.rpartition('.')
    parent = module.get_submodule(parent_path) if parent_path else module
    conv = getattr(parent, name)
    setattr(parent, name, nn.Conv2d(input_channels, conv.out_channels, conv.kernel_size, stride=conv.stride,
                                    padding=conv.padding, bias=conv.bias is not None))
    return module


def _torchvision_factory(builder_name: str, stem_path: str, **kwargs) -> Callable[[int, int], nn.Module]:
    def factory(class_count: int, input_channels: int) -> nn.Module:
        from torchvision import models as tv_models
        module = getattr(tv_models, builder_name)(weights=None, num_classes=class_count, **kwargs)
        return _replace_stem_conv(module, stem_path, input_channels)
    return factory


# ---------------------------------------
# Registry
# ---------------------------------------
_REGISTRY: Dict[str, BackboneSpec] = {}


def register_backbone(spec: BackboneSpec, replace: bool = False) -> BackboneSpec:
    if spec.name in _REGISTRY and not replace:
        raise RegistryError(f"Backbone '{spec.name}' is already registered")
    _REGISTRY[spec.name] = spec
    return spec


def get_backbone(name: str) -> BackboneSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        logger.error(f"Unknown backbone '{name}'")
        raise RegistryError(f"unknown backbone '{name}' (registered: {', '.join(sorted(_REGISTRY))})") from None


def registered_backbones(role: Optional[NetworkRole] = None) -> List[str]:
    return sorted(name for name, spec in _REGISTRY.items() if role is None or spec.role is NetworkRole(role))


def _spec(name: str, role: NetworkRole, taps: Sequence[str], head: str, factory, full_scale: bool = False):
    register_backbone(BackboneSpec(name=name, role=role, capacity_class=CAPACITY_CLASS[role], tap_names=tuple(taps),
                                   head=head, factory=factory, full_scale=full_scale))


_GAP_LINEAR = 'global average pool + linear'

_spec('student-3block', NetworkRole.STUDENT, ('block1', 'block2', 'block3'),
      'global average pool + linear(128, 64) + ReLU + linear(64, C)',
      lambda c, ch: StudentNet(c, ch))
_spec('tiny-b6', NetworkRole.TEACHER, ('stage2', 'stage3', 'stage4'), '1x1 conv(384) + ' + _GAP_LINEAR,
      lambda c, ch: TinyEfficientNet(c, ch, stem=24, stages=((24, 1, 1), (40, 2, 2), (80, 2, 2), (112, 2, 2)),
                                     head_channels=384))
_spec('tiny-b7', NetworkRole.TEACHER, ('stage2', 'stage3', 'stage4'), '1x1 conv(448) + ' + _GAP_LINEAR,
      lambda c, ch: TinyEfficientNet(c, ch, stem=32, stages=((32, 1, 1), (48, 2, 2), (96, 3, 2), (136, 2, 2)),
                                     head_channels=448))
_spec('tiny-inception', NetworkRole.TEACHER, ('mixed1', 'mixed2', 'mixed3'), _GAP_LINEAR,
      lambda c, ch: TinyInception(c, ch))
_spec('tiny-densenet', NetworkRole.ASSISTANT, ('block1', 'block2', 'block3'), _GAP_LINEAR,
      lambda c, ch: TinyDenseNet(c, ch))

_spec('efficientnet-b6', NetworkRole.TEACHER, ('features.3', 'features.5', 'features.7'), _GAP_LINEAR,
      _torchvision_factory('efficientnet_b6', 'features.0.0'), full_scale=True)
_spec('efficientnet-b7', NetworkRole.TEACHER, ('features.3', 'features.5', 'features.7'), _GAP_LINEAR,
      _torchvision_factory('efficientnet_b7', 'features.0.0'), full_scale=True)
_spec('inception-v3', NetworkRole.TEACHER, ('Mixed_5d', 'Mixed_6e', 'Mixed_7c'), _GAP_LINEAR,
      _torchvision_factory('inception_v3', 'Conv2d_1a_3x3.conv', aux_logits=False, init_weights=True),
      full_scale=True)
_spec('densenet121', NetworkRole.ASSISTANT, ('features.denseblock2', 'features.denseblock3', 'features.denseblock4'),
      _GAP_LINEAR, _torchvision_factory('densenet121', 'features.conv0'), full_scale=True)


# ---------------------------------------
# Network handles
# ---------------------------------------
@dataclass(eq=False)
class NetworkHandle:
    spec: BackboneSpec
    module: nn.Module
    class_count: int
    seed: int

    @property
    def role(self) -> NetworkRole:
        return self.spec.role


def build_network(spec: Union[BackboneSpec, str], class_count: int, seed: int) -> NetworkHandle:
    """Instantiate a registered backbone with parameters drawn from `seed` only."""
    spec = get_backbone(spec) if isinstance(spec, str) else spec
    if class_count < 1:
        raise DimensionError(f"class_count must be >= 1 (got {class_count})")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = spec.factory(class_count, spec.input_channels)
    for tap in spec.tap_names:
        try:
            module.get_submodule(tap)
        except AttributeError:
            raise RegistryError(f"Backbone '{spec.name}' declares tap '{tap}' that is not a layer") from None
    return NetworkHandle(spec=spec, module=module, class_count=class_count, seed=seed)


def _check_input(handle: NetworkHandle, images: torch.Tensor) -> None:
    if images.dim() != 4 or images.shape[1] != handle.spec.input_channels:
        logger.error(f"Input shape {tuple(images.shape)} rejected by '{handle.spec.name}'")
        raise DimensionError(f"'{handle.spec.name}' expects (batch, {handle.spec.input_channels}, H, W) input, "
                             f"got {tuple(images.shape)}")


def to_prediction(logits: torch.Tensor, mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> PredictionVector:
    return PredictionVector.from_logits(logits, mode)


def forward_with_taps(handle: NetworkHandle, images: torch.Tensor,
                      mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> Tuple[PredictionVector, Dict[str, FeatureMap]]:
    """Forward pass returning predictions and the declared taps' actual activations."""
    _check_input(handle, images)
    captured: Dict[str, torch.Tensor] = {}
    hooks = []
    for tap in handle.spec.tap_names:
        def hook(_module, _inputs, output, tap=tap):
            captured[tap] = output
        hooks.append(handle.module.get_submodule(tap).register_forward_hook(hook))
    try:
        logits = handle.module(images)
    finally:
        for h in hooks:
            h.remove()
    taps = {tap: FeatureMap(captured[tap], tap, handle.role) for tap in handle.spec.tap_names}
    return to_prediction(logits, mode), taps


def predict(handle: NetworkHandle, images: torch.Tensor, mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> PredictionVector:
    _check_input(handle, images)
    return to_prediction(handle.module(images), mode)


def ensemble_probabilities(member_logits: Sequence[torch.Tensor], mode: SoftLabelMode,
                           temperature: float = 1.0) -> torch.Tensor:
    """Mean over members of their (temperature-softened) probabilities."""
    if not member_logits:
        raise DimensionError("an ensemble needs at least one member")
    shapes = {tuple(z.shape) for z in member_logits}
    if len(shapes) != 1:
        raise DimensionError(f"ensemble members disagree on output shape: {sorted(shapes)}")
    return torch.stack([soften(z.to(torch.float64), temperature, mode) for z in member_logits]).mean(dim=0)


def teacher_ensemble_predict(members: Sequence[NetworkHandle], images: torch.Tensor,
                             mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> PredictionVector:
    """Probability-averaging ensemble; logits are the inverse activation of the mean."""
    if not members:
        raise DimensionError("teacher ensemble needs at least one member")
    counts = {m.class_count for m in members}
    if len(counts) != 1:
        raise DimensionError(f"ensemble members have mismatched class counts {sorted(counts)}")
    mean = ensemble_probabilities([predict(m, images, mode).logits for m in members], mode)
    clamped = clamp_probability_tensor(mean)
    logits = torch.log(clamped) if SoftLabelMode(mode) is SoftLabelMode.SOFTMAX else torch.logit(clamped)
    return PredictionVector(logits=logits, probabilities=mean)


def parameter_count(net: Union[NetworkHandle, nn.Module]) -> int:
    module = net.module if isinstance(net, NetworkHandle) else net
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def check_capacity_ordering(teacher_names: Sequence[str], assistant_name: str, student_name: str,
                            class_count: int) -> Mapping[str, int]:
    """
    Build each named backbone and verify roles and
    parameter_count(every teacher) > parameter_count(assistant) > parameter_count(student).
    """
    expected = [(name, NetworkRole.TEACHER) for name in teacher_names]
    expected += [(assistant_name, NetworkRole.ASSISTANT), (student_name, NetworkRole.STUDENT)]
    counts = {}
    for name, role in expected:
        spec = get_backbone(name)
        if spec.role is not role:
            raise RegistryError(f"Backbone '{name}' has role {spec.role.value}, configured as {role.value}")
        counts[name] = parameter_count(build_network(spec, class_count, seed=0))

    smallest_teacher = min(counts[name] for name in teacher_names)
    if not smallest_teacher > counts[assistant_name] > counts[student_name]:
        logger.error(f"Capacity ordering violated: {counts}")
        raise RegistryError(f"capacity ordering teacher > assistant > student violated: {counts}")
    return counts


def benchmark_inference(handle: NetworkHandle, image_size: int, repeats: int = 20) -> float:
    """Mean wall-clock seconds for one single-image forward pass on CPU."""
    module = handle.module
    was_training = module.training
    module.eval()
    image = torch.zeros(1, handle.spec.input_channels, image_size, image_size)
    try:
        with torch.no_grad():
            module(image)  # warm-up
            start = time.perf_counter()
            for _ in range(repeats):
                module(image)
            elapsed = time.perf_counter() - start
    finally:
        module.train(was_training)
    return elapsed / max(repeats, 1)
