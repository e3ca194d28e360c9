# src/losses.py
"""
Distillation objectives.

Hard/soft multi-label BCE, temperature softening, feature-map alignment,
KL feature divergence, per-channel sorted 1D Wasserstein distance, and
the composite assistant/student objectives.

Every reduction is mean over the batch, sum over classes. Loss arithmetic
runs in float64; reference maps and soft labels never receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from src.core import (
    DimensionError,
    FeatureMap,
    LabelVector,
    NumericalError,
    ParameterError,
    PredictionVector,
    SoftLabelMode,
    SoftLabelVector,
    clamp_probability_tensor,
    derive_seed,
    get_logger,
)

logger = get_logger('losses')

Targets = Union[LabelVector, SoftLabelVector, torch.Tensor, Sequence[float]]
Predictions = Union[PredictionVector, torch.Tensor]
Features = Union[FeatureMap, torch.Tensor]
FeatureLevels = Union[Features, Sequence[Features]]

HARD_BCE = 'hard_bce'
SOFT_BCE = 'soft_bce'
KL_TERM = 'kl_term'
WASSERSTEIN_TERM = 'wasserstein_term'


@dataclass(frozen=True, eq=False)
class LossValue:
    """
    A loss and its named components. `total` is a 0-dim float64 tensor that
    keeps the autograd graph; `weights` holds the multiplier of each component.
    """
    total: torch.Tensor
    components: Dict[str, torch.Tensor]
    weights: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.components.items():
            if not bool(torch.isfinite(value).all()):
                logger.error(f"Loss component '{name}' is not finite: {value}")
                raise NumericalError(f"loss component '{name}' is NaN/Inf")
        if not bool(torch.isfinite(self.total).all()):
            raise NumericalError("loss total is NaN/Inf")

    @property
    def value(self) -> float:
        return float(self.total.detach())

    def weight(self, name: str) -> float:
        return self.weights.get(name, 1.0)

    def breakdown(self) -> Dict[str, float]:
        return {name: float(v.detach()) for name, v in self.components.items()}

    def component_sum(self) -> float:
        return sum(self.weight(name) * v for name, v in self.breakdown().items())


def _single(name: str, value: torch.Tensor) -> LossValue:
    return LossValue(total=value, components={name: value}, weights={name: 1.0})


# ---------------------------------------
# Tensor coercion
# ---------------------------------------
def _target_tensor(targets: Targets) -> torch.Tensor:
    if isinstance(targets, (LabelVector, SoftLabelVector)):
        return targets.as_tensor(torch.float64)
    if isinstance(targets, torch.Tensor):
        return targets.detach().to(torch.float64)
    return torch.tensor(np.asarray(targets, dtype=np.float64))


def _probability_tensor(predictions: Predictions) -> torch.Tensor:
    if isinstance(predictions, PredictionVector):
        return predictions.probabilities.to(torch.float64)
    return predictions.to(torch.float64)


def _feature_tensor(features: Features) -> torch.Tensor:
    if isinstance(features, FeatureMap):
        return features.batched()
    if features.dim() not in (3, 4):
        raise DimensionError(f"feature tensor must be (C, H, W) or (B, C, H, W), got {tuple(features.shape)}")
    if not bool(torch.isfinite(features).all()):
        raise NumericalError("feature tensor contains NaN/Inf")
    return features.unsqueeze(0) if features.dim() == 3 else features


# ---------------------------------------
# Binary cross entropy (per class)
# ---------------------------------------
def binary_cross_entropy(targets: torch.Tensor, probabilities: torch.Tensor,
                         mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Σ_classes −y·log p − (1−y)·log(1−p), averaged over the batch; masked entries drop out."""
    if targets.shape != probabilities.shape:
        raise DimensionError(f"targets {tuple(targets.shape)} and predictions "
                             f"{tuple(probabilities.shape)} differ in shape")
    p = clamp_probability_tensor(probabilities.to(torch.float64))
    y = targets.to(torch.float64)
    per_class = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    if mask is not None:
        if mask.shape != per_class.shape:
            raise DimensionError(f"mask {tuple(mask.shape)} does not match targets {tuple(per_class.shape)}")
        per_class = per_class * mask.to(torch.float64)
    per_sample = per_class.sum(dim=-1)
    return per_sample.mean() if per_sample.dim() > 0 else per_sample


def bce_multilabel(targets: Targets, predictions: Predictions,
                   mask: Optional[torch.Tensor] = None, component: Optional[str] = None) -> LossValue:
    """
    Multi-label BCE between hard or soft targets and (clamped) predictions.
    The component is named soft_bce for SoftLabelVector targets, hard_bce otherwise.
    """
    if component is None:
        component = SOFT_BCE if isinstance(targets, SoftLabelVector) else HARD_BCE
    value = binary_cross_entropy(_target_tensor(targets), _probability_tensor(predictions), mask)
    return _single(component, value)


# ---------------------------------------
# Temperature softening
# ---------------------------------------
def soften(logits: torch.Tensor, temperature: float,
           mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> torch.Tensor:
    """Differentiable softening along the class axis: softmax(z/T) or σ(z/T)."""
    if not np.isfinite(temperature) or temperature <= 0:
        logger.error(f"Invalid temperature {temperature}")
        raise ParameterError(f"temperature must be > 0 (got {temperature})")
    if not bool(torch.isfinite(logits).all()):
        raise NumericalError("logits contain NaN/Inf")
    scaled = logits / temperature
    if SoftLabelMode(mode) is SoftLabelMode.SOFTMAX:
        shifted = scaled - scaled.max(dim=-1, keepdim=True).values.detach()
        exp = torch.exp(shifted)
        return exp / exp.sum(dim=-1, keepdim=True)
    return torch.sigmoid(scaled)


def temperature_soften(logits: Union[Sequence[float], torch.Tensor], temperature: float,
                       mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> SoftLabelVector:
    z = logits if isinstance(logits, torch.Tensor) else torch.tensor(np.asarray(logits, dtype=np.float64))
    if z.dim() != 1:
        raise DimensionError(f"temperature_soften expects one logit vector, got shape {tuple(z.shape)}")
    values = soften(z.detach().to(torch.float64), temperature, mode)
    return SoftLabelVector(values=tuple(values.tolist()), temperature=float(temperature), mode=SoftLabelMode(mode))


# ---------------------------------------
# Feature alignment
# ---------------------------------------
SpatialSize = Union[None, int, Tuple[int, int]]


class FeatureAligner:
    """
    Brings a reference map and a learner map to a common shape:
    adaptive average pooling of both to `spatial_size`, then a fixed random
    projection of the reference channels onto the learner's channel count.
    The projection depends only on (seed, ref_channels, learner_channels).
    spatial_size=None skips pooling and requires equal spatial dims.
    """

    def __init__(self, spatial_size: SpatialSize = 4, seed: int = 0):
        if isinstance(spatial_size, int) and spatial_size < 1:
            raise ParameterError(f"align_size must be >= 1 (got {spatial_size})")
        self.spatial_size = spatial_size
        self.seed = seed
        self._projections: Dict[Tuple[int, int], torch.Tensor] = {}

    def pool(self, features: torch.Tensor) -> torch.Tensor:
        if self.spatial_size is None:
            return features
        return F.adaptive_avg_pool2d(features, self.spatial_size)

    def projection(self, ref_channels: int, learner_channels: int) -> torch.Tensor:
        """(learner_channels, ref_channels) matrix; identity when the counts agree."""
        key = (ref_channels, learner_channels)
        if key not in self._projections:
            if ref_channels == learner_channels:
                matrix = torch.eye(ref_channels, dtype=torch.float64)
            else:
                generator = torch.Generator().manual_seed(derive_seed(self.seed, ref_channels, learner_channels))
                matrix = torch.randn(learner_channels, ref_channels, generator=generator,
                                     dtype=torch.float64) / np.sqrt(ref_channels)
            self._projections[key] = matrix
        return self._projections[key]

    def project(self, ref: torch.Tensor, learner_channels: int) -> torch.Tensor:
        matrix = self.projection(ref.shape[1], learner_channels).to(ref.dtype)
        if ref.shape[1] == learner_channels:
            return ref
        return torch.einsum('oc,bchw->bohw', matrix, ref)

    def align(self, f_ref: Features, f_learner: Features) -> Tuple[torch.Tensor, torch.Tensor]:
        ref = _feature_tensor(f_ref).detach().to(torch.float64)
        learner = _feature_tensor(f_learner).to(torch.float64)
        if ref.shape[0] != learner.shape[0]:
            raise DimensionError(f"reference batch {ref.shape[0]} != learner batch {learner.shape[0]}")
        ref = self.project(self.pool(ref), learner.shape[1])
        learner = self.pool(learner)
        if ref.shape != learner.shape:
            raise DimensionError(f"aligned shapes differ: {tuple(ref.shape)} vs {tuple(learner.shape)}")
        return ref, learner


def align_feature_maps(f_ref: Features, f_learner: Features, spatial_size: SpatialSize = 4,
                       seed: int = 0) -> Tuple[torch.Tensor, torch.Tensor]:
    return FeatureAligner(spatial_size, seed).align(f_ref, f_learner)


# ---------------------------------------
# Feature distances
# ---------------------------------------
def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Σ p·ln(p/q) over the last axis, averaged over leading axes; 0·ln 0 = 0."""
    if p.shape != q.shape:
        raise DimensionError(f"distributions differ in shape: {tuple(p.shape)} vs {tuple(q.shape)}")
    p = p.to(torch.float64)
    q = q.to(torch.float64)
    value = (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-1)
    value = value.mean() if value.dim() > 0 else value
    if not bool(torch.isfinite(value)):
        raise NumericalError("KL divergence is infinite: q has zeros where p is positive")
    return value


def _kl_level(ref: torch.Tensor, learner: torch.Tensor) -> torch.Tensor:
    log_p = F.log_softmax(ref.flatten(start_dim=1), dim=-1)
    log_q = F.log_softmax(learner.flatten(start_dim=1), dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()


def wasserstein_1d(a: torch.Tensor, b: torch.Tensor, p: int = 2) -> torch.Tensor:
    """
    Wasserstein-p between equal-size empirical samples along the last axis:
    (mean_k |a_(k) − b_(k)|^p)^(1/p) over sorted values. Leading axes are kept.
    """
    if p < 1:
        raise ParameterError(f"wasserstein_p must be >= 1 (got {p})")
    if a.shape != b.shape:
        raise DimensionError(f"samples differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    a_sorted, _ = torch.sort(a, dim=-1)
    b_sorted, _ = torch.sort(b, dim=-1)
    moment = (a_sorted - b_sorted).abs().pow(p).mean(dim=-1)
    if p == 1:
        return moment
    # d/dm m^(1/p) is unbounded at m = 0
    positive = moment > 0
    safe = torch.where(positive, moment, torch.ones_like(moment))
    return torch.where(positive, safe.pow(1.0 / p), torch.zeros_like(moment))


def _wasserstein_level(ref: torch.Tensor, learner: torch.Tensor, p: int) -> torch.Tensor:
    # (B, C, H, W) -> per-channel samples of size H*W
    return wasserstein_1d(ref.flatten(start_dim=2), learner.flatten(start_dim=2), p).mean()


def _levels(features: FeatureLevels) -> Sequence[Features]:
    if isinstance(features, (FeatureMap, torch.Tensor)):
        return [features]
    return list(features)


def _feature_term(f_ref: FeatureLevels, f_learner: FeatureLevels, aligner: FeatureAligner, level_fn) -> torch.Tensor:
    refs, learners = _levels(f_ref), _levels(f_learner)
    if len(refs) != len(learners) or not refs:
        raise DimensionError(f"reference has {len(refs)} feature levels, learner has {len(learners)}")
    terms = [level_fn(*aligner.align(r, s)) for r, s in zip(refs, learners)]
    return torch.stack(terms).mean()


def kl_feature_divergence(f_ref: FeatureLevels, f_learner: FeatureLevels,
                          aligner: Optional[FeatureAligner] = None) -> LossValue:
    """D_KL(P_ref || P_learner) of softmax distributions over the flattened aligned maps."""
    aligner = aligner or FeatureAligner()
    return _single(KL_TERM, _feature_term(f_ref, f_learner, aligner, _kl_level))


def wasserstein_feature_distance(f_ref: FeatureLevels, f_learner: FeatureLevels, p: int = 2,
                                 aligner: Optional[FeatureAligner] = None) -> LossValue:
    """Per-channel sorted 1D Wasserstein-p of the aligned maps, averaged over channels and batch."""
    if p < 1:
        logger.error(f"Invalid Wasserstein order p={p}")
        raise ParameterError(f"wasserstein_p must be >= 1 (got {p})")
    aligner = aligner or FeatureAligner()
    return _single(WASSERSTEIN_TERM,
                   _feature_term(f_ref, f_learner, aligner, lambda r, s: _wasserstein_level(r, s, p)))


# ---------------------------------------
# Composite objectives
# ---------------------------------------
def _soft_predictions(pred: Predictions, soft_temperature: Optional[float], mode: SoftLabelMode) -> torch.Tensor:
    if soft_temperature is None:
        return _probability_tensor(pred)
    if not isinstance(pred, PredictionVector):
        raise DimensionError("temperature-scaled soft predictions need a PredictionVector with logits")
    return soften(pred.logits.to(torch.float64), soft_temperature, mode)


def _composite(hard: Targets, soft: Targets, pred: Predictions, feature: LossValue, feature_name: str,
               weight: float, mask: Optional[torch.Tensor], soft_temperature: Optional[float],
               mode: SoftLabelMode) -> LossValue:
    if weight < 0 or not np.isfinite(weight):
        raise ParameterError(f"feature weight must be >= 0 (got {weight})")
    hard_bce = binary_cross_entropy(_target_tensor(hard), _probability_tensor(pred), mask)
    soft_bce = binary_cross_entropy(_target_tensor(soft), _soft_predictions(pred, soft_temperature, mode))
    feature_value = feature.components[feature_name]
    total = hard_bce + weight * feature_value + soft_bce
    return LossValue(
        total=total,
        components={HARD_BCE: hard_bce, feature_name: feature_value, SOFT_BCE: soft_bce},
        weights={HARD_BCE: 1.0, feature_name: float(weight), SOFT_BCE: 1.0},
    )


def assistant_loss(hard: Targets, teacher_soft: Targets, pred: Predictions, f_T: FeatureLevels,
                   f_A: FeatureLevels, lambda1: float, mask: Optional[torch.Tensor] = None,
                   soft_temperature: Optional[float] = None, mode: SoftLabelMode = SoftLabelMode.SIGMOID,
                   aligner: Optional[FeatureAligner] = None) -> LossValue:
    """
    hard BCE + λ₁·KL(f_T, f_A) + BCE(teacher soft labels, predictions).
    With soft_temperature set, the soft term compares against the learner's
    logits softened at that temperature instead of its plain probabilities.
    """
    kl = kl_feature_divergence(f_T, f_A, aligner)
    return _composite(hard, teacher_soft, pred, kl, KL_TERM, lambda1, mask, soft_temperature, mode)


def student_loss(hard: Targets, assistant_soft: Targets, pred: Predictions, f_A: FeatureLevels,
                 f_S: FeatureLevels, lambda2: float, p: int = 2, mask: Optional[torch.Tensor] = None,
                 soft_temperature: Optional[float] = None, mode: SoftLabelMode = SoftLabelMode.SIGMOID,
                 aligner: Optional[FeatureAligner] = None) -> LossValue:
    """hard BCE + λ₂·W_p(f_A, f_S) + BCE(assistant soft labels, predictions)."""
    distance = wasserstein_feature_distance(f_A, f_S, p, aligner)
    return _composite(hard, assistant_soft, pred, distance, WASSERSTEIN_TERM, lambda2, mask, soft_temperature, mode)
