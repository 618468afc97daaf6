"""Parameter and multiply-accumulate counts. One mult-add is one op; biases are ignored."""

from __future__ import annotations

from dataclasses import dataclass, field

from .tensors import ConvLayerSpec


@dataclass(frozen=True)
class FCSpec:
    id: str
    in_features: int
    out_features: int


@dataclass(frozen=True)
class LayerCost:
    params: int
    multadds: int


@dataclass
class ModelStats:
    layers: dict[str, LayerCost] = field(default_factory=dict)
    params: int = 0
    multadds: int = 0
    params_ratio: float | None = None
    multadds_ratio: float | None = None

    def to_dict(self) -> dict:
        return {
            "layers": {k: {"params": c.params, "multadds": c.multadds}
                       for k, c in self.layers.items()},
            "params": self.params,
            "multadds": self.multadds,
            "params_ratio": self.params_ratio,
            "multadds_ratio": self.multadds_ratio,
        }


def layer_params(spec) -> int:
    if isinstance(spec, FCSpec):
        return spec.in_features * spec.out_features
    return spec.D * spec.D * (spec.S // spec.group) * spec.T


def layer_multadds(spec) -> int:
    if isinstance(spec, FCSpec):
        return spec.in_features * spec.out_features
    return spec.out_h * spec.out_w * layer_params(spec)


def layer_cost(spec) -> LayerCost:
    return LayerCost(layer_params(spec), layer_multadds(spec))


def model_stats(specs, baseline: ModelStats | None = None) -> ModelStats:
    """Per-layer and total costs for a sequence of layer specs (or a manifest).

    Ratios are ``baseline / this``, so a compressed model reports values above 1.
    """
    if hasattr(specs, "specs"):
        specs = specs.specs()
    stats = ModelStats()
    for spec in specs:
        c = layer_cost(spec)
        stats.layers[spec.id] = c
        stats.params += c.params
        stats.multadds += c.multadds
    if baseline is not None:
        stats.params_ratio = baseline.params / stats.params
        stats.multadds_ratio = baseline.multadds / stats.multadds
    return stats


def compression_breakeven(spec: ConvLayerSpec) -> int:
    """Largest per-group rank whose three-stage stack has fewer weights than the layer.

    Returns 0 when no rank saves weights.
    """
    s, t, d2 = spec.S // spec.group, spec.T // spec.group, spec.D * spec.D
    full = d2 * s * t
    per_rank = s + d2 + t
    return (full - 1) // per_rank
