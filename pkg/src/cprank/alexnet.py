"""Standard AlexNet geometry (227x227 input, grouped conv2/4/5)."""

from __future__ import annotations

import numpy as np

from .cost import FCSpec
from .manifest import LayerRecord, Manifest
from .tensors import ConvLayerSpec

CONV_LAYERS = (
    ConvLayerSpec("conv1", 11, 3, 96, 1, 4, 0, 227, 227),
    ConvLayerSpec("conv2", 5, 96, 256, 2, 1, 2, 27, 27),
    ConvLayerSpec("conv3", 3, 256, 384, 1, 1, 1, 13, 13),
    ConvLayerSpec("conv4", 3, 384, 384, 2, 1, 1, 13, 13),
    ConvLayerSpec("conv5", 3, 384, 256, 2, 1, 1, 13, 13),
)

FC_LAYERS = (
    FCSpec("fc6", 9216, 4096),
    FCSpec("fc7", 4096, 4096),
    FCSpec("fc8", 4096, 1000),
)

# per-group ranks estimated for the pretrained network
TABLE1_RANKS = {"conv1": 53, "conv2": 83, "conv3": 138, "conv4": 119, "conv5": 109}
TWO_WAY_LAYERS = frozenset({"conv1"})


def layer_specs():
    return list(CONV_LAYERS) + list(FC_LAYERS)


def geometry_manifest(with_weights: bool = False, seed: int = 0):
    """AlexNet as a manifest; geometry only unless ``with_weights`` (random normal)."""
    rng = np.random.default_rng(seed)
    records, arrays = [], {}
    for spec in layer_specs():
        rec = LayerRecord(spec, two_way=spec.id in TWO_WAY_LAYERS)
        if with_weights:
            rec = LayerRecord(spec, f"{spec.id}.cpt", two_way=rec.two_way)
            arrays[spec.id] = rng.standard_normal(rec.blob_shape).astype(np.float32)
        records.append(rec)
    return Manifest("alexnet", tuple(records), pending=arrays)
