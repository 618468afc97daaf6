"""VBMF rank selection for CP-decomposed convolution layers."""

from .cost import FCSpec, LayerCost, ModelStats, compression_breakeven, layer_multadds, layer_params, model_stats
from .cp import CPFactors, CPOptions, ConvStack, cp_als, cp_tpm, factors_to_conv_stack, svd_two_layer
from .manifest import Manifest, ManifestError, load_manifest, save_manifest
from .pipeline import PipelineOptions, compress_layer, run_pipeline
from .tensors import ConvLayerSpec, conv_forward, fold, matricize, reshape_kernel_to_3way, tensor_from_cp
from .vbmf import RankEstimate, estimate_noise_evb, evb_rank, layer_rank

__version__ = "0.1.0"
