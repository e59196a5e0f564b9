"""tirdet: anchor-based single-stage detection for thermal infrared imagery."""

__version__ = "0.1.0"

from .graph import (ModelConfig, ModelGraph, LayerSpec, FeatureMap,
                    baseline_config, bifpn_p2_config, build_graph,
                    count_parameters, count_flops, fuse_features)

__all__ = [
    "ModelConfig", "ModelGraph", "LayerSpec", "FeatureMap",
    "baseline_config", "bifpn_p2_config", "build_graph",
    "count_parameters", "count_flops", "fuse_features",
]
