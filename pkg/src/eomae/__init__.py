"""Masked-autoencoder pretraining for multimodal, multitemporal,
multispectral Earth-observation data, at desk scale, with an analytic
compute-cost model and a synthetic data generator."""

from .specs import (DatasetSpec, FusionConfig, ModalitySpec, ModelDims,
                    lcm_token_grid, load_preset, preset_names, token_counts,
                    validate)

__all__ = [
    "DatasetSpec", "FusionConfig", "ModalitySpec", "ModelDims",
    "lcm_token_grid", "load_preset", "preset_names", "token_counts", "validate",
]

__version__ = "0.1.0"
