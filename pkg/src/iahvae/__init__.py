"""Hierarchical VAE with spectrally separable scales and fast latent refinement."""
from .inference import InferenceConfig, amortized_infer, hybrid_infer, infer, iterative_infer
from .model import Hierarchy, ModelConfig, build_model
from .spectral import build_partition, decompose, dft2, idft2, recompose

__all__ = ["Hierarchy", "ModelConfig", "build_model", "InferenceConfig", "infer", "amortized_infer",
           "hybrid_infer", "iterative_infer", "build_partition", "decompose", "recompose", "dft2", "idft2"]
__version__ = "0.1.0"
