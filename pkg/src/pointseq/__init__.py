"""Point-cloud sequence pretraining kit.

Space-filling-curve serialization of patch tokens, a hybrid selective-SSM /
latent-attention encoder, and conditional diffusion denoising of masked
tokens, all on a small numpy autodiff substrate.
"""

__version__ = "0.1.0"
