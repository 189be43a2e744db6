"""Raw low-light enhancement with a latent diffusion model, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
