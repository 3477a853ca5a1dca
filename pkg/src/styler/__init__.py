"""Cross-model style transfer on a toy latent diffusion model.

A small text-conditioned UNet is trained on procedural shape images; low-rank
adapters learn a style from a single image; content is carried over by
injecting features and self-attention maps recorded from the base model's
denoising of the content image.
"""

__version__ = "0.1.0"
