"""Multi-behavior sequential recommendation: a masked sequence autoencoder
with behavior-aware rotary attention, plus a guided latent diffusion model
that transfers behavior-agnostic preferences into behavior-specific
next-item predictions.
"""

__version__ = "0.1.0"
