"""Graph-conditioned sparse self-attention with attention diffusion for code graphs."""

__version__ = "0.1.0"
