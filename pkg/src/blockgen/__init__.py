"""blockgen: block-guided toy diffusion for counterfactual image-text
sets, set-structured losses, and a procedural compositional benchmark."""

__version__ = "0.1.0"
