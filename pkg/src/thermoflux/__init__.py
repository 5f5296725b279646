"""Self-supervised depth and ego-motion objectives for thermal + RGB video:
differentiable warping, multi-spectral consistency losses, a synthetic
renderer, direct refinement and evaluation metrics."""

__version__ = "0.1.0"
