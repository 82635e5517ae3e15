"""Desk-scale 4D head avatar pipeline.

A single-image portrait is lifted to an animatable triplane radiance field:
a latent diffusion transformer predicts a parametric triplane from the image,
a mesh-driven UV rasterizer deforms its dynamic component per expression, and
a motion-aware renderer produces the final frames via hierarchical volume
rendering. Everything trains on a procedurally generated synthetic-identity
dataset so the whole pipeline runs and verifies on a laptop CPU.
"""

__version__ = "0.1.0"
