"""Point-prior radiance fields with diffusion-densified point clouds."""
__version__ = "0.1.0"
