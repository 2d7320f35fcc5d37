"""Joint RGB / alpha-matte latent diffusion on a small numpy autodiff core.

One denoiser handles three tasks over a channel-concatenated latent, routed
by a task identifier: RGB image to matte, matte to RGB image, and joint
generation of a transparent image.
"""

__version__ = "0.1.0"
