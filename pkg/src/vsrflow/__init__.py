"""Multi-modal cascaded video super-resolution on a toy latent diffusion transformer."""
