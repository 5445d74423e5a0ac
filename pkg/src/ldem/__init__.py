"""VAE speech prior with NMF noise, enhanced by Langevin-dynamics EM."""

__version__ = "0.1.0"
