"""SciMix: semantic-content swapping autoencoder for labeled mixing augmentation."""

__version__ = "0.1.0"
