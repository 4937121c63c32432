"""Adversarially trained convolutional autoencoder classifier.

Subpackages cover the full desk-scale experiment loop: synthetic data
generation and manifests (`dataset`), image preprocessing (`preprocess`),
the encoder/decoder/discriminator networks (`model`), the three-phase
training loop (`training`), metrics and cross-validation (`evaluation`),
and the command-line entry point (`cli`).
"""

__version__ = "0.1.0"
