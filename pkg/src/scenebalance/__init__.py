"""Scene-balanced training data for SAR ship detection.

Learn scene features with a GAN discriminator, split the training images
into two scenes with k-means, then augment the smaller scene to parity.
"""

__version__ = "0.1.0"
