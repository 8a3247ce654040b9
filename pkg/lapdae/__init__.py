"""
Laplacian denoising autoencoder toolkit
Numpy tensor kernels, pyramid corruption, model, training and evaluation
"""

__version__ = "0.3.0"
