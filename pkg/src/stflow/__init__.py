"""Station traffic forecasting for bike-share networks.

Trip CSVs are binned into half-hour arrival+departure counts per station,
stations are linked through a Gaussian distance kernel, and a small
spatio-temporal graph convolutional network predicts the next bins.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
