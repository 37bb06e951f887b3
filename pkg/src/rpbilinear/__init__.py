"""Low-rank random-projection bilinear pooling with a kernel verification harness."""

__version__ = "0.1.0"
