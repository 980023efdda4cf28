"""Super-resolution reconstruction of point emitters from camera frames.

Physics-based frame simulation, a from-scratch fully convolutional network
with its own backpropagation, incremental training and classical
localization tools for evaluating reconstructions.
"""

__version__ = "0.1.0"
