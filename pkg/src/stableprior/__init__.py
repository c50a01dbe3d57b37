"""Symmetric alpha-stable weight priors for neural network training.

Subpackages and modules:

stable    density, characteristic function and sampler for S-alpha-S laws
table     precomputed lookup tables of the log-density derivative
net       minimal float64 feed-forward engine (dense/conv/batchnorm/...)
train     gradient-ascent trainer with momentum and table-driven priors
datasets  CIFAR-10 binary reader, synthetic classification data, augmentation
analysis  sparsity, magnitude pruning, weight KDE, constraint-set geometry
cli       command-line entry points
"""

__version__ = "0.1.0"
