"""SO(3)-equivariant generative transport for stochastic dynamics of tensor clouds."""

__version__ = "0.1.0"
