"""Energy-efficient multi-cell video streaming with (permutation-equivariant) DDPG."""

__version__ = "0.1.0"
