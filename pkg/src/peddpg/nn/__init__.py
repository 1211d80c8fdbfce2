"""Small dense-network engine with permutation-equivariant/invariant layers."""

from peddpg.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from peddpg.nn.layers import Dense, Flatten, Identity, PEDense, PIDense, ReLU, ScaledTanh, Squeeze
from peddpg.nn.network import (
    ARCHITECTURES,
    Network,
    build_actor,
    build_critic,
    closed_form_counts,
    count_free_params,
)
from peddpg.nn.optim import Adam, hard_update, soft_update

__all__ = [
    "ARCHITECTURES",
    "Adam",
    "CheckpointError",
    "Dense",
    "Flatten",
    "Identity",
    "Network",
    "PEDense",
    "PIDense",
    "ReLU",
    "ScaledTanh",
    "Squeeze",
    "build_actor",
    "build_critic",
    "closed_form_counts",
    "count_free_params",
    "hard_update",
    "load_checkpoint",
    "save_checkpoint",
    "soft_update",
]
