"""Inductive attention model: a recurrent cell that queries a FIFO memory of its
own past predictions to anticipate upcoming actions."""

from .cell import (CellConfig, IamState, IndexedMemory, MemoryEntry, init_params,
                   memory_footprint_bytes, step)
from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import ContractError, NonFiniteError, ParamStore, Rng, Tensor
from .training import TrainConfig, train

__all__ = [
    "CellConfig", "ContractError", "IamState", "IndexedMemory", "MemoryEntry",
    "NonFiniteError", "ParamStore", "Rng", "Tensor", "TrainConfig", "init_params",
    "load_checkpoint", "memory_footprint_bytes", "save_checkpoint", "step", "train",
]
