"""Checkpoint container: named parameter tensors in a single .npz file.

Compatibility between a checkpoint and a model is checked by the (name,
shape) of every tensor, in both directions, so a mismatched config fails
with the offending tensor named instead of silently training from
garbage.
"""

from __future__ import annotations

import numpy as np


class CheckpointError(ValueError):
    """Checkpoint is missing, extra, or shape-incompatible tensors."""


def save_checkpoint(params: dict, path: str) -> None:
    np.savez(path, **{name: t.data for name, t in params.items()})


def load_checkpoint(path: str) -> dict:
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}


def load_into(params: dict, path: str) -> None:
    """Copy checkpoint arrays into the model's parameter tensors."""
    stored = load_checkpoint(path)
    missing = sorted(set(params) - set(stored))
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing tensor {missing[0]!r}")
    extra = sorted(set(stored) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint {path} has unexpected tensor {extra[0]!r}")
    for name, tensor in params.items():
        if stored[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {stored[name].shape} "
                f"!= model shape {tensor.data.shape}")
    for name, tensor in params.items():
        tensor.data[...] = stored[name]
