"""Local-frame equivariant message passing for molecular polarizability tensors."""

from .frames import Frame, FrameConfig, build_frame, frames_for_molecule, relative_rotation
from .model import ModelConfig, forward_molecule, init_params, param_count
from .molgraph import (
    Molecule,
    build_graph,
    gen_synthetic,
    read_dataset,
    split_by_molecule,
    synth_polarizability,
    write_dataset,
)
from .trainer import TrainConfig, evaluate, load_model_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Frame",
    "FrameConfig",
    "ModelConfig",
    "Molecule",
    "TrainConfig",
    "build_frame",
    "build_graph",
    "evaluate",
    "forward_molecule",
    "frames_for_molecule",
    "gen_synthetic",
    "init_params",
    "load_model_checkpoint",
    "param_count",
    "read_dataset",
    "relative_rotation",
    "split_by_molecule",
    "synth_polarizability",
    "train",
    "write_dataset",
]
