"""Point cloud completion network: architecture, loss, training, inference."""
from .loss import ALPHA_BREAKPOINTS, ALPHA_VALUES, alpha_schedule, \
    loss_gradient, total_loss
from .network import N_CLASSES, NetworkConfig, NetworkParams, cloud_to_input, \
    decode_coarse, decode_fold, encode, forward, grid_coordinates, \
    init_params, load_checkpoint, reconstruct, save_checkpoint
from .training import LOG_COLUMNS, PreparedSample, TrainingConfig, \
    TrainResult, prepare_sample, train, validation_chamfer, \
    write_training_log

__all__ = [
    "ALPHA_BREAKPOINTS", "ALPHA_VALUES", "LOG_COLUMNS", "N_CLASSES",
    "NetworkConfig", "NetworkParams", "PreparedSample", "TrainResult",
    "TrainingConfig", "alpha_schedule", "cloud_to_input", "decode_coarse",
    "decode_fold", "encode", "forward", "grid_coordinates", "init_params",
    "load_checkpoint", "loss_gradient", "prepare_sample", "reconstruct",
    "save_checkpoint", "total_loss", "train", "validation_chamfer",
    "write_training_log",
]
