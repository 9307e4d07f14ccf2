"""Adam training loop with staged loss weighting and best-val checkpointing.

Single-threaded and deterministic: shuffling comes from a seeded generator
keyed by epoch, batch gradients reduce in fixed index order, and reruns with
the same seed reproduce parameters bitwise.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .._rng import STAGE_POOL, STAGE_SHUFFLE, rng_for
from ..errors import InvalidArgumentError, NumericalError
from ..geometry import ALL_CLASSES, chamfer_distance
from .loss import ALPHA_BREAKPOINTS, ALPHA_VALUES, alpha_schedule, \
    loss_gradient
from .network import NetworkConfig, NetworkParams, cloud_to_input, forward, \
    init_params, save_checkpoint

LOG_COLUMNS = ("epoch", "step", "lr", "alpha", "train_loss",
               "val_chamfer_lvendo", "val_chamfer_lvepi", "val_chamfer_rv")


@dataclass(frozen=True)
class TrainingConfig:
    """Desk-scale defaults; paper_scale() restores the published schedule."""
    epochs: int = 60
    batch_size: int = 8
    initial_lr: float = 1e-3
    lr_decay_rate: float = 0.7
    lr_decay_every_steps: int = 2000
    alpha_breakpoints: tuple = ALPHA_BREAKPOINTS
    alpha_values: tuple = ALPHA_VALUES
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    compute_dtype: str = "float32"   # gradient math; params stay float64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if self.initial_lr <= 0 or not 0 < self.lr_decay_rate <= 1:
            raise InvalidArgumentError("bad learning-rate schedule")
        if self.lr_decay_every_steps < 1:
            raise InvalidArgumentError("lr_decay_every_steps must be >= 1")
        if self.compute_dtype not in ("float32", "float64"):
            raise InvalidArgumentError(
                "compute_dtype must be 'float32' or 'float64'")

    @classmethod
    def paper_scale(cls, seed: int = 0) -> "TrainingConfig":
        return cls(epochs=2000, batch_size=8, initial_lr=1e-4,
                   lr_decay_rate=0.7, lr_decay_every_steps=30000, seed=seed)

    def lr_for_step(self, global_step: int) -> float:
        decays = global_step // self.lr_decay_every_steps
        return self.initial_lr * self.lr_decay_rate ** decays


@dataclass
class PreparedSample:
    """Network input and per-class ground truth, both centered on the
    sparse cloud's centroid."""
    net_in: np.ndarray               # (3*n_in, 4)
    gt: tuple                        # three (k, 3) arrays
    centroid: np.ndarray


def prepare_sample(sparse_cloud, gt_cloud, n_in: int,
                   rng: np.random.Generator | None = None) -> PreparedSample:
    centroid = sparse_cloud.points.mean(axis=0)
    net_in = cloud_to_input(sparse_cloud, n_in, rng=rng, center=centroid)
    gt = tuple(gt_cloud.class_points(cls) - centroid for cls in ALL_CLASSES)
    if any(len(g) == 0 for g in gt):
        raise InvalidArgumentError("ground truth must cover all classes")
    return PreparedSample(net_in, gt, centroid)


@dataclass
class TrainResult:
    params: NetworkParams            # best-validation parameters
    final_params: NetworkParams
    log: list
    best_val: float
    global_step: int


class _Adam:
    def __init__(self, cfg: TrainingConfig, arrays: dict):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays: dict, grads: dict, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            arrays[name] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def validation_chamfer(params: NetworkParams, val_samples,
                       dtype="float64") -> dict:
    """Mean per-class Chamfer between dense output and ground truth."""
    sums = {cls: 0.0 for cls in ALL_CLASSES}
    for sample in val_samples:
        _, dense = forward(params, sample.net_in, dtype=np.dtype(dtype))
        for i, cls in enumerate(ALL_CLASSES):
            sums[cls] += chamfer_distance(dense[i], sample.gt[i])
    return {cls: sums[cls] / len(val_samples) for cls in ALL_CLASSES}


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in LOG_COLUMNS])


def train(train_samples, val_samples, net_config: NetworkConfig,
          train_config: TrainingConfig, checkpoint_path=None,
          log_path=None, initial_params: NetworkParams | None = None,
          progress=None) -> TrainResult:
    """Run the full schedule and return best-validation parameters.

    Divergence (non-finite loss) raises NumericalError carrying the last
    finite parameter state; if checkpoint_path is set, that state is saved
    there first.
    """
    if not train_samples or not val_samples:
        raise InvalidArgumentError("need nonempty train and val sets")
    cfg = train_config
    params = (initial_params.copy() if initial_params is not None
              else init_params(net_config, cfg.seed))
    adam = _Adam(cfg, params.arrays)
    steps_per_epoch = -(-len(train_samples) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    best_val = np.inf
    best_params = params.copy()
    log_rows = []
    global_step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng_for(cfg.seed, STAGE_SHUFFLE, epoch).permutation(
            len(train_samples))
        epoch_loss = 0.0
        lr = alpha = None
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [(train_samples[i].net_in, train_samples[i].gt)
                     for i in idx]
            lr = cfg.lr_for_step(global_step)
            alpha = alpha_schedule(global_step, total_steps,
                                   cfg.alpha_breakpoints, cfg.alpha_values)
            try:
                loss, grads = loss_gradient(params, batch, alpha,
                                            dtype=cfg.compute_dtype)
            except NumericalError as exc:
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, params, global_step,
                                    adam.state())
                raise NumericalError(
                    f"training diverged at step {global_step}: {exc}",
                    last_good=params, step=global_step) from exc
            adam.step(params.arrays, grads, lr)
            epoch_loss += loss
            global_step += 1
        val = validation_chamfer(params, val_samples, cfg.compute_dtype)
        val_mean = sum(val.values()) / len(val)
        if val_mean < best_val:
            best_val = val_mean
            best_params = params.copy()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best_params, global_step,
                                adam.state())
        row = {
            "epoch": epoch,
            "step": global_step,
            "lr": lr,
            "alpha": alpha,
            "train_loss": epoch_loss / len(train_samples),
            "val_chamfer_lvendo": val[ALL_CLASSES[0]],
            "val_chamfer_lvepi": val[ALL_CLASSES[1]],
            "val_chamfer_rv": val[ALL_CLASSES[2]],
        }
        log_rows.append(row)
        if log_path is not None:
            write_training_log(log_path, log_rows)
        if progress is not None:
            progress(row)
    return TrainResult(best_params, params, log_rows, float(best_val),
                       global_step)
