"""Two-term class-summed Chamfer loss and its gradient.

total = sum over classes of CD(coarse_c, gt_c) + alpha * CD(dense_c, gt_c),
with alpha following a staged piecewise-constant schedule. Gradients come
from the autodiff graph; Chamfer correspondences are frozen at the forward
argmin with lowest-index tie-breaking.
"""
import numpy as np

from ..errors import InvalidArgumentError, NumericalError
from ..geometry import chamfer_distance
from . import autodiff as ad
from .network import N_CLASSES, NetworkParams, _check_input, _coarse_graph, \
    _encode_graph, _fold_graph, _params_to_vars

ALPHA_VALUES = (0.01, 0.1, 0.5, 1.0)
ALPHA_BREAKPOINTS = (0.25, 0.5, 0.75)


def _check_class_sets(sets, name):
    sets = [np.asarray(s, dtype=np.float64) for s in sets]
    if len(sets) != N_CLASSES:
        raise InvalidArgumentError(f"{name} must have {N_CLASSES} classes")
    for s in sets:
        if s.ndim != 2 or s.shape[1] != 3 or len(s) == 0:
            raise InvalidArgumentError(
                f"every class in {name} must be a nonempty (k, 3) array")
    return sets


def total_loss(coarse, dense, gt, alpha: float) -> float:
    """Class-summed coarse + alpha * dense Chamfer against ground truth."""
    if alpha < 0:
        raise InvalidArgumentError("alpha must be >= 0")
    coarse = _check_class_sets(coarse, "coarse")
    dense = _check_class_sets(dense, "dense")
    gt = _check_class_sets(gt, "gt")
    total = 0.0
    for c in range(N_CLASSES):
        total += chamfer_distance(coarse[c], gt[c])
        total += alpha * chamfer_distance(dense[c], gt[c])
    return float(total)


def alpha_schedule(global_step: int, total_steps: int,
                   breakpoints=ALPHA_BREAKPOINTS,
                   values=ALPHA_VALUES) -> float:
    """Piecewise-constant dense-term weight over training progress."""
    if total_steps <= 0:
        raise InvalidArgumentError("total_steps must be positive")
    if not 0 <= global_step <= total_steps:
        raise InvalidArgumentError("step must lie in [0, total_steps]")
    if len(values) != len(breakpoints) + 1:
        raise InvalidArgumentError("need one more value than breakpoints")
    progress = global_step / total_steps
    for frac, value in zip(breakpoints, values):
        if progress < frac:
            return value
    return values[-1]


def _sample_loss_graph(params_vars, cfg, net_in, gt, alpha, dtype):
    latent = _encode_graph(cfg, params_vars, ad.constant(net_in, dtype))
    coarse = _coarse_graph(cfg, params_vars, latent)
    dense = _fold_graph(cfg, params_vars, latent, coarse)
    terms = []
    for c in range(N_CLASSES):
        coarse_c = ad.slice_rows(coarse, c * cfg.m, (c + 1) * cfg.m)
        terms.append(ad.chamfer(coarse_c, gt[c]))
        terms.append(ad.scale(ad.chamfer(dense[c], gt[c]), alpha))
    return ad.add_scalars(terms)


def loss_gradient(params: NetworkParams, batch, alpha: float,
                  dtype=np.float64):
    """-> (summed batch loss, gradient dict keyed like params.arrays).

    Batch reduction is a plain sum, so a duplicated sample contributes
    exactly twice its gradient. A non-finite loss raises NumericalError.
    Tests use the float64 default; training may pass float32 for speed.
    """
    if alpha < 0:
        raise InvalidArgumentError("alpha must be >= 0")
    if not batch:
        raise InvalidArgumentError("batch must not be empty")
    cfg = params.config
    dtype = np.dtype(dtype)
    # one isolated graph and backward pass per sample, reduced in index
    # order: identical samples then contribute bitwise-identical gradients
    loss = 0.0
    grads = None
    for position, (net_in, gt) in enumerate(batch):
        net_in = _check_input(cfg, net_in, dtype)
        gt = [g.astype(dtype, copy=False)
              for g in _check_class_sets(gt, "gt")]
        pvars = _params_to_vars(params, dtype)
        # overflow surfaces through the explicit finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            node = _sample_loss_graph(pvars, cfg, net_in, gt, alpha, dtype)
        sample_loss = float(node.value)
        if not np.isfinite(sample_loss):
            raise NumericalError(
                f"non-finite loss {sample_loss} at batch position "
                f"{position} (alpha={alpha}, batch={len(batch)})")
        ad.backward(node)
        loss += sample_loss
        if grads is None:
            grads = {name: (var.grad if var.grad is not None
                            else np.zeros_like(var.value))
                     for name, var in pvars.items()}
        else:
            for name, var in pvars.items():
                if var.grad is not None:
                    grads[name] += var.grad
    return loss, grads
