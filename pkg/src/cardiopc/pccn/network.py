"""Multi-class point completion network.

Encoder: two PointNet-style stages of shared per-point MLPs with max pooling
and a skip pathway (stage-2 input is the per-point feature concatenated with
the stage-1 global feature). Decoder: a coarse MLP emitting m points per
class, then two folding stages that deform a g x g planar patch around each
coarse point and add the result as a residual offset.

Inputs are rows of [x, y, z, class], one fixed-size block per class. The
dense output keeps the class slot positional: block c of the output is class
c by construction, nothing is predicted about class membership.
"""
import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .._rng import STAGE_INIT, STAGE_POOL, rng_for
from ..errors import CompatibilityError, InvalidArgumentError, ShapeError
from ..geometry import ALL_CLASSES, LabeledPointCloud
from . import autodiff as ad

N_CLASSES = 3
_CKPT_MAGIC = b"CPCNCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture sizes. Defaults are desk scale; paper_scale() gives the
    published configuration."""
    n_in: int = 400              # input points per class
    latent_dim: int = 256
    m: int = 48                  # coarse points per class
    grid: int = 4                # folding patch side, p = m * grid**2
    grid_side_mm: float = 5.0
    encoder1_widths: tuple = (64, 128)
    encoder2_widths: tuple = (256,)
    coarse_widths: tuple = (256,)
    folding_widths: tuple = (128, 64, 3)

    def __post_init__(self):
        sizes = (self.n_in, self.latent_dim, self.m, self.grid)
        if any(int(s) != s or s < 1 for s in sizes):
            raise InvalidArgumentError("network sizes must be integers >= 1")
        for widths in (self.encoder1_widths, self.encoder2_widths,
                       self.coarse_widths, self.folding_widths):
            if not widths or any(w < 1 for w in widths):
                raise InvalidArgumentError("all layer widths must be >= 1")
        if self.folding_widths[-1] != 3:
            raise InvalidArgumentError("folding MLP must end in width 3")
        if self.grid_side_mm <= 0:
            raise InvalidArgumentError("grid_side_mm must be positive")

    @property
    def p(self) -> int:
        """Dense points per class."""
        return self.m * self.grid ** 2

    @classmethod
    def paper_scale(cls) -> "NetworkConfig":
        return cls(n_in=12000, latent_dim=1024, m=750, grid=4)


@dataclass
class NetworkParams:
    config: NetworkConfig
    arrays: dict = field(default_factory=dict)

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config,
                             {k: v.copy() for k, v in self.arrays.items()})


def _layer_dims(cfg: NetworkConfig):
    """(prefix, in_dim, out_dim) for every dense layer, in storage order."""
    dims = []

    def mlp(prefix, d_in, widths):
        for i, w in enumerate(widths):
            dims.append((f"{prefix}.{i}", d_in, w))
            d_in = w

    mlp("enc1", 4, cfg.encoder1_widths)
    f1 = cfg.encoder1_widths[-1]
    mlp("enc2", 2 * f1, tuple(cfg.encoder2_widths) + (cfg.latent_dim,))
    mlp("coarse", cfg.latent_dim,
        tuple(cfg.coarse_widths) + (N_CLASSES * cfg.m * 3,))
    mlp("fold1", cfg.latent_dim + 5, cfg.folding_widths)
    mlp("fold2", cfg.latent_dim + 6, cfg.folding_widths)
    return dims


def init_params(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """He-style uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    rng = rng_for(seed, STAGE_INIT)
    arrays = {}
    for name, d_in, d_out in _layer_dims(config):
        limit = np.sqrt(6.0 / d_in)
        arrays[f"{name}.w"] = rng.uniform(-limit, limit, size=(d_in, d_out))
        arrays[f"{name}.b"] = np.zeros(d_out)
    return NetworkParams(config, arrays)


def _params_to_vars(params: NetworkParams, dtype=np.float64) -> dict:
    return {k: ad.Var(v.astype(dtype, copy=False))
            for k, v in params.arrays.items()}


def _mlp_graph(x, pvars, prefix, n_layers):
    """Shared dense stack; ReLU on hidden layers, linear final layer."""
    for i in range(n_layers):
        x = ad.add_bias(ad.matmul(x, pvars[f"{prefix}.{i}.w"]),
                        pvars[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def _encode_graph(cfg: NetworkConfig, pvars: dict, x: ad.Var) -> ad.Var:
    n = x.value.shape[0]
    feats = _mlp_graph(x, pvars, "enc1", len(cfg.encoder1_widths))
    pooled = ad.max_rows(feats)
    skip = ad.concat_cols([feats, ad.broadcast_rows(pooled, n)])
    feats2 = _mlp_graph(skip, pvars, "enc2", len(cfg.encoder2_widths) + 1)
    return ad.max_rows(feats2)           # (1, latent)


def _coarse_graph(cfg: NetworkConfig, pvars: dict, latent: ad.Var) -> ad.Var:
    flat = _mlp_graph(latent, pvars, "coarse", len(cfg.coarse_widths) + 1)
    return ad.reshape(flat, (N_CLASSES * cfg.m, 3))


def grid_coordinates(cfg: NetworkConfig) -> np.ndarray:
    """(grid**2, 2) patch coordinates spanning grid_side_mm, row-major."""
    if cfg.grid == 1:
        ticks = np.array([0.0])
    else:
        half = cfg.grid_side_mm / 2.0
        ticks = np.linspace(-half, half, cfg.grid)
    uu, vv = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def _fold_graph(cfg: NetworkConfig, pvars: dict, latent: ad.Var,
                coarse: ad.Var) -> list:
    """Per-class dense point Vars, each (p, 3)."""
    g2 = cfg.grid ** 2
    patch = np.tile(grid_coordinates(cfg), (cfg.m, 1))
    n_fold = len(cfg.folding_widths)
    dense = []
    for c in range(N_CLASSES):
        coarse_c = ad.slice_rows(coarse, c * cfg.m, (c + 1) * cfg.m)
        anchors = ad.repeat_rows(coarse_c, g2)
        lat = ad.broadcast_rows(latent, cfg.p)
        fold1_in = ad.concat_cols(
            [lat, anchors, ad.constant(patch, latent.value.dtype)])
        y1 = _mlp_graph(fold1_in, pvars, "fold1", n_fold)
        fold2_in = ad.concat_cols([lat, anchors, y1])
        y2 = _mlp_graph(fold2_in, pvars, "fold2", n_fold)
        dense.append(ad.add(anchors, y2))
    return dense


def _check_input(cfg: NetworkConfig, cloud: np.ndarray,
                 dtype=np.float64) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=dtype)
    expected = (N_CLASSES * cfg.n_in, 4)
    if cloud.shape != expected:
        raise ShapeError(
            f"encoder input must be {expected}, got {cloud.shape}")
    return cloud


def encode(params: NetworkParams, cloud: np.ndarray) -> np.ndarray:
    """Latent vector for a (3*n_in, 4) input of [x, y, z, class] rows."""
    cloud = _check_input(params.config, cloud)
    latent = _encode_graph(params.config, _params_to_vars(params),
                           ad.constant(cloud))
    return latent.value[0].copy()


def decode_coarse(params: NetworkParams, latent: np.ndarray) -> np.ndarray:
    """(3, m, 3) coarse points, class-major."""
    cfg = params.config
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != (cfg.latent_dim,):
        raise ShapeError(f"latent must have shape ({cfg.latent_dim},), "
                         f"got {latent.shape}")
    out = _coarse_graph(cfg, _params_to_vars(params),
                        ad.constant(latent[None, :]))
    return out.value.reshape(N_CLASSES, cfg.m, 3).copy()


def decode_fold(params: NetworkParams, latent: np.ndarray,
                coarse: np.ndarray) -> np.ndarray:
    """(3, p, 3) dense points: folded patches as residuals on the coarse."""
    cfg = params.config
    latent = np.asarray(latent, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    if latent.shape != (cfg.latent_dim,):
        raise ShapeError(f"latent must have shape ({cfg.latent_dim},), "
                         f"got {latent.shape}")
    if coarse.shape != (N_CLASSES, cfg.m, 3):
        raise ShapeError(f"coarse must have shape (3, {cfg.m}, 3), "
                         f"got {coarse.shape}")
    pvars = _params_to_vars(params)
    coarse_var = ad.constant(coarse.reshape(N_CLASSES * cfg.m, 3))
    dense = _fold_graph(cfg, pvars, ad.constant(latent[None, :]), coarse_var)
    return np.stack([d.value for d in dense])


def forward(params: NetworkParams, cloud: np.ndarray, dtype=np.float64):
    """Full pass: input (3*n_in, 4) -> (coarse (3,m,3), dense (3,p,3))."""
    cfg = params.config
    cloud = _check_input(cfg, cloud, dtype)
    pvars = _params_to_vars(params, dtype)
    latent = _encode_graph(cfg, pvars, ad.constant(cloud, dtype))
    coarse = _coarse_graph(cfg, pvars, latent)
    dense = _fold_graph(cfg, pvars, latent, coarse)
    return (coarse.value.reshape(N_CLASSES, cfg.m, 3).copy(),
            np.stack([d.value for d in dense]))


def cloud_to_input(cloud: LabeledPointCloud, n_in: int,
                   rng: np.random.Generator | None = None,
                   center: np.ndarray | None = None) -> np.ndarray:
    """(3*n_in, 4) network input from a labeled cloud, class blocks in order.

    Classes already holding exactly n_in points are passed through; others
    are pooled to n_in by uniform sampling with replacement, which requires
    an rng. `center` is subtracted from the coordinates when given.
    """
    blocks = []
    for cls in ALL_CLASSES:
        pts = cloud.class_points(cls)
        if len(pts) == 0:
            raise InvalidArgumentError(f"class {cls.name} has no points")
        if len(pts) != n_in:
            if rng is None:
                raise InvalidArgumentError(
                    f"class {cls.name} has {len(pts)} points, need {n_in}; "
                    "pass an rng to pool with replacement")
            pts = pts[rng.integers(0, len(pts), n_in)]
        if center is not None:
            pts = pts - center
        blocks.append(np.column_stack([pts, np.full(len(pts), float(cls))]))
    return np.vstack(blocks)


def reconstruct(params: NetworkParams, sparse,
                rng: np.random.Generator | None = None) -> LabeledPointCloud:
    """Dense completion of a sparse sample as a labeled cloud.

    The input is centered on the sparse cloud's centroid and the offset is
    added back to the output, a pure bookkeeping translation.
    """
    cfg = params.config
    cloud = sparse.cloud
    centroid = cloud.points.mean(axis=0)
    if rng is None:
        rng = rng_for(0, STAGE_POOL)
    net_in = cloud_to_input(cloud, cfg.n_in, rng=rng, center=centroid)
    _, dense = forward(params, net_in)
    points = dense.reshape(N_CLASSES * cfg.p, 3) + centroid
    labels = np.repeat(np.array([int(c) for c in ALL_CLASSES],
                                dtype=np.uint8), cfg.p)
    return LabeledPointCloud(points, labels, cloud.phase)


def save_checkpoint(path, params: NetworkParams, global_step: int = 0,
                    optimizer: dict | None = None) -> None:
    """Versioned binary container: magic, JSON header, raw float64 arrays.

    Byte-for-byte reproducible for identical contents (no timestamps).
    """
    arrays = dict(params.arrays)
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"t": int(optimizer["t"])}
        for kind in ("m", "v"):
            for name, arr in optimizer[kind].items():
                arrays[f"adam.{kind}.{name}"] = arr
    index = []
    offset = 0
    for name, arr in arrays.items():
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": _CKPT_VERSION,
        "net_config": dataclasses.asdict(params.config),
        "global_step": int(global_step),
        "optimizer": opt_meta,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """-> (NetworkParams, global_step, optimizer state or None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CompatibilityError(f"{path} is not a checkpoint file")
    start = len(_CKPT_MAGIC)
    if len(data) < start + 8:
        raise CompatibilityError(f"truncated checkpoint: {path}")
    (header_len,) = struct.unpack("<Q", data[start:start + 8])
    if len(data) < start + 8 + header_len:
        raise CompatibilityError(f"truncated checkpoint: {path}")
    body = start + 8 + header_len
    try:
        header = json.loads(data[start + 8:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CompatibilityError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != _CKPT_VERSION:
        raise CompatibilityError(
            f"checkpoint format {header.get('format_version')} not supported")
    cfg_dict = dict(header["net_config"])
    for key in ("encoder1_widths", "encoder2_widths", "coarse_widths",
                "folding_widths"):
        cfg_dict[key] = tuple(cfg_dict[key])
    config = NetworkConfig(**cfg_dict)
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        lo = body + entry["offset"]
        hi = lo + size * 8
        if hi > len(data):
            raise CompatibilityError(f"truncated checkpoint: {path}")
        arrays[entry["name"]] = np.frombuffer(
            data[lo:hi], dtype="<f8").reshape(shape).copy()
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = {"t": header["optimizer"]["t"], "m": {}, "v": {}}
        for k, v in arrays.items():
            if k.startswith("adam.m."):
                optimizer["m"][k[len("adam.m."):]] = v
            elif k.startswith("adam.v."):
                optimizer["v"][k[len("adam.v."):]] = v
    return (NetworkParams(config, params), header["global_step"], optimizer)
