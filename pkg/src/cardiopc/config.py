"""Run configuration: one INI file with a section per pipeline stage.

Every knob has an embedded default (the desk-scale run), so an empty or
absent file is a valid configuration. Parse errors and bad values raise
ConfigError with a file:line anchor where one exists.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import os
import re
from dataclasses import dataclass, replace

from .errors import CardioPCError, ConfigError
from .geometry import Phase
from .pccn import NetworkConfig, TrainingConfig
from .slicing import (
    LEVEL_ORDER,
    DatasetConfig,
    SliceProtocol,
    misalignment_level,
)

_SPLITS = ("train", "val", "test")

# section -> key -> (type tag, default as written, comment)
_SCHEMA = {
    "run": {
        "out_dir": ("str", "runs/desk", "base output directory (--out overrides)"),
        "seed": ("int", "0", "master seed for every stage (--seed overrides)"),
    },
    "dataset": {
        "level": ("level", "mild", "misalignment level of the generated data"),
        "n_shapes": ("int", "100", "sampled anatomies"),
        "transforms_per_shape": ("int", "2", "misalignment replicas per anatomy"),
        "k_modes": ("int", "10", "deformation modes of the shape model"),
        "n_per_class": ("int", "400", "sparse cloud points per class"),
        "p_gt_per_class": ("int", "768", "ground-truth points per class"),
        "n_contour_points": ("int", "64", "resampled points per slice contour"),
        "phases": ("phases", "ED, ES", "cardiac phases to synthesize"),
        "splits": ("splits", "train, val, test", "splits to materialize"),
    },
    "protocol": {
        "n_sax": ("int", "10", "short-axis slices"),
        "slice_thickness_mm": ("float", "8.0", ""),
        "slice_gap_mm": ("float", "2.0", ""),
        "basal_fraction": ("float", "0.9", "topmost SAX position along the axis"),
        "landmark_jitter_sd_mm": ("float", "1.0", "axis landmark noise"),
        "lax_azimuths_deg": ("floats", "60.0, 150.0", "long-axis view angles"),
    },
    "network": {
        "n_in": ("int", "400", "input points per class"),
        "latent_dim": ("int", "256", ""),
        "m": ("int", "48", "coarse anchors per class"),
        "grid": ("int", "4", "folding patch side; dense = m * grid^2"),
        "grid_side_mm": ("float", "5.0", ""),
        "encoder1_widths": ("ints", "64, 128", ""),
        "encoder2_widths": ("ints", "256", ""),
        "coarse_widths": ("ints", "256", ""),
        "folding_widths": ("ints", "128, 64, 3", ""),
    },
    "training": {
        "epochs": ("int", "60", ""),
        "batch_size": ("int", "8", ""),
        "initial_lr": ("float", "0.001", ""),
        "lr_decay_rate": ("float", "0.7", ""),
        "lr_decay_every_steps": ("int", "2000", ""),
        "alpha_breakpoints": ("floats", "0.25, 0.5, 0.75", "fractions of total steps"),
        "alpha_values": ("floats", "0.01, 0.1, 0.5, 1.0", "dense-term weights"),
        "compute_dtype": ("str", "float32", "gradient arithmetic width"),
    },
    "mesh": {
        "max_attempts": ("int", "4", "ball-pivot retries per cloud"),
        "basal_band_mm": ("float", "6.0", "rim band kept open on LV surfaces"),
    },
    "evaluate": {
        "levels": ("levels", "mild", "levels to reconstruct and score"),
        "split": ("split", "test", ""),
        "max_unpaired_fraction": ("float", "0.05", "abort threshold for missing pairs"),
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    """Validated, typed view of one run configuration."""

    out_dir: str
    seed: int
    dataset_level: str
    n_shapes: int
    transforms_per_shape: int
    k_modes: int
    n_per_class: int
    p_gt_per_class: int
    n_contour_points: int
    phases: tuple
    splits: tuple
    protocol: SliceProtocol
    network: NetworkConfig
    training: TrainingConfig
    mesh_max_attempts: int
    basal_band_mm: float
    eval_levels: tuple
    eval_split: str
    max_unpaired_fraction: float

    def dataset_config(self, dataset_root: str,
                       level: str | None = None) -> DatasetConfig:
        return DatasetConfig(
            out_dir=dataset_root,
            level_name=level if level is not None else self.dataset_level,
            n_shapes=self.n_shapes,
            transforms_per_shape=self.transforms_per_shape,
            seed=self.seed,
            k_modes=self.k_modes,
            n_per_class=self.n_per_class,
            p_gt_per_class=self.p_gt_per_class,
            n_contour_points=self.n_contour_points,
            phases=self.phases,
            protocol=self.protocol)


def _fmt(tag: str, value) -> str:
    if tag in ("ints", "floats", "levels", "splits"):
        return ", ".join(str(v) for v in value)
    if tag == "phases":
        return ", ".join(p.value for p in value)
    return str(value)


def _section_values(cfg: PipelineConfig) -> dict:
    return {
        "run": {"out_dir": cfg.out_dir, "seed": cfg.seed},
        "dataset": {
            "level": cfg.dataset_level, "n_shapes": cfg.n_shapes,
            "transforms_per_shape": cfg.transforms_per_shape,
            "k_modes": cfg.k_modes, "n_per_class": cfg.n_per_class,
            "p_gt_per_class": cfg.p_gt_per_class,
            "n_contour_points": cfg.n_contour_points,
            "phases": cfg.phases, "splits": cfg.splits},
        "protocol": {
            "n_sax": cfg.protocol.n_sax,
            "slice_thickness_mm": cfg.protocol.slice_thickness_mm,
            "slice_gap_mm": cfg.protocol.slice_gap_mm,
            "basal_fraction": cfg.protocol.basal_fraction,
            "landmark_jitter_sd_mm": cfg.protocol.landmark_jitter_sd_mm,
            "lax_azimuths_deg": cfg.protocol.lax_azimuths_deg},
        "network": {
            "n_in": cfg.network.n_in, "latent_dim": cfg.network.latent_dim,
            "m": cfg.network.m, "grid": cfg.network.grid,
            "grid_side_mm": cfg.network.grid_side_mm,
            "encoder1_widths": cfg.network.encoder1_widths,
            "encoder2_widths": cfg.network.encoder2_widths,
            "coarse_widths": cfg.network.coarse_widths,
            "folding_widths": cfg.network.folding_widths},
        "training": {
            "epochs": cfg.training.epochs,
            "batch_size": cfg.training.batch_size,
            "initial_lr": cfg.training.initial_lr,
            "lr_decay_rate": cfg.training.lr_decay_rate,
            "lr_decay_every_steps": cfg.training.lr_decay_every_steps,
            "alpha_breakpoints": cfg.training.alpha_breakpoints,
            "alpha_values": cfg.training.alpha_values,
            "compute_dtype": cfg.training.compute_dtype},
        "mesh": {"max_attempts": cfg.mesh_max_attempts,
                 "basal_band_mm": cfg.basal_band_mm},
        "evaluate": {"levels": cfg.eval_levels, "split": cfg.eval_split,
                     "max_unpaired_fraction": cfg.max_unpaired_fraction},
    }


def dump_config(cfg: PipelineConfig) -> str:
    """Render the effective configuration as INI text."""
    values = _section_values(cfg)
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (tag, _, comment) in keys.items():
            line = f"{key} = {_fmt(tag, values[section][key])}"
            if comment:
                line = f"{line:<40}; {comment}"
            out.write(line + "\n")
        out.write("\n")
    return out.getvalue()


def _line_of(lines: list, section: str, key: str | None = None) -> int | None:
    """1-based line of a section header or of a key within that section."""
    sec_re = re.compile(r"^\s*\[" + re.escape(section) + r"\]\s*$")
    in_section = False
    for i, line in enumerate(lines, start=1):
        if sec_re.match(line):
            if key is None:
                return i
            in_section = True
            continue
        if in_section:
            if re.match(r"^\s*\[", line):
                return None
            if re.match(r"^\s*" + re.escape(key) + r"\s*[=:]", line):
                return i
    return None


class _Parser:
    def __init__(self, path: str | None):
        self.path = path or "<defaults>"
        self.lines: list = []
        self.values = {s: {k: v[1] for k, v in keys.items()}
                       for s, keys in _SCHEMA.items()}
        if path is None:
            return
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc}") from exc
        self.lines = text.splitlines()
        cp = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text, source=path)
        except configparser.Error as exc:
            lineno = getattr(exc, "lineno", None)
            anchor = f"{path}:{lineno}" if lineno else path
            raise ConfigError(f"{anchor}: {exc.message}") from exc
        for section in cp.sections():
            if section not in _SCHEMA:
                self._fail(f"unknown section [{section}]", section)
            for key, raw in cp.items(section):
                if key not in _SCHEMA[section]:
                    self._fail(f"unknown key '{key}' in [{section}]",
                               section, key)
                self.values[section][key] = raw

    def _fail(self, message: str, section: str, key: str | None = None):
        lineno = _line_of(self.lines, section, key)
        anchor = f"{self.path}:{lineno}" if lineno else self.path
        raise ConfigError(f"{anchor}: {message}")

    def get(self, section: str, key: str):
        raw = self.values[section][key].strip()
        tag = _SCHEMA[section][key][0]
        try:
            return self._convert(tag, raw)
        except ConfigError:
            raise
        except (ValueError, CardioPCError) as exc:
            self._fail(f"{key} = {raw!r}: {exc}", section, key)

    def _convert(self, tag: str, raw: str):
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "str":
            return raw
        if tag == "ints":
            return tuple(int(v) for v in raw.split(","))
        if tag == "floats":
            return tuple(float(v) for v in raw.split(","))
        if tag == "level":
            return misalignment_level(raw).name
        if tag == "levels":
            names = tuple(misalignment_level(v.strip()).name
                          for v in raw.split(","))
            if len(set(names)) != len(names):
                raise ValueError("duplicate level")
            return tuple(sorted(names, key=LEVEL_ORDER.index))
        if tag == "phases":
            return tuple(Phase(v.strip().upper()) for v in raw.split(","))
        if tag == "splits":
            names = tuple(v.strip() for v in raw.split(","))
            bad = set(names) - set(_SPLITS)
            if bad or len(set(names)) != len(names):
                raise ValueError(f"splits must be distinct among {_SPLITS}")
            return names
        if tag == "split":
            if raw not in _SPLITS:
                raise ValueError(f"split must be one of {_SPLITS}")
            return raw
        raise AssertionError(tag)


def load_config(path: str | None = None, seed: int | None = None,
                out_dir: str | None = None) -> PipelineConfig:
    """Parse and validate a config file; None means pure defaults.

    seed and out_dir are command-line overrides applied after the file.
    """
    p = _Parser(path)

    def build(section, ctor, **kwargs):
        try:
            return ctor(**kwargs)
        except CardioPCError as exc:
            p._fail(str(exc), section)

    master_seed = seed if seed is not None else p.get("run", "seed")
    protocol = build(
        "protocol", SliceProtocol,
        n_sax=p.get("protocol", "n_sax"),
        slice_thickness_mm=p.get("protocol", "slice_thickness_mm"),
        slice_gap_mm=p.get("protocol", "slice_gap_mm"),
        basal_fraction=p.get("protocol", "basal_fraction"),
        landmark_jitter_sd_mm=p.get("protocol", "landmark_jitter_sd_mm"),
        lax_azimuths_deg=p.get("protocol", "lax_azimuths_deg"),
        n_contour_points=p.get("dataset", "n_contour_points"))
    network = build(
        "network", NetworkConfig,
        n_in=p.get("network", "n_in"),
        latent_dim=p.get("network", "latent_dim"),
        m=p.get("network", "m"),
        grid=p.get("network", "grid"),
        grid_side_mm=p.get("network", "grid_side_mm"),
        encoder1_widths=p.get("network", "encoder1_widths"),
        encoder2_widths=p.get("network", "encoder2_widths"),
        coarse_widths=p.get("network", "coarse_widths"),
        folding_widths=p.get("network", "folding_widths"))
    training = build(
        "training", TrainingConfig,
        epochs=p.get("training", "epochs"),
        batch_size=p.get("training", "batch_size"),
        initial_lr=p.get("training", "initial_lr"),
        lr_decay_rate=p.get("training", "lr_decay_rate"),
        lr_decay_every_steps=p.get("training", "lr_decay_every_steps"),
        alpha_breakpoints=p.get("training", "alpha_breakpoints"),
        alpha_values=p.get("training", "alpha_values"),
        compute_dtype=p.get("training", "compute_dtype"),
        seed=master_seed)
    cfg = PipelineConfig(
        out_dir=out_dir if out_dir is not None else p.get("run", "out_dir"),
        seed=master_seed,
        dataset_level=p.get("dataset", "level"),
        n_shapes=p.get("dataset", "n_shapes"),
        transforms_per_shape=p.get("dataset", "transforms_per_shape"),
        k_modes=p.get("dataset", "k_modes"),
        n_per_class=p.get("dataset", "n_per_class"),
        p_gt_per_class=p.get("dataset", "p_gt_per_class"),
        n_contour_points=p.get("dataset", "n_contour_points"),
        phases=p.get("dataset", "phases"),
        splits=p.get("dataset", "splits"),
        protocol=protocol,
        network=network,
        training=training,
        mesh_max_attempts=p.get("mesh", "max_attempts"),
        basal_band_mm=p.get("mesh", "basal_band_mm"),
        eval_levels=p.get("evaluate", "levels"),
        eval_split=p.get("evaluate", "split"),
        max_unpaired_fraction=p.get("evaluate", "max_unpaired_fraction"))
    if cfg.mesh_max_attempts < 1:
        p._fail("max_attempts must be >= 1", "mesh", "max_attempts")
    if cfg.basal_band_mm < 0:
        p._fail("basal_band_mm must be >= 0", "mesh", "basal_band_mm")
    if not (0.0 <= cfg.max_unpaired_fraction <= 1.0):
        p._fail("max_unpaired_fraction must be in [0, 1]",
                "evaluate", "max_unpaired_fraction")
    # probe dataset parameters (split sizes etc.) with a placeholder root
    build("dataset", cfg.dataset_config, dataset_root=".")
    return cfg


def with_overrides(cfg: PipelineConfig, seed: int | None = None,
                   out_dir: str | None = None) -> PipelineConfig:
    out = cfg
    if seed is not None:
        out = replace(out, seed=seed,
                      training=replace(out.training, seed=seed))
    if out_dir is not None:
        out = replace(out, out_dir=out_dir)
    return out


def config_sha256(path: str | None) -> str:
    """Hash of the config file bytes; hash of the empty string if absent."""
    digest = hashlib.sha256()
    if path is not None and os.path.exists(path):
        with open(path, "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()
