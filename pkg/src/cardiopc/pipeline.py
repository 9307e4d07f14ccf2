"""Pipeline commands: generate, train, reconstruct, mesh, evaluate.

Each command reads one PipelineConfig, writes its artifacts under the run
directory, and records a RunManifest listing every output file with its
sha256, so a rerun with the same config and seed can be verified bitwise.
Threads are honored only where results are order-independent (data
generation, meshing, evaluation); training and inference stay single-thread.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from types import SimpleNamespace

import numpy as np

from . import __version__
from . import ply as ply_io
from ._rng import STAGE_POOL, rng_for
from .clinical import (
    MYOCARDIAL_DENSITY_G_PER_ML,
    cap_basal_hole,
    lv_mass,
    make_record,
    mesh_volume,
    simpsons_volume,
    summarize_records,
    write_records_csv,
)
from .config import PipelineConfig, config_sha256
from .errors import (
    CardioPCError,
    CompatibilityError,
    MeshingFailureError,
    MissingInputError,
    PairingError,
    StageFailure,
)
from .geometry import (
    ALL_CLASSES,
    AnatomicalClass,
    chamfer_distance,
    hausdorff_distance,
    mean_surface_distance,
)
from .meshing import (
    TriMesh,
    check_topology,
    median_nn_spacing,
    mesh_with_retry,
    smooth_points,
    thin_points,
)
from .pccn import load_checkpoint, prepare_sample, reconstruct, train
from .slicing import generate_dataset, load_slice_contours, load_sparse_sample

log = logging.getLogger("cardiopc")

ARTIFACT_VERSIONS = {"dataset_layout": 1, "checkpoint_format": 1,
                     "report_format": 1}

DATASET_SUBDIR = "dataset"
TRAIN_SUBDIR = "train"
RECON_SUBDIR = "recon"
MESH_SUBDIR = "meshes"
REPORT_SUBDIR = "report"
CHECKPOINT_NAME = "checkpoint.cpcn"
TRAINING_LOG_NAME = "training_log.csv"

_CLASS_NAMES = {c: c.name.lower() for c in ALL_CLASSES}
_METRIC_COLUMNS = ("chamfer_mm", "hausdorff_mm", "msd_mm", "input_chamfer_mm")
EVALUATION_COLUMNS = ("level", "sample_id", "split", "phase", "anat_class",
                      *_METRIC_COLUMNS)


@dataclass
class RunManifest:
    """Record of one command invocation; see module docstring."""

    command: str
    config_path: str | None
    config_sha256: str
    master_seed: int
    threads: int
    package_version: str
    artifact_versions: dict
    inputs: list
    outputs: list
    wall_time_s: float
    info: dict

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _output_entries(root: str, rel_paths) -> list:
    entries = []
    for rel in sorted(set(rel_paths)):
        full = os.path.join(root, rel)
        entries.append({"path": rel, "sha256": _sha256(full),
                        "bytes": os.path.getsize(full)})
    return entries


def _tree_paths(root: str, subdir: str) -> list:
    """All files under root/subdir as root-relative paths."""
    out = []
    base = os.path.join(root, subdir)
    for dirpath, dirnames, filenames in os.walk(base):
        dirnames.sort()
        for name in sorted(filenames):
            out.append(os.path.relpath(os.path.join(dirpath, name), root))
    return out


def _tree_sha256(root: str) -> str:
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            digest.update(bytes.fromhex(_sha256(path)))
    return digest.hexdigest()


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise MissingInputError(f"{path} does not exist; {hint}")
    return path


def _finish(cfg: PipelineConfig, command: str, config_path, threads: int,
            inputs: list, output_paths, info: dict, t0: float) -> dict:
    manifest = RunManifest(
        command=command,
        config_path=config_path,
        config_sha256=config_sha256(config_path),
        master_seed=cfg.seed,
        threads=threads,
        package_version=__version__,
        artifact_versions=dict(ARTIFACT_VERSIONS),
        inputs=inputs,
        outputs=_output_entries(cfg.out_dir, output_paths),
        wall_time_s=time.perf_counter() - t0,
        info=info)
    name = "manifest_%s.json" % command.replace("-", "_")
    manifest.write(os.path.join(cfg.out_dir, name))
    log.info("%s: %d output files, %.1f s", command, len(manifest.outputs),
             manifest.wall_time_s)
    return asdict(manifest)


def _pool_rng(cfg: PipelineConfig, meta: dict):
    phase_i = 0 if meta["phase"] == "ED" else 1
    return rng_for(cfg.seed, STAGE_POOL, meta["shape_index"], phase_i,
                   meta["replica"])


def _dataset_root(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.out_dir, DATASET_SUBDIR)


def _level_manifest(cfg: PipelineConfig, level: str) -> dict:
    path = _require(
        os.path.join(_dataset_root(cfg), level, "manifest.json"),
        f"run gen-data with dataset.level = {level} first")
    with open(path) as fh:
        return json.load(fh)


def cmd_gen_data(cfg: PipelineConfig, config_path: str | None = None,
                 threads: int = 1) -> dict:
    """Synthesize the configured dataset level under <out>/dataset."""
    t0 = time.perf_counter()
    os.makedirs(cfg.out_dir, exist_ok=True)
    dcfg = cfg.dataset_config(_dataset_root(cfg))
    log.info("gen-data: level=%s shapes=%d transforms=%d splits=%s",
             cfg.dataset_level, cfg.n_shapes, cfg.transforms_per_shape,
             ",".join(cfg.splits))
    manifest = generate_dataset(dcfg, n_workers=threads, splits=cfg.splits)
    outputs = _tree_paths(cfg.out_dir,
                          os.path.join(DATASET_SUBDIR, cfg.dataset_level))
    info = {"level": cfg.dataset_level,
            "n_samples": len(manifest["samples"]),
            "split_sample_counts": manifest["split_sample_counts"]}
    return _finish(cfg, "gen-data", config_path, threads, [], outputs, info,
                   t0)


def _load_prepared(cfg: PipelineConfig, rel_path: str):
    sparse, gt, meta = load_sparse_sample(
        os.path.join(_dataset_root(cfg), rel_path))
    return prepare_sample(sparse, gt, cfg.network.n_in,
                          rng=_pool_rng(cfg, meta))


def cmd_train(cfg: PipelineConfig, config_path: str | None = None,
              threads: int = 1) -> dict:
    """Train on the configured level's train/val splits; save the best net."""
    t0 = time.perf_counter()
    level_manifest = _level_manifest(cfg, cfg.dataset_level)
    rows = {"train": [], "val": []}
    for row in level_manifest["samples"]:
        if row["split"] in rows:
            rows[row["split"]].append(row)
    for split, split_rows in rows.items():
        if not split_rows:
            raise MissingInputError(
                f"dataset level {cfg.dataset_level} has no {split} samples")
    train_samples = [_load_prepared(cfg, r["path"]) for r in rows["train"]]
    val_samples = [_load_prepared(cfg, r["path"]) for r in rows["val"]]
    train_dir = os.path.join(cfg.out_dir, TRAIN_SUBDIR)
    os.makedirs(train_dir, exist_ok=True)
    log.info("train: %d train / %d val samples, %d epochs",
             len(train_samples), len(val_samples), cfg.training.epochs)
    result = train(
        train_samples, val_samples, cfg.network, cfg.training,
        checkpoint_path=os.path.join(train_dir, CHECKPOINT_NAME),
        log_path=os.path.join(train_dir, TRAINING_LOG_NAME),
        progress=lambda row: log.info(
            "epoch %d: loss %.4f, val chamfer %.3f/%.3f/%.3f mm",
            row["epoch"], row["train_loss"], row["val_chamfer_lvendo"],
            row["val_chamfer_lvepi"], row["val_chamfer_rv"]))
    level_dir = os.path.join(_dataset_root(cfg), cfg.dataset_level)
    inputs = [{"path": os.path.relpath(level_dir, cfg.out_dir),
               "tree_sha256": _tree_sha256(level_dir)}]
    outputs = [os.path.join(TRAIN_SUBDIR, CHECKPOINT_NAME),
               os.path.join(TRAIN_SUBDIR, TRAINING_LOG_NAME)]
    info = {"best_val_chamfer_mm": result.best_val,
            "global_step": result.global_step,
            "epochs": cfg.training.epochs,
            "n_train": len(train_samples), "n_val": len(val_samples),
            "n_parameters": result.params.n_parameters}
    return _finish(cfg, "train", config_path, threads, inputs, outputs, info,
                   t0)


def _eval_sample_ids(cfg: PipelineConfig, level: str) -> list:
    split_dir = _require(
        os.path.join(_dataset_root(cfg), level, cfg.eval_split),
        f"run gen-data with dataset.level = {level} first")
    return sorted(d for d in os.listdir(split_dir)
                  if os.path.isdir(os.path.join(split_dir, d)))


def cmd_reconstruct(cfg: PipelineConfig, config_path: str | None = None,
                    threads: int = 1) -> dict:
    """Densify every evaluation-split sample of each configured level."""
    t0 = time.perf_counter()
    ckpt_path = _require(
        os.path.join(cfg.out_dir, TRAIN_SUBDIR, CHECKPOINT_NAME),
        "run train first")
    params, global_step, _ = load_checkpoint(ckpt_path)
    if params.config != cfg.network:
        raise CompatibilityError(
            f"checkpoint architecture {params.config} does not match the "
            f"[network] section {cfg.network}")
    outputs = []
    per_level = {}
    for level in cfg.eval_levels:
        recon_dir = os.path.join(cfg.out_dir, RECON_SUBDIR, level)
        os.makedirs(recon_dir, exist_ok=True)
        sample_ids = _eval_sample_ids(cfg, level)
        for sample_id in sample_ids:
            sample_dir = os.path.join(_dataset_root(cfg), level,
                                      cfg.eval_split, sample_id)
            sparse, _, meta = load_sparse_sample(sample_dir)
            dense = reconstruct(params, SimpleNamespace(cloud=sparse),
                                rng=_pool_rng(cfg, meta))
            rel = os.path.join(RECON_SUBDIR, level, sample_id + ".ply")
            ply_io.write_labeled_cloud(os.path.join(cfg.out_dir, rel), dense)
            outputs.append(rel)
        per_level[level] = len(sample_ids)
        log.info("reconstruct: %s -> %d dense clouds", level, len(sample_ids))
    info = {"checkpoint_step": global_step, "split": cfg.eval_split,
            "n_per_level": per_level,
            "points_per_cloud": 3 * cfg.network.p}
    inputs = [{"path": os.path.relpath(ckpt_path, cfg.out_dir),
               "sha256": _sha256(ckpt_path)}]
    return _finish(cfg, "reconstruct", config_path, threads, inputs, outputs,
                   info, t0)


def _basal_no_fill(points: np.ndarray, band_mm: float) -> np.ndarray:
    # the anatomy frame has the long axis on z with the base on top; points
    # within the band of the top stay unbridged so the rim survives meshing
    return points[:, 2] >= points[:, 2].max() - band_mm


def _mesh_one(cfg: PipelineConfig, level: str, sample_id: str) -> dict:
    cloud = ply_io.read_labeled_cloud(
        os.path.join(cfg.out_dir, RECON_SUBDIR, level, sample_id + ".ply"))
    sample_rel = os.path.join(MESH_SUBDIR, level, sample_id)
    sample_dir = os.path.join(cfg.out_dir, sample_rel)
    os.makedirs(sample_dir, exist_ok=True)
    entry = {"level": level, "sample_id": sample_id,
             "phase": cloud.phase.value, "classes": {}}
    files = []
    for cls in ALL_CLASSES:
        pts = cloud.points[cloud.labels == int(cls)]
        # folded patches overlap, leaving wildly uneven spacing; smoothing
        # plus thinning gives the pivoting front a surface it can walk.
        # toy-sized clouds skip the cleanup (smoothing needs k+1 points)
        if pts.shape[0] > 16:
            pts = smooth_points(pts)
            spacing = median_nn_spacing(pts)
            if spacing > 0.0:
                pts = thin_points(pts, 0.8 * spacing)
        mask = None
        if cls in (AnatomicalClass.LV_ENDO, AnatomicalClass.LV_EPI):
            mask = _basal_no_fill(pts, cfg.basal_band_mm)
        name = _CLASS_NAMES[cls]
        try:
            mesh = mesh_with_retry(pts, cls,
                                   max_attempts=cfg.mesh_max_attempts,
                                   no_fill_mask=mask)
        except MeshingFailureError as exc:
            entry["classes"][name] = {"passed": False, "error": str(exc),
                                      "attempts": exc.attempts}
            continue
        rel = os.path.join(sample_rel, name + ".ply")
        ply_io.write_labeled_mesh(
            os.path.join(cfg.out_dir, rel), mesh.vertices, mesh.faces,
            np.full(len(mesh.vertices), int(cls), dtype=np.uint8),
            cloud.phase)
        report = check_topology(mesh)
        entry["classes"][name] = {"passed": True, "file": name + ".ply",
                                  "report": report.as_dict()}
        files.append(rel)
    topo_rel = os.path.join(sample_rel, "topology.json")
    with open(os.path.join(cfg.out_dir, topo_rel), "w") as fh:
        json.dump(entry, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"entry": entry, "files": files + [topo_rel]}


def cmd_mesh(cfg: PipelineConfig, config_path: str | None = None,
             threads: int = 1) -> dict:
    """Ball-pivot every reconstructed cloud per class; report pass rates."""
    t0 = time.perf_counter()
    recon_root = _require(os.path.join(cfg.out_dir, RECON_SUBDIR),
                          "run reconstruct first")
    tasks = []
    for level in cfg.eval_levels:
        level_dir = _require(os.path.join(recon_root, level),
                             f"run reconstruct with level {level} first")
        tasks.extend((level, f[:-4]) for f in sorted(os.listdir(level_dir))
                     if f.endswith(".ply"))
    if not tasks:
        raise MissingInputError(f"no reconstructions under {recon_root}")
    run = lambda task: _mesh_one(cfg, *task)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    outputs, failures = [], []
    n_pass = 0
    per_class = {name: 0 for name in _CLASS_NAMES.values()}
    for res in results:
        outputs.extend(res["files"])
        for name, cls_entry in res["entry"]["classes"].items():
            if cls_entry["passed"]:
                n_pass += 1
                per_class[name] += 1
            else:
                failures.append({"level": res["entry"]["level"],
                                 "sample_id": res["entry"]["sample_id"],
                                 "anat_class": name,
                                 "error": cls_entry["error"]})
    n_tasks = 3 * len(tasks)
    summary = {"n_clouds": len(tasks), "n_surface_tasks": n_tasks,
               "n_passed": n_pass, "pass_rate": n_pass / n_tasks,
               "per_class_passed": per_class,
               "per_class_total": len(tasks), "failures": failures}
    summary_rel = os.path.join(MESH_SUBDIR, "summary.json")
    with open(os.path.join(cfg.out_dir, summary_rel), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(summary_rel)
    log.info("mesh: %d/%d surfaces passed (%.1f%%), %d failures",
             n_pass, n_tasks, 100.0 * summary["pass_rate"], len(failures))
    info = {k: summary[k] for k in ("n_clouds", "n_surface_tasks", "n_passed",
                                    "pass_rate")}
    info["n_failures"] = len(failures)
    return _finish(cfg, "mesh", config_path, threads, [], outputs, info, t0)


def _eval_one(cfg: PipelineConfig, level: str, sample_id: str) -> list:
    sample_dir = os.path.join(_dataset_root(cfg), level, cfg.eval_split,
                              sample_id)
    sparse, gt, meta = load_sparse_sample(sample_dir)
    dense = ply_io.read_labeled_cloud(
        os.path.join(cfg.out_dir, RECON_SUBDIR, level, sample_id + ".ply"))
    rows = []
    for cls in ALL_CLASSES:
        gt_c = gt.class_points(cls)
        dense_c = dense.class_points(cls)
        sparse_c = sparse.class_points(cls)
        rows.append({
            "level": level, "sample_id": sample_id, "split": meta["split"],
            "phase": meta["phase"], "anat_class": _CLASS_NAMES[cls],
            "chamfer_mm": chamfer_distance(dense_c, gt_c),
            "hausdorff_mm": hausdorff_distance(dense_c, gt_c),
            "msd_mm": mean_surface_distance(dense_c, gt_c),
            "input_chamfer_mm": chamfer_distance(sparse_c, gt_c)})
    return rows


def _quantile_stats(values: list) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    qs = np.quantile(arr, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"n": int(arr.size), "mean": float(np.mean(arr)),
            "min": float(qs[0]), "q1": float(qs[1]), "median": float(qs[2]),
            "q3": float(qs[3]), "max": float(qs[4])}


def _aggregate(rows: list) -> dict:
    groups: dict = {}
    for row in rows:
        key = (row["level"], row["anat_class"], row["phase"])
        groups.setdefault(key, []).append(row)
    agg: dict = {}
    for (level, cls, phase), grp in sorted(groups.items()):
        cell = {metric: _quantile_stats([r[metric] for r in grp])
                for metric in _METRIC_COLUMNS}
        agg.setdefault(level, {}).setdefault(cls, {})[phase] = cell
    return agg


def _simpson_volumes(cfg: PipelineConfig, sample_dir: str) -> dict:
    records = load_slice_contours(sample_dir)
    vols = {}
    for cls in ALL_CLASSES:
        contours = [r["points_by_class"][int(cls)] for r in records
                    if r["kind"] == "SAX" and int(cls) in r["points_by_class"]]
        vols[cls] = simpsons_volume(contours, cfg.protocol.slice_thickness_mm,
                                    cfg.protocol.slice_gap_mm)
    return vols


def _load_capped(cfg: PipelineConfig, level: str, sample_id: str,
                 cls: AnatomicalClass) -> TriMesh:
    rel = os.path.join(MESH_SUBDIR, level, sample_id,
                       _CLASS_NAMES[cls] + ".ply")
    path = os.path.join(cfg.out_dir, rel)
    if not os.path.exists(path):
        # report paths relative to the run so reruns stay byte-identical
        raise MissingInputError(f"missing surface {rel}")
    verts, faces, _, _ = ply_io.read_labeled_mesh(path)
    return cap_basal_hole(TriMesh(verts, faces, cls))


def _clinical_records(cfg: PipelineConfig, level: str, paired: list,
                      metas: dict) -> tuple:
    """mesh3d and simpson2d records for (shape, replica) pairs with both
    phases present; failures become skip entries, not aborts."""
    pairs: dict = {}
    for sample_id in paired:
        meta = metas[sample_id]
        key = (meta["shape_index"], meta["replica"])
        pairs.setdefault(key, {})[meta["phase"]] = sample_id
    records, skipped = [], []
    for (shape_idx, replica), phases in sorted(pairs.items()):
        if set(phases) != {"ED", "ES"}:
            skipped.append({"level": level, "shape_index": shape_idx,
                            "replica": replica,
                            "reason": "missing phase partner"})
            continue
        case = f"{level}_s{shape_idx:04d}_r{replica}"
        ed, es = phases["ED"], phases["ES"]
        try:
            lv_ed = mesh_volume(_load_capped(cfg, level, ed,
                                             AnatomicalClass.LV_ENDO))
            lv_es = mesh_volume(_load_capped(cfg, level, es,
                                             AnatomicalClass.LV_ENDO))
            rv_ed = mesh_volume(_load_capped(cfg, level, ed,
                                             AnatomicalClass.RV_ENDO))
            rv_es = mesh_volume(_load_capped(cfg, level, es,
                                             AnatomicalClass.RV_ENDO))
            mass = lv_mass(_load_capped(cfg, level, ed,
                                        AnatomicalClass.LV_EPI),
                           _load_capped(cfg, level, ed,
                                        AnatomicalClass.LV_ENDO))
            records.append(make_record(case, "mesh3d", lv_ed, lv_es, mass,
                                       rv_ed, rv_es))
        except CardioPCError as exc:
            skipped.append({"level": level, "shape_index": shape_idx,
                            "replica": replica, "method": "mesh3d",
                            "reason": str(exc)})
        try:
            split_dir = os.path.join(_dataset_root(cfg), level,
                                     cfg.eval_split)
            v_ed = _simpson_volumes(cfg, os.path.join(split_dir, ed))
            v_es = _simpson_volumes(cfg, os.path.join(split_dir, es))
            mass2d = ((v_ed[AnatomicalClass.LV_EPI]
                       - v_ed[AnatomicalClass.LV_ENDO])
                      * MYOCARDIAL_DENSITY_G_PER_ML)
            records.append(make_record(
                case, "simpson2d", v_ed[AnatomicalClass.LV_ENDO],
                v_es[AnatomicalClass.LV_ENDO], mass2d,
                v_ed[AnatomicalClass.RV_ENDO], v_es[AnatomicalClass.RV_ENDO]))
        except CardioPCError as exc:
            skipped.append({"level": level, "shape_index": shape_idx,
                            "replica": replica, "method": "simpson2d",
                            "reason": str(exc)})
    return records, skipped


def cmd_evaluate(cfg: PipelineConfig, config_path: str | None = None,
                 threads: int = 1) -> dict:
    """Score reconstructions against ground truth; derive clinical records.

    Unpaired samples are listed and skipped; if their fraction exceeds
    evaluate.max_unpaired_fraction the command still writes all reports and
    the manifest, then raises PairingError.
    """
    t0 = time.perf_counter()
    _require(os.path.join(cfg.out_dir, RECON_SUBDIR), "run reconstruct first")
    report_dir = os.path.join(cfg.out_dir, REPORT_SUBDIR)
    os.makedirs(report_dir, exist_ok=True)
    rows, unpaired, n_paired = [], [], 0
    clinical, skipped_clinical = [], []
    for level in cfg.eval_levels:
        gt_ids = set(_eval_sample_ids(cfg, level))
        recon_dir = os.path.join(cfg.out_dir, RECON_SUBDIR, level)
        recon_ids = ({f[:-4] for f in os.listdir(recon_dir)
                      if f.endswith(".ply")}
                     if os.path.isdir(recon_dir) else set())
        paired = sorted(gt_ids & recon_ids)
        for sample_id in sorted(gt_ids - recon_ids):
            unpaired.append({"level": level, "sample_id": sample_id,
                             "missing": "reconstruction"})
        for sample_id in sorted(recon_ids - gt_ids):
            unpaired.append({"level": level, "sample_id": sample_id,
                             "missing": "ground truth"})
        n_paired += len(paired)
        run = lambda sid: _eval_one(cfg, level, sid)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_sample = list(pool.map(run, paired))
        else:
            per_sample = [run(sid) for sid in paired]
        for sample_rows in per_sample:
            rows.extend(sample_rows)
        metas = {}
        for sample_id in paired:
            with open(os.path.join(_dataset_root(cfg), level, cfg.eval_split,
                                   sample_id, "meta.json")) as fh:
                metas[sample_id] = json.load(fh)
        recs, skipped = _clinical_records(cfg, level, paired, metas)
        clinical.extend(recs)
        skipped_clinical.extend(skipped)

    csv_rel = os.path.join(REPORT_SUBDIR, "evaluation.csv")
    with open(os.path.join(cfg.out_dir, csv_rel), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVALUATION_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float)
                             else row[c] for c in EVALUATION_COLUMNS])
    total = n_paired + len(unpaired)
    unpaired_fraction = len(unpaired) / total if total else 0.0
    report = {"aggregates": _aggregate(rows),
              "levels": list(cfg.eval_levels), "split": cfg.eval_split,
              "n_paired": n_paired, "n_rows": len(rows),
              "unpaired": unpaired, "unpaired_fraction": unpaired_fraction}
    json_rel = os.path.join(REPORT_SUBDIR, "evaluation.json")
    with open(os.path.join(cfg.out_dir, json_rel), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    clinical_rel = os.path.join(REPORT_SUBDIR, "clinical.csv")
    write_records_csv(os.path.join(cfg.out_dir, clinical_rel), clinical)
    summary_rel = os.path.join(REPORT_SUBDIR, "clinical_summary.json")
    with open(os.path.join(cfg.out_dir, summary_rel), "w") as fh:
        json.dump({"by_method": summarize_records(clinical),
                   "skipped": skipped_clinical}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [csv_rel, json_rel, clinical_rel, summary_rel]
    info = {"n_paired": n_paired, "n_rows": len(rows),
            "n_unpaired": len(unpaired),
            "unpaired_fraction": unpaired_fraction,
            "n_clinical_records": len(clinical),
            "n_clinical_skipped": len(skipped_clinical)}
    manifest = _finish(cfg, "evaluate", config_path, threads, [], outputs,
                       info, t0)
    for entry in unpaired:
        log.warning("unpaired %s sample %s: no %s", entry["level"],
                    entry["sample_id"], entry["missing"])
    if unpaired_fraction > cfg.max_unpaired_fraction:
        raise PairingError(
            f"{len(unpaired)} of {total} samples unpaired "
            f"({100 * unpaired_fraction:.1f}% > "
            f"{100 * cfg.max_unpaired_fraction:.1f}%); see {json_rel}")
    return manifest


_STAGES = (("gen-data", cmd_gen_data, True),
           ("train", cmd_train, False),
           ("reconstruct", cmd_reconstruct, False),
           ("mesh", cmd_mesh, True),
           ("evaluate", cmd_evaluate, True))


def cmd_full(cfg: PipelineConfig, config_path: str | None = None,
             threads: int = 1) -> dict:
    """Chain all five stages under one manifest; abort on first failure."""
    t0 = time.perf_counter()
    os.makedirs(cfg.out_dir, exist_ok=True)
    stages, outputs = [], []
    for name, fn, threadable in _STAGES:
        log.info("full: stage %s", name)
        try:
            sub = fn(cfg, config_path=config_path,
                     threads=threads if threadable else 1)
        except Exception as exc:
            stages.append({"name": name, "failed": True, "error": str(exc)})
            _finish(cfg, "full", config_path, threads, [],
                    [o["path"] for o in outputs],
                    {"stages": stages, "failed_stage": name}, t0)
            raise StageFailure(name, exc) from exc
        stages.append({"name": name, "wall_time_s": sub["wall_time_s"],
                       "n_outputs": len(sub["outputs"]),
                       "manifest": "manifest_%s.json" % name.replace("-", "_"),
                       "info": sub["info"]})
        outputs.extend(sub["outputs"])
    return _finish(cfg, "full", config_path, threads, [],
                   [o["path"] for o in outputs], {"stages": stages}, t0)
