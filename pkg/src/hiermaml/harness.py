"""Experiment runner: data assembly, method dispatch, artifact I/O.

Each command is a pure-ish function over an ExperimentConfig; the CLI wraps
them with argument parsing and exit-code mapping. Train/eval always rebuild
the dataset from the config (synthetic data regenerates from its seed), so a
run is fully determined by (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import baselines as bl
from .config import (
    PRETRAIN_INITIALIZED,
    SWEEP_AXES,
    ExperimentConfig,
    config_hash,
)
from .errors import ConfigError, FormatError
from .hierarchy import (
    TaskHierarchy,
    evaluate_adaptive,
    load_hierarchy,
    save_hierarchy,
    train_adaptive,
)
from .metalearn import MetaConfig, train_origin_maml
from .net import (
    Architecture,
    PredictiveModel,
    grad_check,
    load_model,
    model_from_dict,
    model_to_dict,
    read_model_extra,
    save_model,
)
from .reports import (
    build_report,
    record_for_task,
    records_for_tasks,
    write_report_files,
    write_training_log,
)
from .tasks import (
    SyntheticConfig,
    export_csv,
    generate_synthetic,
    load_csv,
    normalize,
)

log = logging.getLogger("hiermaml")


@dataclass
class DataBundle:
    train: object
    test: object
    pretrain: object | None
    data_hash: str


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _synthetic_identity(cfg: ExperimentConfig):
    return json.dumps(cfg.to_dict().get("synthetic"), sort_keys=True)


def load_data(cfg: ExperimentConfig) -> DataBundle:
    """Build the normalized (train, test, pretrain) sets plus their identity
    hash. Normalization statistics always come from the train set."""
    if cfg.data_source == "synthetic":
        train, test, pretrain = generate_synthetic(cfg.synthetic)
        ident = _synthetic_identity(cfg)
    else:
        paths = cfg.csv
        train = load_csv(paths.train_data, paths.train_descriptor, seed=cfg.seed)
        test = load_csv(paths.test_data, paths.test_descriptor, seed=cfg.seed)
        pretrain = None
        hashes = [_hash_file(paths.train_data), _hash_file(paths.train_descriptor),
                  _hash_file(paths.test_data), _hash_file(paths.test_descriptor)]
        if paths.pretrain_data:
            pretrain = load_csv(paths.pretrain_data, paths.pretrain_descriptor,
                                seed=cfg.seed)
            hashes += [_hash_file(paths.pretrain_data),
                       _hash_file(paths.pretrain_descriptor)]
        ident = json.dumps(hashes)
    others = [test] + ([pretrain] if pretrain is not None else [])
    train, normed, _, warnings = normalize(train, others)
    for w in warnings:
        log.info("normalize: %s", w)
    test = normed[0]
    pretrain = normed[1] if pretrain is not None else None
    payload = ident + json.dumps(train.descriptor.to_dict(), sort_keys=True)
    data_hash = hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]
    return DataBundle(train, test, pretrain, data_hash)


def _paths(cfg: ExperimentConfig):
    out = cfg.out_dir
    return {
        "data_dir": os.path.join(out, "data"),
        "pretrained": os.path.join(out, "pretrained_model.json"),
        "model": os.path.join(out, "model.json"),
        "clusters": os.path.join(out, "clusters.json"),
        "hierarchy": os.path.join(out, "hierarchy.json"),
        "training_log": os.path.join(out, "training_log.csv"),
        "threshold_log": os.path.join(out, "threshold_log.csv"),
        "eval_dir": os.path.join(out, "eval"),
        "sweep": os.path.join(out, "sweep.csv"),
    }


def artifact_path(cfg: ExperimentConfig):
    p = _paths(cfg)
    if cfg.method.startswith("adaptive"):
        return p["hierarchy"]
    if cfg.method == "condition-maml":
        return p["clusters"]
    return p["model"]


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig):
    """Write the synthetic dataset (CSV + descriptors + ground truth)."""
    if cfg.data_source != "synthetic":
        raise ConfigError("data.source: gen-data only applies to synthetic configs")
    train, test, pretrain = generate_synthetic(cfg.synthetic)
    p = _paths(cfg)
    os.makedirs(p["data_dir"], exist_ok=True)
    names = {}
    for name, ts in (("train", train), ("test", test), ("pretrain", pretrain)):
        data = os.path.join(p["data_dir"], f"{name}.csv")
        desc = os.path.join(p["data_dir"], f"{name}_descriptor.json")
        export_csv(ts, data, desc)
        names[name] = data
    truth = os.path.join(p["data_dir"], "tasks_meta.csv")
    with open(truth, "w", encoding="utf-8") as fh:
        fh.write("task_id,lat,lon,regime_id,split\n")
        for split, ts in (("train", train), ("test", test), ("pretrain", pretrain)):
            for t in ts:
                fh.write(f"{t.task_id},{t.location[0]},{t.location[1]},"
                         f"{t.regime_id},{split}\n")
    log.info("gen-data: %d train / %d test / %d pretrain tasks -> %s",
             len(train), len(test), len(pretrain), p["data_dir"])
    return {"train_tasks": len(train), "test_tasks": len(test),
            "pretrain_tasks": len(pretrain), "files": names}


def _pretrain_model(cfg: ExperimentConfig, data: DataBundle):
    if data.pretrain is None:
        raise ConfigError("pretrain: no pretraining set available for this data source")
    feats, labels = bl.pooled_windows([(data.pretrain, "both")])
    task_sizes = [len(t.support) + len(t.query) for t in data.pretrain]
    bounds = np.cumsum([0] + task_sizes)
    n_tasks = len(task_sizes)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).generate_state(1)[0])
    order = rng.permutation(n_tasks)
    n_hold = max(1, int(round(cfg.pretrain.holdout_fraction * n_tasks)))
    hold_tasks = set(order[:n_hold].tolist())
    hold_mask = np.zeros(feats.shape[0], dtype=bool)
    for ti in hold_tasks:
        hold_mask[bounds[ti]:bounds[ti + 1]] = True
    arch = Architecture(
        input_size=data.pretrain.descriptor.n_features,
        time_steps=data.pretrain.descriptor.time_steps,
        hidden_size=cfg.hidden_size,
        head_widths=cfg.head_widths or (cfg.hidden_size,),
    )
    model = PredictiveModel.init(arch, np.random.default_rng(cfg.seed))
    model, rows = bl.train_supervised(
        model, feats[~hold_mask], labels[~hold_mask], cfg.pretrain.epochs,
        cfg.pretrain.learning_rate, batch_size=cfg.pretrain.batch_size,
        seed=cfg.seed,
    )
    preds = model.predict(model.flatten(), feats[hold_mask])
    from .metalearn import r_squared
    heldout_r2 = r_squared(labels[hold_mask], preds)
    return model, heldout_r2, rows


def cmd_pretrain(cfg: ExperimentConfig):
    t0 = time.perf_counter()
    data = load_data(cfg)
    model, heldout_r2, _ = _pretrain_model(cfg, data)
    p = _paths(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_model(model, p["pretrained"], extra={
        "role": "pretrained", "data_hash": data.data_hash,
        "config_hash": config_hash(cfg), "heldout_r2": heldout_r2,
    })
    log.info("pretrain: held-out r2 %.4f in %.1fs -> %s", heldout_r2,
             time.perf_counter() - t0, p["pretrained"])
    return {"heldout_r2": heldout_r2, "path": p["pretrained"],
            "wall_s": time.perf_counter() - t0}


def _load_pretrained(cfg: ExperimentConfig, data: DataBundle):
    p = _paths(cfg)["pretrained"]
    if not os.path.exists(p):
        raise ConfigError(
            f"method {cfg.method} needs the pretrained model; run pretrain first "
            f"(expected {p})"
        )
    extra = read_model_extra(p)
    if extra.get("data_hash") not in (None, data.data_hash):
        raise FormatError(
            f"pretrained model was built for data {extra.get('data_hash')}, "
            f"current data is {data.data_hash}"
        )
    return load_model(p)


@dataclass
class TrainedArtifact:
    """In-memory training product plus everything eval needs."""

    method: str
    kind: str  # "model" | "clusters" | "hierarchy"
    model: PredictiveModel | None = None
    fine_tune_steps: int = 0
    clusters: object | None = None
    hierarchy: TaskHierarchy | None = None
    training_log: list | None = None
    adaptive_log: object | None = None


def train_method(cfg: ExperimentConfig, data: DataBundle) -> TrainedArtifact:
    """Dispatch to the configured method; returns the in-memory artifact."""
    method = cfg.method
    meta = cfg.meta
    pretrained = (_load_pretrained(cfg, data)
                  if method in PRETRAIN_INITIALIZED else None)
    if method.startswith("baseline-"):
        variant = method[-1].upper()
        baseline = bl.train_baseline(variant, data.train, data.test, meta,
                                     model=_fresh_model(cfg, data))
        return TrainedArtifact(method, "model", model=baseline.model,
                               fine_tune_steps=baseline.fine_tune_steps)
    if method == "origin-maml":
        model, rows = train_origin_maml(data.train, meta, model=pretrained)
        return TrainedArtifact(method, "model", model=model,
                               fine_tune_steps=meta.adaptation_steps,
                               training_log=rows)
    if method == "transfer-maml":
        model, rows = train_transfer(cfg, data)
        return TrainedArtifact(method, "model", model=model,
                               fine_tune_steps=meta.adaptation_steps,
                               training_log=rows)
    if method == "condition-maml":
        clusters = bl.train_condition_maml(data.train, meta,
                                           k=cfg.condition_clusters,
                                           model=pretrained)
        return TrainedArtifact(method, "clusters", clusters=clusters,
                               fine_tune_steps=meta.adaptation_steps)
    if method.startswith("adaptive-maml"):
        hierarchy, alog = train_adaptive(data.train, pretrained,
                                         cfg.hierarchy_config(),
                                         select_epoch=cfg.select_epoch,
                                         workers=cfg.workers)
        return TrainedArtifact(method, "hierarchy", hierarchy=hierarchy,
                               adaptive_log=alog)
    raise ConfigError(f"method: unknown method {method!r}")


def _fresh_model(cfg: ExperimentConfig, data: DataBundle):
    arch = Architecture(
        input_size=data.train.descriptor.n_features,
        time_steps=data.train.descriptor.time_steps,
        hidden_size=cfg.hidden_size,
        head_widths=cfg.head_widths or (cfg.hidden_size,),
    )
    seed = np.random.SeedSequence(cfg.seed).generate_state(1)[0]
    return PredictiveModel.init(arch, np.random.default_rng(seed))


def train_transfer(cfg: ExperimentConfig, data: DataBundle):
    return bl.train_transfer_maml(data.train, cfg.meta,
                                  model=_fresh_model(cfg, data))


def cmd_train(cfg: ExperimentConfig):
    t0 = time.perf_counter()
    data = load_data(cfg)
    artifact = train_method(cfg, data)
    p = _paths(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    meta_extra = {
        "method": cfg.method, "config_hash": config_hash(cfg),
        "data_hash": data.data_hash, "fine_tune_steps": artifact.fine_tune_steps,
    }
    if artifact.kind == "model":
        save_model(artifact.model, p["model"], extra=meta_extra)
        out_path = p["model"]
    elif artifact.kind == "clusters":
        payload = {
            "format_version": 1, "kind": "cluster-model",
            "centroids": artifact.clusters.centroids.tolist(),
            "models": [model_to_dict(m) for m in artifact.clusters.models],
            "extra": meta_extra,
        }
        with open(p["clusters"], "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        out_path = p["clusters"]
    else:
        save_hierarchy(artifact.hierarchy, p["hierarchy"], data_hash=data.data_hash)
        out_path = p["hierarchy"]
        with open(p["threshold_log"], "w", encoding="utf-8") as fh:
            fh.write("epoch,layer,gamma\n")
            for epoch, layer, gamma in artifact.hierarchy.threshold_log:
                fh.write(f"{epoch},{layer},{format(gamma, '.17g')}\n")
    if artifact.training_log:
        write_training_log(artifact.training_log, p["training_log"])
    if artifact.adaptive_log is not None:
        rows = [{
            "epoch": r["epoch"], "mean_query_mse": r["train_leaf_mse"],
            "mean_query_r2": r["train_leaf_r2"],
            "tasks_skipped": r["tasks_failed"], "wall_ms": r["wall_ms"],
        } for r in artifact.adaptive_log.epoch_rows]
        write_training_log(rows, p["training_log"])
    log.info("train[%s]: %.1fs -> %s", cfg.method, time.perf_counter() - t0, out_path)
    return {"artifact": out_path, "wall_s": time.perf_counter() - t0}


def load_artifact(cfg: ExperimentConfig, path, data: DataBundle) -> TrainedArtifact:
    """Read a persisted artifact and check it belongs to the current data."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            head = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unreadable artifact {path}: {exc}") from exc
    kind = head.get("kind")
    extra = head.get("extra") or {}
    recorded_hash = extra.get("data_hash") or head.get("data_hash")
    if recorded_hash is not None and recorded_hash != data.data_hash:
        raise FormatError(
            f"artifact {path} was trained on data {recorded_hash}, "
            f"current data is {data.data_hash}"
        )
    if kind == "predictive-model":
        model = load_model(path)
        steps = extra.get("fine_tune_steps", cfg.meta.adaptation_steps)
        return TrainedArtifact(extra.get("method", cfg.method), "model",
                               model=model, fine_tune_steps=int(steps))
    if kind == "cluster-model":
        clusters = bl.ClusterModel(
            centroids=np.asarray(head["centroids"], dtype=np.float64),
            assignments=np.zeros(0, dtype=np.int64),
            models=[model_from_dict(d) for d in head["models"]],
        )
        steps = extra.get("fine_tune_steps", cfg.meta.adaptation_steps)
        return TrainedArtifact(extra.get("method", cfg.method), "clusters",
                               clusters=clusters, fine_tune_steps=int(steps))
    if kind == "task-hierarchy":
        hierarchy, _ = load_hierarchy(path)
        return TrainedArtifact(extra.get("method", cfg.method), "hierarchy",
                               hierarchy=hierarchy)
    raise FormatError(f"artifact {path} has unknown kind {kind!r}")


def eval_artifact(cfg: ExperimentConfig, artifact: TrainedArtifact,
                  data: DataBundle, taskset=None):
    """Score the artifact on ``taskset`` (default: the test split).

    Returns ``(report, split_improvement_rows)``.
    """
    tasks = taskset if taskset is not None else data.test
    meta = cfg.meta
    split_improvement = None
    if artifact.kind == "model":
        records = records_for_tasks(artifact.model, tasks, meta.inner_lr,
                                    artifact.fine_tune_steps, workers=cfg.workers)
        threshold_log = []
    elif artifact.kind == "clusters":
        records = []
        for task in tasks:
            j = artifact.clusters.nearest(bl.task_embedding(task))
            records.append(record_for_task(artifact.clusters.models[j], task,
                                           meta.inner_lr, artifact.fine_tune_steps))
        threshold_log = []
    else:
        hierarchy = artifact.hierarchy
        records = evaluate_adaptive(tasks, hierarchy, cfg.hierarchy_config(),
                                    workers=cfg.workers)
        threshold_log = hierarchy.threshold_log
        before = records_for_tasks(hierarchy.root.layer_model, tasks,
                                   meta.inner_lr, meta.adaptation_steps,
                                   workers=cfg.workers)
        split_improvement = [
            (b.task_id, b.lat, b.lon, b.r2, a.r2)
            for b, a in zip(before, records)
        ]
    metadata = {
        "method": artifact.method, "seed": cfg.seed,
        "config_hash": config_hash(cfg), "data_hash": data.data_hash,
        "route_on": cfg.route_on, "select_epoch": cfg.select_epoch,
        "n_tasks": len(records),
    }
    report = build_report(artifact.method, records, threshold_log, metadata)
    return report, split_improvement


def cmd_eval(cfg: ExperimentConfig, artifact_file=None):
    t0 = time.perf_counter()
    data = load_data(cfg)
    path = artifact_file or artifact_path(cfg)
    artifact = load_artifact(cfg, path, data)
    report, split_improvement = eval_artifact(cfg, artifact, data)
    report.metadata["wall_s"] = time.perf_counter() - t0
    out = _paths(cfg)["eval_dir"]
    paths = write_report_files(report, out, split_improvement=split_improvement)
    log.info("eval[%s]: wrote %d files to %s", artifact.method, len(paths), out)
    return {"report": report, "files": paths}


def cmd_sweep(cfg: ExperimentConfig, axis, values):
    """Train + evaluate per axis value with a fixed seed; emit sweep.csv."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = [int(v) for v in values]
    for v in values:
        if not 1 <= v <= 8:
            raise ConfigError(f"sweep values must be within [1, 8], got {v}")
    data = load_data(cfg)
    rows = []
    for value in values:
        run_cfg = cfg
        if axis == "inner_epochs":
            run_cfg = replace(cfg, meta=replace(cfg.meta, inner_epochs=value))
        elif axis == "adaptation_steps":
            run_cfg = replace(cfg, meta=replace(cfg.meta, adaptation_steps=value))
        else:
            run_cfg = replace(cfg, max_splits=value)
        try:
            artifact = train_method(run_cfg, data)
            report, _ = eval_artifact(run_cfg, artifact, data)
            agg = report.aggregates
            rows.append((axis, value, agg["whole"][0], agg["low"][0],
                         agg["high"][0]))
        except Exception as exc:  # failed cells are recorded, not fatal
            log.warning("sweep cell %s=%d failed: %s", axis, value, exc)
            rows.append((axis, value, "NA", "NA", "NA"))
    os.makedirs(cfg.out_dir, exist_ok=True)
    sweep_path = _paths(cfg)["sweep"]
    with open(sweep_path, "w", encoding="utf-8") as fh:
        fh.write("axis,value,whole_r2,low_r2,high_r2\n")
        for r in rows:
            fh.write(",".join(
                format(v, ".17g") if isinstance(v, float) else str(v) for v in r
            ) + "\n")
    return {"rows": rows, "path": sweep_path}


def cmd_grad_check(seed=0, n_configs=20, step=1e-5, tol=1e-4):
    """Randomized gradient verification over architecture space."""
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_configs):
        hidden = int(rng.integers(2, 9))
        steps = int(rng.integers(2, 11))
        feats_dim = int(rng.integers(1, 20))
        batch = int(rng.integers(2, 5))
        arch = Architecture(feats_dim, steps, hidden)
        model = PredictiveModel.init(arch, np.random.default_rng(int(rng.integers(1 << 31))))
        feats = rng.standard_normal((batch, steps, feats_dim))
        labels = rng.standard_normal(batch)
        report = grad_check(model, feats, labels, step=step, tol=tol)
        results.append({
            "config": i, "hidden_size": hidden, "time_steps": steps,
            "input_size": feats_dim, "n_params": model.n_params,
            "max_rel_error": report.max_rel_error, "ok": report.ok,
        })
        log.info("grad-check %d: H=%d T=%d F=%d max_rel_err %.2e %s",
                 i, hidden, steps, feats_dim, report.max_rel_error,
                 "ok" if report.ok else "FAIL")
    return results
