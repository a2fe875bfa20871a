"""Experiment configuration: TOML parsing, defaults, validation, hashing.

An empty config file reproduces the reference protocol at synthetic scale:
every field falls back to the documented default. Methods resolve a few
variant-dependent defaults (inner epochs) unless the file pins them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigError
from .hierarchy import GammaBounds, HierarchyConfig
from .metalearn import MetaConfig
from .tasks import RegimeSpec, SyntheticConfig

METHODS = (
    "baseline-a", "baseline-b", "baseline-c",
    "origin-maml", "transfer-maml", "condition-maml",
    "adaptive-maml-a", "adaptive-maml-b",
)

# Methods whose initial parameters come from the pretrained model artifact.
PRETRAIN_INITIALIZED = (
    "origin-maml", "condition-maml", "adaptive-maml-a", "adaptive-maml-b",
)

SWEEP_AXES = ("inner_epochs", "max_splits", "adaptation_steps")


@dataclass(frozen=True)
class CsvDataConfig:
    train_data: str
    train_descriptor: str
    test_data: str
    test_descriptor: str
    pretrain_data: str | None = None
    pretrain_descriptor: str | None = None


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 150
    batch_size: int = 256
    learning_rate: float = 0.001
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "adaptive-maml-b"
    seed: int = 0
    out_dir: str = "runs/out"
    workers: int = 1
    data_source: str = "synthetic"  # "synthetic" | "csv"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    csv: CsvDataConfig | None = None
    hidden_size: int = 8
    head_widths: tuple[int, ...] = ()
    meta: MetaConfig = field(default_factory=MetaConfig)
    max_splits: int = 3
    bounds: GammaBounds = field(default_factory=GammaBounds)
    route_on: str = "query"
    select_epoch: str = "final"
    condition_clusters: int = 4
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def hierarchy_config(self) -> HierarchyConfig:
        variant = "A" if self.method == "adaptive-maml-a" else "B"
        return HierarchyConfig(
            max_splits=self.max_splits, variant=variant, bounds=self.bounds,
            meta=self.meta, route_on=self.route_on,
        )

    def to_dict(self):
        d = {
            "method": self.method,
            "seed": self.seed,
            "workers": self.workers,
            "data_source": self.data_source,
            "hidden_size": self.hidden_size,
            "head_widths": list(self.head_widths),
            "meta": {
                "inner_lr": self.meta.inner_lr,
                "outer_lr": self.meta.outer_lr,
                "adaptation_steps": self.meta.adaptation_steps,
                "task_batch_size": self.meta.task_batch_size,
                "outer_epochs": self.meta.outer_epochs,
                "inner_epochs": self.meta.inner_epochs,
                "seed": self.meta.seed,
            },
            "hierarchy": {
                "max_splits": self.max_splits,
                "bounds_a": self.bounds.a,
                "bounds_b": self.bounds.b,
                "route_on": self.route_on,
                "select_epoch": self.select_epoch,
            },
            "condition_clusters": self.condition_clusters,
            "pretrain": {
                "epochs": self.pretrain.epochs,
                "batch_size": self.pretrain.batch_size,
                "learning_rate": self.pretrain.learning_rate,
                "holdout_fraction": self.pretrain.holdout_fraction,
            },
        }
        if self.data_source == "synthetic":
            s = self.synthetic
            d["synthetic"] = {
                "grid": list(s.grid),
                "regimes": [{
                    "fraction": r.fraction,
                    "nonlinearity": r.nonlinearity,
                    "noise_std": r.noise_std,
                    "offset": r.offset,
                    "weights": None if r.weights is None else list(r.weights),
                    "weight_norm": r.weight_norm,
                    "freq": r.freq,
                    "phase": r.phase,
                    "param_jitter": r.param_jitter,
                } for r in s.regimes],
                "time_steps": s.time_steps,
                "n_features": s.n_features,
                "support_size": s.support_size,
                "query_size": s.query_size,
                "samples_per_task": s.samples_per_task,
                "support_year_cutoff": s.support_year_cutoff,
                "year_range": list(s.year_range),
                "test_fraction": s.test_fraction,
                "param_jitter": s.param_jitter,
                "pretrain_tasks": s.pretrain_tasks,
                "pretrain_samples_per_task": s.pretrain_samples_per_task,
                "seed": s.seed,
            }
        else:
            d["csv"] = {
                "train_data": self.csv.train_data,
                "train_descriptor": self.csv.train_descriptor,
                "test_data": self.csv.test_data,
                "test_descriptor": self.csv.test_descriptor,
                "pretrain_data": self.csv.pretrain_data,
                "pretrain_descriptor": self.csv.pretrain_descriptor,
            }
        return d


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _take(section: dict, key, default, kind=None, where=""):
    value = section.pop(key, default)
    if kind is not None and value is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}{key}: cannot interpret {value!r}")
    return value


def _reject_unknown(section: dict, where):
    if section:
        raise ConfigError(f"{where}: unknown key(s) {sorted(section)}")


def _parse_regimes(raw, where):
    regimes = []
    for i, entry in enumerate(raw):
        entry = dict(entry)
        w = entry.pop("weights", None)
        regimes.append(RegimeSpec(
            fraction=_take(entry, "fraction", None, float, f"{where}[{i}]."),
            nonlinearity=_take(entry, "nonlinearity", "linear", str, f"{where}[{i}]."),
            noise_std=_take(entry, "noise_std", 0.05, float, f"{where}[{i}]."),
            offset=_take(entry, "offset", 0.0, float, f"{where}[{i}]."),
            weights=None if w is None else tuple(float(x) for x in w),
            weight_norm=_take(entry, "weight_norm", 3.0, float, f"{where}[{i}]."),
            freq=_take(entry, "freq", 1.0, float, f"{where}[{i}]."),
            phase=_take(entry, "phase", 0.0, float, f"{where}[{i}]."),
            param_jitter=_take(entry, "param_jitter", None, float, f"{where}[{i}]."),
        ))
        if regimes[-1].fraction is None:
            raise ConfigError(f"{where}[{i}].fraction: required")
        _reject_unknown(entry, f"{where}[{i}]")
    return tuple(regimes)


def from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated config from a parsed TOML mapping."""
    raw = json.loads(json.dumps(raw))  # deep copy with plain types
    method = _take(raw, "method", "adaptive-maml-b", str)
    if method not in METHODS:
        raise ConfigError(f"method: unknown method {method!r}; choose from {METHODS}")
    seed = _take(raw, "seed", 0, int)
    out_dir = _take(raw, "out_dir", "runs/out", str)
    workers = _take(raw, "workers", 1, int)

    data = raw.pop("data", {})
    source = _take(data, "source", "synthetic", str, "data.")
    if source not in ("synthetic", "csv"):
        raise ConfigError(f"data.source: must be 'synthetic' or 'csv', got {source!r}")
    syn_raw = data.pop("synthetic", {})
    csv_raw = data.pop("csv", {})
    _reject_unknown(data, "data")

    regimes_raw = syn_raw.pop("regimes", None)
    synthetic = SyntheticConfig(
        grid=tuple(_take(syn_raw, "grid", [10, 10], list, "data.synthetic.")),
        regimes=_parse_regimes(regimes_raw, "data.synthetic.regimes")
        if regimes_raw is not None else SyntheticConfig().regimes,
        time_steps=_take(syn_raw, "time_steps", 8, int, "data.synthetic."),
        n_features=_take(syn_raw, "n_features", 19, int, "data.synthetic."),
        support_size=_take(syn_raw, "support_size", 25, int, "data.synthetic."),
        query_size=_take(syn_raw, "query_size", 75, int, "data.synthetic."),
        samples_per_task=_take(syn_raw, "samples_per_task", 100, int, "data.synthetic."),
        support_year_cutoff=_take(syn_raw, "support_year_cutoff", 2005, int,
                                  "data.synthetic."),
        year_range=tuple(_take(syn_raw, "year_range", [2000, 2020], list,
                               "data.synthetic.")),
        test_fraction=_take(syn_raw, "test_fraction", 0.2, float, "data.synthetic."),
        param_jitter=_take(syn_raw, "param_jitter", 0.1, float, "data.synthetic."),
        pretrain_tasks=_take(syn_raw, "pretrain_tasks", 40, int, "data.synthetic."),
        pretrain_samples_per_task=_take(syn_raw, "pretrain_samples_per_task", 200,
                                        int, "data.synthetic."),
        seed=_take(syn_raw, "seed", seed, int, "data.synthetic."),
    )
    _reject_unknown(syn_raw, "data.synthetic")

    csv_cfg = None
    if source == "csv":
        csv_cfg = CsvDataConfig(
            train_data=_take(csv_raw, "train_data", None, str, "data.csv."),
            train_descriptor=_take(csv_raw, "train_descriptor", None, str, "data.csv."),
            test_data=_take(csv_raw, "test_data", None, str, "data.csv."),
            test_descriptor=_take(csv_raw, "test_descriptor", None, str, "data.csv."),
            pretrain_data=_take(csv_raw, "pretrain_data", None, str, "data.csv."),
            pretrain_descriptor=_take(csv_raw, "pretrain_descriptor", None, str,
                                      "data.csv."),
        )
        for f_ in ("train_data", "train_descriptor", "test_data", "test_descriptor"):
            if getattr(csv_cfg, f_) is None:
                raise ConfigError(f"data.csv.{f_}: required when data.source = 'csv'")
    _reject_unknown(csv_raw, "data.csv")

    model_raw = raw.pop("model", {})
    hidden_size = _take(model_raw, "hidden_size", 8, int, "model.")
    head_widths = tuple(_take(model_raw, "head_widths", [], list, "model."))
    _reject_unknown(model_raw, "model")

    meta_raw = raw.pop("meta", {})
    inner_epochs = meta_raw.pop("inner_epochs", None)
    if inner_epochs is None:
        inner_epochs = 3 if method == "adaptive-maml-a" else 1
    try:
        meta = MetaConfig(
            inner_lr=_take(meta_raw, "inner_lr", 0.01, float, "meta."),
            outer_lr=_take(meta_raw, "outer_lr", 0.001, float, "meta."),
            adaptation_steps=_take(meta_raw, "adaptation_steps", 1, int, "meta."),
            task_batch_size=_take(meta_raw, "task_batch_size", 32, int, "meta."),
            outer_epochs=_take(meta_raw, "outer_epochs", 30, int, "meta."),
            inner_epochs=int(inner_epochs),
            seed=_take(meta_raw, "seed", seed, int, "meta."),
        )
    except ValueError as exc:
        raise ConfigError(f"meta: {exc}")
    _reject_unknown(meta_raw, "meta")

    hier_raw = raw.pop("hierarchy", {})
    try:
        bounds = GammaBounds(
            a=_take(hier_raw, "bounds_a", 0.35, float, "hierarchy."),
            b=_take(hier_raw, "bounds_b", 0.65, float, "hierarchy."),
        )
    except ValueError as exc:
        raise ConfigError(f"hierarchy.bounds: {exc}")
    max_splits = _take(hier_raw, "max_splits", 3, int, "hierarchy.")
    route_on = _take(hier_raw, "route_on", "query", str, "hierarchy.")
    select_epoch = _take(hier_raw, "select_epoch", "final", str, "hierarchy.")
    if route_on not in ("query", "support-holdout"):
        raise ConfigError(f"hierarchy.route_on: unknown value {route_on!r}")
    if select_epoch not in ("final", "best"):
        raise ConfigError(f"hierarchy.select_epoch: unknown value {select_epoch!r}")
    if max_splits < 1:
        raise ConfigError("hierarchy.max_splits: must be >= 1")
    _reject_unknown(hier_raw, "hierarchy")

    cond_raw = raw.pop("condition", {})
    clusters = _take(cond_raw, "clusters", 4, int, "condition.")
    if clusters < 1:
        raise ConfigError("condition.clusters: must be >= 1")
    _reject_unknown(cond_raw, "condition")

    pre_raw = raw.pop("pretrain", {})
    pretrain = PretrainConfig(
        epochs=_take(pre_raw, "epochs", 150, int, "pretrain."),
        batch_size=_take(pre_raw, "batch_size", 256, int, "pretrain."),
        learning_rate=_take(pre_raw, "learning_rate", 0.001, float, "pretrain."),
        holdout_fraction=_take(pre_raw, "holdout_fraction", 0.2, float, "pretrain."),
    )
    if pretrain.epochs < 0:
        raise ConfigError("pretrain.epochs: must be >= 0")
    if not 0.0 < pretrain.holdout_fraction < 1.0:
        raise ConfigError("pretrain.holdout_fraction: must be in (0, 1)")
    _reject_unknown(pre_raw, "pretrain")
    _reject_unknown(raw, "config")

    return ExperimentConfig(
        method=method, seed=seed, out_dir=out_dir, workers=workers,
        data_source=source, synthetic=synthetic, csv=csv_cfg,
        hidden_size=hidden_size, head_widths=head_widths, meta=meta,
        max_splits=max_splits, bounds=bounds, route_on=route_on,
        select_epoch=select_epoch, condition_clusters=clusters,
        pretrain=pretrain,
    )


def load_config(path, overrides=None) -> ExperimentConfig:
    """Parse a TOML experiment file; ``overrides`` is a flat dict applied to
    the raw mapping before defaults resolve (seed, method, out_dir, workers).
    """
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}")
    if overrides:
        known = {"seed", "method", "out_dir", "workers"}
        bad = set(overrides) - known
        if bad:
            raise ConfigError(f"unknown override(s): {sorted(bad)}")
        if "seed" in overrides:
            # a seed override replaces every derived seed in the file
            raw["seed"] = int(overrides["seed"])
            raw.get("meta", {}).pop("seed", None)
            raw.get("data", {}).get("synthetic", {}).pop("seed", None)
        for key in ("method", "out_dir"):
            if key in overrides:
                raw[key] = overrides[key]
        if "workers" in overrides:
            raw["workers"] = int(overrides["workers"])
    return from_dict(raw)
