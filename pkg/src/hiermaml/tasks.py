"""Task data model, synthetic generator, CSV ingestion, and normalization.

A task is one grid location's few-shot regression problem: a support set used
for adaptation and a temporally later query set used for scoring. The
synthetic generator lays regimes (distinct input-output relationships) over
contiguous blocks of a grid so that task difficulty is spatially structured,
and splits train/test locations spatially as well.
"""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, IngestError

DEFAULT_FEATURE_NAMES = (
    "RADN", "TMAX_AIR", "TDIF_AIR", "HMAX_AIR", "HDIF_AIR", "WIND", "PRECN",
    "Crop_Type", "TBKDS", "TSAND", "TSILT", "TFC", "TWP", "TKSat", "TSOC",
    "TPH", "TCEC", "GPP", "YEAR",
)

# Query-label reads are counted here while an audit is active so tests can
# verify that evaluation code touches held-out labels exactly once per task.
_QUERY_LABEL_AUDIT = None


@contextmanager
def audit_query_label_reads():
    """Count query-label reads per task id within the block."""
    global _QUERY_LABEL_AUDIT
    previous = _QUERY_LABEL_AUDIT
    counts: dict[int, int] = {}
    _QUERY_LABEL_AUDIT = counts
    try:
        yield counts
    finally:
        _QUERY_LABEL_AUDIT = previous


@dataclass(frozen=True)
class SampleWindow:
    """One sample: a time-by-feature window plus its label and year."""

    features: np.ndarray
    label: float
    year: int
    sample_id: int


class WindowBatch:
    """Column-stacked samples; behaves as a sequence of SampleWindow."""

    def __init__(self, features, labels, years, sample_ids):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.years = np.asarray(years, dtype=np.int64)
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.years) == len(self.sample_ids) == n):
            raise ValueError("window batch arrays disagree on sample count")

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        return SampleWindow(
            self.features[i], float(self.labels[i]),
            int(self.years[i]), int(self.sample_ids[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass
class Task:
    """A single location's support/query regression problem."""

    task_id: int
    location: tuple[float, float]
    support: WindowBatch
    query: WindowBatch
    regime_id: int | None = None

    def __post_init__(self):
        if len(self.support) == 0 or len(self.query) == 0:
            raise ValueError(f"task {self.task_id}: support and query must be non-empty")
        overlap = set(self.support.sample_ids.tolist()) & set(self.query.sample_ids.tolist())
        if overlap:
            raise ValueError(
                f"task {self.task_id}: sample ids shared by support and query: {sorted(overlap)[:5]}"
            )
        if self.support.years.max() >= self.query.years.min():
            raise ValueError(
                f"task {self.task_id}: support years must all precede query years"
            )

    def support_features(self):
        return self.support.features

    def support_labels(self):
        return self.support.labels

    def query_features(self):
        return self.query.features

    def query_labels(self):
        if _QUERY_LABEL_AUDIT is not None:
            _QUERY_LABEL_AUDIT[self.task_id] = _QUERY_LABEL_AUDIT.get(self.task_id, 0) + 1
        return self.query.labels


@dataclass(frozen=True)
class NormalizationStats:
    feature_means: np.ndarray
    feature_stds: np.ndarray
    label_min: float
    label_max: float

    def to_dict(self):
        return {
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "label_min": self.label_min,
            "label_max": self.label_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature_means=np.asarray(d["feature_means"], dtype=np.float64),
            feature_stds=np.asarray(d["feature_stds"], dtype=np.float64),
            label_min=float(d["label_min"]),
            label_max=float(d["label_max"]),
        )


@dataclass(frozen=True)
class DatasetDescriptor:
    """Shared shape and split metadata for every task in a set."""

    time_steps: int
    n_features: int
    support_size: int
    query_size: int
    support_year_cutoff: int
    feature_names: tuple[str, ...]
    normalization: NormalizationStats | None = None

    def __post_init__(self):
        if len(self.feature_names) != self.n_features:
            raise ConfigError(
                f"feature_names has {len(self.feature_names)} entries, expected "
                f"{self.n_features}"
            )

    def to_dict(self):
        return {
            "T": self.time_steps,
            "F": self.n_features,
            "k": self.support_size,
            "l": self.query_size,
            "support_year_cutoff": self.support_year_cutoff,
            "feature_names": list(self.feature_names),
            "normalization": None if self.normalization is None
            else self.normalization.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            time_steps=int(d["T"]),
            n_features=int(d["F"]),
            support_size=int(d["k"]),
            query_size=int(d["l"]),
            support_year_cutoff=int(d["support_year_cutoff"]),
            feature_names=tuple(d["feature_names"]),
            normalization=None if d.get("normalization") is None
            else NormalizationStats.from_dict(d["normalization"]),
        )


class TaskSet:
    """Immutable-by-convention collection of tasks sharing one descriptor."""

    def __init__(self, tasks, descriptor: DatasetDescriptor):
        tasks = sorted(tasks, key=lambda t: t.task_id)
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids in task set")
        self.tasks = tasks
        self.descriptor = descriptor
        self._by_id = {t.task_id: t for t in tasks}

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def ids(self):
        return [t.task_id for t in self.tasks]

    def get(self, task_id) -> Task:
        return self._by_id[task_id]

    def subset(self, ids) -> "TaskSet":
        wanted = set(ids)
        return TaskSet([t for t in self.tasks if t.task_id in wanted], self.descriptor)

    def all_features(self):
        """Every window in the set (support then query per task)."""
        parts = []
        for t in self.tasks:
            parts.append(t.support.features)
            parts.append(t.query.features)
        return np.concatenate(parts, axis=0)

    def all_labels(self):
        parts = []
        for t in self.tasks:
            parts.append(t.support.labels)
            parts.append(t.query.labels)
        return np.concatenate(parts)


# -- synthetic generation ------------------------------------------------------

NONLINEARITIES = ("linear", "sin", "interaction")


@dataclass(frozen=True)
class RegimeSpec:
    """One ground-truth input-output relationship over a block of the grid.

    ``weights`` of None means "draw from the run seed and scale to
    ``weight_norm``". ``param_jitter`` of None falls back to the config-wide
    value; larger jitter spreads task difficulty inside the regime.
    """

    fraction: float
    nonlinearity: str = "linear"
    noise_std: float = 0.05
    offset: float = 0.0
    weights: tuple[float, ...] | None = None
    weight_norm: float = 3.0
    freq: float = 1.0
    phase: float = 0.0
    param_jitter: float | None = None


@dataclass(frozen=True)
class SyntheticConfig:
    grid: tuple[int, int] = (10, 10)
    regimes: tuple[RegimeSpec, ...] = (
        RegimeSpec(fraction=0.75),
        RegimeSpec(fraction=0.25, offset=-2.0),
    )
    time_steps: int = 8
    n_features: int = 19
    support_size: int = 25
    query_size: int = 75
    samples_per_task: int = 100
    support_year_cutoff: int = 2005
    year_range: tuple[int, int] = (2000, 2020)
    test_fraction: float = 0.2
    param_jitter: float = 0.1
    pretrain_tasks: int = 40
    pretrain_samples_per_task: int = 200
    seed: int = 0
    feature_names: tuple[str, ...] | None = None

    def resolved_feature_names(self):
        if self.feature_names is not None:
            return tuple(self.feature_names)
        if self.n_features == len(DEFAULT_FEATURE_NAMES):
            return DEFAULT_FEATURE_NAMES
        return tuple(f"f{i}" for i in range(self.n_features))


def _validate_config(cfg: SyntheticConfig):
    rows, cols = cfg.grid
    if rows <= 0 or cols <= 0:
        raise ConfigError(f"grid: dimensions must be positive, got {cfg.grid}")
    if not cfg.regimes:
        raise ConfigError("regimes: at least one regime is required")
    total = sum(r.fraction for r in cfg.regimes)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"regimes.fraction: fractions sum to {total}, expected 1")
    for i, r in enumerate(cfg.regimes):
        if r.nonlinearity not in NONLINEARITIES:
            raise ConfigError(
                f"regimes[{i}].nonlinearity: unknown tag {r.nonlinearity!r}"
            )
        if r.fraction < 0:
            raise ConfigError(f"regimes[{i}].fraction: must be non-negative")
    if cfg.support_size <= 0 or cfg.query_size <= 0:
        raise ConfigError("support_size/query_size: must be positive")
    if cfg.samples_per_task < cfg.support_size + cfg.query_size:
        raise ConfigError(
            f"samples_per_task: {cfg.samples_per_task} cannot cover "
            f"k+l = {cfg.support_size + cfg.query_size}"
        )
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError(f"test_fraction: must be in (0, 1), got {cfg.test_fraction}")
    y0, y1 = cfg.year_range
    if not y0 < cfg.support_year_cutoff <= y1:
        raise ConfigError(
            f"support_year_cutoff: {cfg.support_year_cutoff} must split "
            f"year_range {cfg.year_range}"
        )
    n_cells = rows * cols
    n_test = int(round(cfg.test_fraction * n_cells))
    if n_test < 1 or n_test >= n_cells:
        raise ConfigError("test_fraction: leaves an empty train or test split")


def _regime_weights(cfg: SyntheticConfig, rng):
    out = []
    for r in cfg.regimes:
        if r.weights is not None:
            w = np.asarray(r.weights, dtype=np.float64)
            if w.shape != (cfg.n_features,):
                raise ConfigError(
                    f"regimes.weights: expected length {cfg.n_features}, got {w.shape}"
                )
        else:
            w = rng.standard_normal(cfg.n_features)
            w *= r.weight_norm / np.linalg.norm(w)
        out.append(w)
    return out


def _regime_of_cells(cfg: SyntheticConfig):
    """Assign regimes to contiguous column-major blocks with exact counts."""
    rows, cols = cfg.grid
    n = rows * cols
    cum = np.cumsum([r.fraction for r in cfg.regimes])
    bounds = [int(round(c * n)) for c in cum]
    bounds[-1] = n
    regime_of = np.empty(n, dtype=np.int64)  # indexed in column-major cell order
    start = 0
    for regime_idx, stop in enumerate(bounds):
        regime_of[start:stop] = regime_idx
        start = stop
    # map column-major position back to (row, col)
    by_cell = {}
    pos = 0
    for col in range(cols):
        for row in range(rows):
            by_cell[(row, col)] = int(regime_of[pos])
            pos += 1
    return by_cell


def _label_fn(base, spec: RegimeSpec):
    if spec.nonlinearity == "linear":
        return base + spec.offset
    if spec.nonlinearity == "sin":
        return np.sin(spec.freq * base + spec.phase) + spec.offset
    # interaction: quadratic term built from pairwise products of the
    # weighted column means
    return base + 0.5 * base * base + spec.offset


def _cycle_years(start, stop_inclusive, count):
    span = stop_inclusive - start + 1
    return np.array([start + (i % span) for i in range(count)], dtype=np.int64)


def _make_task(task_id, location, regime_idx, w_task, spec, cfg, rng,
               n_support_pool, n_query_pool, keep_k, keep_l, noise_std):
    t, f = cfg.time_steps, cfg.n_features
    pool = n_support_pool + n_query_pool
    feats = rng.standard_normal((pool, t, f))
    col_means = feats.mean(axis=1)
    labels = _label_fn(col_means @ w_task, spec)
    if noise_std > 0:
        labels = labels + noise_std * rng.standard_normal(pool)
    years = np.concatenate([
        _cycle_years(cfg.year_range[0], cfg.support_year_cutoff - 1, n_support_pool),
        _cycle_years(cfg.support_year_cutoff, cfg.year_range[1], n_query_pool),
    ])
    sample_ids = np.arange(pool, dtype=np.int64)
    sup_idx = np.sort(rng.choice(n_support_pool, size=keep_k, replace=False))
    qry_idx = n_support_pool + np.sort(
        rng.choice(n_query_pool, size=keep_l, replace=False)
    )
    support = WindowBatch(feats[sup_idx], labels[sup_idx], years[sup_idx],
                          sample_ids[sup_idx])
    query = WindowBatch(feats[qry_idx], labels[qry_idx], years[qry_idx],
                        sample_ids[qry_idx])
    return Task(task_id, location, support, query, regime_id=regime_idx)


def generate_synthetic(cfg: SyntheticConfig):
    """Build (train, test, pretrain) task sets from a seeded config.

    Regimes occupy contiguous column bands; the test split takes the last
    rows of the grid (row-major tail), so every regime that spans the test
    rows appears in both splits. The pretrain set mimics a noise-free
    simulator: first-regime parameters, no per-task jitter, larger pools.
    """
    _validate_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    rows, cols = cfg.grid
    n_cells = rows * cols
    weights = _regime_weights(cfg, rng)
    regime_by_cell = _regime_of_cells(cfg)

    sup_pool = int(round(cfg.samples_per_task * cfg.support_size
                         / (cfg.support_size + cfg.query_size)))
    sup_pool = max(sup_pool, cfg.support_size)
    qry_pool = cfg.samples_per_task - sup_pool
    if qry_pool < cfg.query_size:
        raise ConfigError("samples_per_task: query pool smaller than query_size")

    tasks = []
    for row in range(rows):
        for col in range(cols):
            task_id = row * cols + col
            regime_idx = regime_by_cell[(row, col)]
            spec = cfg.regimes[regime_idx]
            jitter = spec.param_jitter if spec.param_jitter is not None else cfg.param_jitter
            w_task = weights[regime_idx] + jitter * rng.standard_normal(cfg.n_features)
            tasks.append(_make_task(
                task_id, (float(row), float(col)), regime_idx, w_task, spec, cfg,
                rng, sup_pool, qry_pool, cfg.support_size, cfg.query_size,
                spec.noise_std,
            ))

    n_test = int(round(cfg.test_fraction * n_cells))
    test_ids = set(range(n_cells - n_test, n_cells))  # row-major tail block
    descriptor = DatasetDescriptor(
        time_steps=cfg.time_steps, n_features=cfg.n_features,
        support_size=cfg.support_size, query_size=cfg.query_size,
        support_year_cutoff=cfg.support_year_cutoff,
        feature_names=cfg.resolved_feature_names(),
    )
    train = TaskSet([t for t in tasks if t.task_id not in test_ids], descriptor)
    test = TaskSet([t for t in tasks if t.task_id in test_ids], descriptor)

    pre_sup = int(round(cfg.pretrain_samples_per_task * cfg.support_size
                        / (cfg.support_size + cfg.query_size)))
    pre_sup = max(pre_sup, 2)
    pre_qry = cfg.pretrain_samples_per_task - pre_sup
    pre_spec = replace(cfg.regimes[0], noise_std=0.0)
    pre_tasks = []
    for i in range(cfg.pretrain_tasks):
        task_id = n_cells + i
        location = (float(rows + 2 + i // cols), float(i % cols))
        pre_tasks.append(_make_task(
            task_id, location, 0, weights[0], pre_spec, cfg, rng,
            pre_sup, pre_qry, pre_sup, pre_qry, 0.0,
        ))
    pre_descriptor = replace(descriptor, support_size=pre_sup, query_size=pre_qry)
    pretrain = TaskSet(pre_tasks, pre_descriptor)
    return train, test, pretrain


# -- normalization -------------------------------------------------------------

def normalize(train: TaskSet, others=()):
    """Z-score features and min-max labels using train statistics only.

    Returns ``(new_train, new_others, stats, warnings)``. Feature statistics
    pool every support and query window of the train set; zero-variance
    features are centered but not scaled (recorded as warnings). A set that
    already carries normalization statistics is rejected.
    """
    if len(train) == 0:
        raise ValueError("cannot normalize an empty train set")
    for ts in (train, *others):
        if ts.descriptor.normalization is not None:
            raise ValueError("task set is already normalized")
    feats = train.all_features()
    per_feature = feats.reshape(-1, feats.shape[-1])
    means = per_feature.mean(axis=0)
    stds = per_feature.std(axis=0)
    warnings = []
    for j in np.nonzero(stds < 1e-12)[0]:
        warnings.append(
            f"feature {train.descriptor.feature_names[j]} has zero variance; centered only"
        )
    safe_stds = np.where(stds < 1e-12, 1.0, stds)
    labels = train.all_labels()
    lab_min, lab_max = float(labels.min()), float(labels.max())
    if lab_max - lab_min < 1e-12:
        warnings.append("train labels are constant; labels centered only")
        lab_max = lab_min + 1.0
    stats = NormalizationStats(means, safe_stds, lab_min, lab_max)

    def apply(ts: TaskSet):
        new_tasks = []
        for task in ts.tasks:
            batches = []
            for batch in (task.support, task.query):
                nf = (batch.features - means) / safe_stds
                nl = (batch.labels - lab_min) / (lab_max - lab_min)
                batches.append(WindowBatch(nf, nl, batch.years, batch.sample_ids))
            new_tasks.append(Task(task.task_id, task.location, batches[0],
                                  batches[1], regime_id=task.regime_id))
        return TaskSet(new_tasks, replace(ts.descriptor, normalization=stats))

    return apply(train), [apply(ts) for ts in others], stats, warnings


# -- yield terciles --------------------------------------------------------------

def tercile_partition(taskset: TaskSet, per_task_mean_labels):
    """Split task ids into (whole, low, high) by mean query label.

    low keeps everything except the top third; high keeps everything except
    the bottom third; ties break by ascending task id.
    """
    ids = taskset.ids()
    if set(per_task_mean_labels) != set(ids):
        raise ValueError("need exactly one mean label per task")
    order = sorted(ids, key=lambda i: (per_task_mean_labels[i], i))
    n = len(order)
    third = n // 3
    low = set(order[:n - third])
    high = set(order[third:])
    return set(ids), low, high


# -- CSV round trip --------------------------------------------------------------

def _csv_header(descriptor: DatasetDescriptor):
    cols = ["task_id", "lat", "lon", "sample_id", "year"]
    for t in range(descriptor.time_steps):
        for f in range(descriptor.n_features):
            cols.append(f"x_t{t}_f{f}")
    cols.append("label")
    return cols


def _fmt(x):
    return format(float(x), ".17g")


def export_csv(taskset: TaskSet, data_path, descriptor_path):
    """Write the wide-format data CSV and its JSON descriptor sidecar."""
    desc = taskset.descriptor
    header = _csv_header(desc)
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for task in taskset.tasks:
            for batch in (task.support, task.query):
                for i in range(len(batch)):
                    row = [str(task.task_id), _fmt(task.location[0]),
                           _fmt(task.location[1]), str(int(batch.sample_ids[i])),
                           str(int(batch.years[i]))]
                    row.extend(_fmt(v) for v in batch.features[i].ravel())
                    row.append(_fmt(batch.labels[i]))
                    writer.writerow(row)
    with open(descriptor_path, "w", encoding="utf-8") as fh:
        json.dump(desc.to_dict(), fh, indent=1)


def load_descriptor(descriptor_path) -> DatasetDescriptor:
    with open(descriptor_path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IngestError(f"descriptor {descriptor_path} is not valid JSON: {exc}")
    try:
        return DatasetDescriptor.from_dict(payload)
    except (KeyError, TypeError) as exc:
        raise IngestError(f"descriptor {descriptor_path} is missing fields: {exc}")


def load_csv(data_path, descriptor_path, seed=0) -> TaskSet:
    """Rebuild a TaskSet from its CSV + descriptor.

    Support/query membership is recomputed from the descriptor's year cutoff;
    when a task carries more than k support-year (or l query-year) samples,
    the surplus is dropped by uniform seeded subsampling.
    """
    desc = load_descriptor(descriptor_path)
    expected = _csv_header(desc)
    per_task: dict[int, dict] = {}
    seen: set[tuple[int, int]] = set()
    with open(data_path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{data_path} is empty", row=1)
        if header != expected:
            missing = [c for c in expected if c not in header]
            if missing:
                raise IngestError(f"missing column(s): {missing[:5]}", row=1)
            raise IngestError("column order does not match the descriptor", row=1)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise IngestError(
                    f"expected {len(expected)} cells, got {len(row)}", row=row_no
                )
            try:
                task_id = int(row[0])
                lat, lon = float(row[1]), float(row[2])
                sample_id = int(row[3])
                year = int(row[4])
                values = np.array([float(v) for v in row[5:]], dtype=np.float64)
            except ValueError as exc:
                raise IngestError(f"non-numeric cell: {exc}", row=row_no)
            if not np.all(np.isfinite(values)):
                raise IngestError("non-finite value", row=row_no)
            if (task_id, sample_id) in seen:
                raise IngestError(
                    f"duplicate (task_id, sample_id) = ({task_id}, {sample_id})",
                    row=row_no,
                )
            seen.add((task_id, sample_id))
            entry = per_task.setdefault(
                task_id, {"location": (lat, lon), "rows": []}
            )
            entry["rows"].append((sample_id, year, values[:-1], values[-1]))

    rng = np.random.default_rng(seed)
    tasks = []
    for task_id in sorted(per_task):
        entry = per_task[task_id]
        entry["rows"].sort(key=lambda r: r[0])
        sup = [r for r in entry["rows"] if r[1] < desc.support_year_cutoff]
        qry = [r for r in entry["rows"] if r[1] >= desc.support_year_cutoff]
        if len(sup) < desc.support_size or len(qry) < desc.query_size:
            raise IngestError(
                f"task {task_id} has {len(sup)} support / {len(qry)} query samples, "
                f"descriptor needs {desc.support_size}/{desc.query_size}"
            )
        if len(sup) > desc.support_size:
            keep = np.sort(rng.choice(len(sup), size=desc.support_size, replace=False))
            sup = [sup[i] for i in keep]
        if len(qry) > desc.query_size:
            keep = np.sort(rng.choice(len(qry), size=desc.query_size, replace=False))
            qry = [qry[i] for i in keep]

        def to_batch(rows_):
            t = desc.time_steps
            f = desc.n_features
            feats = np.stack([r[2].reshape(t, f) for r in rows_])
            return WindowBatch(
                feats,
                np.array([r[3] for r in rows_]),
                np.array([r[1] for r in rows_]),
                np.array([r[0] for r in rows_]),
            )

        tasks.append(Task(task_id, entry["location"], to_batch(sup), to_batch(qry)))
    return TaskSet(tasks, desc)
