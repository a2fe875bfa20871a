"""Comparison methods: pooled supervised baselines, clustering, transfer.

All methods share the meta stack's budget (same optimizer, outer learning
rate, and epoch count) so differences isolate the training structure rather
than compute. Evaluation goes through the same record type the hierarchy
uses; query labels are read exactly once per task per evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .metalearn import (
    MetaConfig,
    TaskScore,
    adapt,
    evaluate_task,
    r_squared,
    train_origin_maml,
)
from .net import PredictiveModel, mse_loss
from .optim import OptimizerState, adam_step

log = logging.getLogger("hiermaml")

POOLED_BATCH_SIZE = 256


def pooled_windows(tasksets_and_parts):
    """Stack (features, labels) from the requested (taskset, part) pairs.

    ``part`` is "support", "query", or "both". Order is deterministic:
    task-id ascending, support before query.
    """
    feats, labels = [], []
    for taskset, part in tasksets_and_parts:
        for task in taskset:
            if part in ("support", "both"):
                feats.append(task.support.features)
                labels.append(task.support.labels)
            if part in ("query", "both"):
                feats.append(task.query.features)
                labels.append(task.query.labels)
    return np.concatenate(feats, axis=0), np.concatenate(labels)


def train_supervised(model: PredictiveModel, features, labels, epochs, lr,
                     batch_size=POOLED_BATCH_SIZE, seed=0):
    """Plain minibatch Adam regression on pooled windows.

    Returns ``(model, log)`` with one log row per epoch.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = features.shape[0]
    params = model.flatten()
    state = OptimizerState.adam(params.size)
    rng = np.random.default_rng(seed)
    rows = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad, _ = model.loss_and_grad(params, features[idx], labels[idx])
            params, state = adam_step(state, params, grad, lr)
            losses.append(loss)
        rows.append({"epoch": epoch + 1, "mean_mse": float(np.mean(losses))})
    return model.with_params(params), rows


BASELINE_VARIANTS = ("A", "B", "C")


@dataclass
class BaselineModel:
    """Pooled supervised model plus the evaluation protocol it expects."""

    variant: str
    model: PredictiveModel
    fine_tune_steps: int  # applied per task at evaluation time (variant C)


def train_baseline(variant, train, test, cfg: MetaConfig, model=None):
    """Pooled supervised training for baselines A, B, and C.

    A trains on all train windows; B additionally trains on test support
    windows; C trains like A but fine-tunes per task at evaluation time.
    Test query labels are never part of any pool.
    """
    if variant not in BASELINE_VARIANTS:
        raise ValueError(f"unknown baseline variant {variant!r}")
    if model is None:
        from .metalearn import default_model
        seed = np.random.SeedSequence(cfg.seed).generate_state(1)[0]
        model = default_model(train.descriptor, seed=seed)
    parts = [(train, "both")]
    if variant == "B":
        parts.append((test, "support"))
    feats, labels = pooled_windows(parts)
    trained, _ = train_supervised(model, feats, labels, cfg.outer_epochs,
                                  cfg.outer_lr, seed=cfg.seed)
    steps = cfg.adaptation_steps if variant == "C" else 0
    return BaselineModel(variant, trained, steps)


def evaluate_baseline(baseline: BaselineModel, test, cfg: MetaConfig, workers=1):
    """Score test tasks under the baseline's protocol; one TaskScore each."""
    steps = baseline.fine_tune_steps
    from .metalearn import evaluate_tasks
    return evaluate_tasks(baseline.model, list(test), cfg.inner_lr, steps,
                          workers=workers)


# -- conditional meta-learning --------------------------------------------------

def task_embedding(task):
    """Support-set summary: per-feature means and stds plus the label mean."""
    feats = task.support.features
    if feats.shape[0] == 0:
        raise ValueError("task has an empty support set")
    per_feature = feats.reshape(-1, feats.shape[-1])
    return np.concatenate([
        per_feature.mean(axis=0),
        per_feature.std(axis=0),
        [task.support.labels.mean()],
    ])


@dataclass
class ClusterModel:
    """Seeded k-means centroids with one meta model per cluster."""

    centroids: np.ndarray
    assignments: np.ndarray  # training-point cluster index, input order
    models: list = field(default_factory=list)

    @property
    def k(self):
        return self.centroids.shape[0]

    def nearest(self, point):
        d = np.sum((self.centroids - point[None, :]) ** 2, axis=1)
        return int(np.argmin(d))  # argmin takes the lowest index on ties


def kmeans(points, k, seed=0, max_iters=100) -> ClusterModel:
    """Lloyd iterations from a distance-weighted seeded start.

    Stops at an assignment fixpoint or after ``max_iters``. An emptied
    cluster is re-seeded to the point farthest from its centroid assignment.
    """
    points = np.asarray(points, dtype=np.float64)
    if k <= 0:
        raise ValueError("k must be positive")
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    for j in range(1, k):
        d2 = np.min(
            np.sum((points[:, None, :] - centroids[None, :j, :]) ** 2, axis=2),
            axis=1,
        )
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[int(rng.integers(n))]
            continue
        centroids[j] = points[rng.choice(n, p=d2 / total)]

    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d, axis=1)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            members = points[assignments == j]
            if len(members) == 0:
                dist_to_own = d[np.arange(n), assignments]
                centroids[j] = points[int(np.argmax(dist_to_own))]
            else:
                centroids[j] = members.mean(axis=0)
    return ClusterModel(centroids=centroids, assignments=assignments)


def kmeans_objective(points, clusters: ClusterModel):
    d = np.sum((points - clusters.centroids[clusters.assignments]) ** 2, axis=1)
    return float(d.sum())


def train_condition_maml(train, cfg: MetaConfig, k=4, model=None):
    """Cluster tasks by embedding, then meta-train one model per cluster."""
    tasks = list(train)
    if len(tasks) < k:
        raise ValueError(f"need at least {k} tasks for {k} clusters")
    points = np.stack([task_embedding(t) for t in tasks])
    clusters = kmeans(points, k, seed=cfg.seed)
    for j in range(k):
        member_ids = [tasks[i].task_id for i in range(len(tasks))
                      if clusters.assignments[i] == j]
        members = train.subset(member_ids)
        if len(members) < cfg.task_batch_size:
            log.warning("cluster %d has %d tasks, batch size clamps to that",
                        j, len(members))
        cluster_model, _ = train_origin_maml(members, cfg, model=model)
        clusters.models.append(cluster_model)
    return clusters


def evaluate_condition_maml(clusters: ClusterModel, test, cfg: MetaConfig,
                            workers=1):
    """Assign each test task to its nearest centroid's model and score it."""
    out = []
    for task in test:
        j = clusters.nearest(task_embedding(task))
        out.append(evaluate_task(clusters.models[j], task, cfg.inner_lr,
                                 cfg.adaptation_steps))
    return out


def condition_assignments(clusters: ClusterModel, taskset):
    return {t.task_id: clusters.nearest(task_embedding(t)) for t in taskset}


# -- transfer pretraining --------------------------------------------------------

def train_transfer_maml(train, cfg: MetaConfig, model=None):
    """Pooled supervised warm start on support windows, then meta-training."""
    if model is None:
        from .metalearn import default_model
        seed = np.random.SeedSequence(cfg.seed).generate_state(1)[0]
        model = default_model(train.descriptor, seed=seed)
    feats, labels = pooled_windows([(train, "support")])
    warm, _ = train_supervised(model, feats, labels, cfg.outer_epochs,
                               cfg.outer_lr, seed=cfg.seed)
    return train_origin_maml(train, cfg, model=warm)
