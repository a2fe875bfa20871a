"""Easy-to-hard task hierarchy: threshold selection, training, routing.

Training repeatedly meta-trains a model on the current task set, scores every
task, and bi-partitions the set at a variance-minimizing threshold over the
ranked scores: the split index minimizes Var(lower) + Var(upper) within a
bounded index window. Easy tasks get a specialist model at each layer; the
hard remainder recurses until the maximum depth, where the last hard subset
trains the deepest model. The result is a comb-shaped chain.

At test time a task descends the chain: at each node the node's pre-split
layer model is adapted to the task and its score decides easy (stop) versus
hard (descend).
"""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError
from .metalearn import (
    MetaConfig,
    StepError,
    evaluate_task,
    evaluate_tasks,
    meta_step,
    r_squared,
)
from .net import PredictiveModel, model_from_dict, model_to_dict
from .optim import OptimizerState

log = logging.getLogger("hiermaml")

EASY = "easy"
HARD = "hard"


@dataclass(frozen=True)
class GammaBounds:
    """Relative index window restricting where the split may land."""

    a: float = 0.35
    b: float = 0.65

    def __post_init__(self):
        if not (0.0 <= self.a < self.b <= 1.0):
            raise ValueError(f"need 0 <= a < b <= 1, got a={self.a}, b={self.b}")


@dataclass
class SplitResult:
    gamma: float
    split_index: int
    variance_profile: np.ndarray
    hard_ids: set
    easy_ids: set
    window_widened: bool = False


def _population_var(values):
    if values.size <= 1:
        return 0.0
    return float(np.var(values))


def select_threshold(r2_values, bounds: GammaBounds, task_ids=None) -> SplitResult:
    """Pick the split threshold for an array of per-task scores.

    Scores are ranked ascending; -inf sentinels are clamped to one below the
    finite minimum before ranking. For every split index k the profile holds
    Var(lower k) + Var(upper rest), population variance with empty/singleton
    slices contributing 0. The argmin over the index window [floor(aN),
    floor(bN)) picks the split (ties go to the smallest index); the threshold
    is the ranked value at that index, and tasks strictly below it are hard.
    """
    raw = np.asarray(r2_values, dtype=np.float64)
    n = raw.size
    if n < 2:
        raise ValueError(f"need at least 2 scores, got {n}")
    if np.any(np.isnan(raw)) or np.any(raw == np.inf):
        raise ValueError("scores must be finite or -inf sentinels")
    ids = list(task_ids) if task_ids is not None else list(range(n))
    if len(ids) != n:
        raise ValueError("task_ids length must match scores")

    clamped = raw.copy()
    sentinel = ~np.isfinite(clamped)
    if sentinel.any():
        finite = clamped[~sentinel]
        floor_value = float(finite.min()) - 1.0 if finite.size else -1.0
        clamped[sentinel] = floor_value

    ranked = np.sort(clamped)
    profile = np.empty(n)
    for k in range(n):
        profile[k] = _population_var(ranked[:k]) + _population_var(ranked[k:])

    lo = int(np.floor(bounds.a * n))
    hi = int(np.floor(bounds.b * n))
    widened = False
    if lo >= hi:
        log.warning("threshold window [%d, %d) is empty for n=%d; widened to full range",
                    lo, hi, n)
        lo, hi, widened = 0, n, True
    k_star = lo + int(np.argmin(profile[lo:hi]))
    gamma = float(ranked[k_star])

    hard = {ids[i] for i in range(n) if raw[i] < gamma}
    easy = {ids[i] for i in range(n) if raw[i] >= gamma}
    return SplitResult(gamma, k_star, profile, hard, easy, widened)


def categorize(task_r2: float, gamma: float) -> str:
    """Strictly-below goes hard; the boundary and everything above is easy."""
    if not np.isfinite(gamma):
        raise ValueError("threshold must be finite")
    return HARD if task_r2 < gamma else EASY


@dataclass
class SplitNode:
    """One layer of the comb: threshold, routing model, and specialists."""

    layer: int
    gamma: float
    layer_model: PredictiveModel
    easy_model: PredictiveModel
    easy_ids: set
    hard_ids: set
    child: "SplitNode | None" = None
    hard_model: PredictiveModel | None = None

    def validate(self):
        if (self.child is None) == (self.hard_model is None):
            raise ValueError(
                f"node at layer {self.layer} must have exactly one of child/hard_model"
            )


@dataclass
class TaskHierarchy:
    """Comb-shaped chain of split nodes plus the threshold history."""

    initial_model: PredictiveModel
    root: SplitNode
    threshold_log: list  # (epoch, layer, gamma) rows across all epochs
    route_on: str = "query"

    def nodes(self):
        node = self.root
        while node is not None:
            yield node
            node = node.child

    @property
    def depth(self):
        return sum(1 for _ in self.nodes())

    def validate(self):
        layers = []
        for node in self.nodes():
            node.validate()
            layers.append(node.layer)
        if layers != list(range(1, len(layers) + 1)):
            raise ValueError(f"layer indices must be 1..depth, got {layers}")
        hard_models = [n for n in self.nodes() if n.hard_model is not None]
        if len(hard_models) != 1:
            raise ValueError("exactly one node may hold the deepest hard model")


@dataclass(frozen=True)
class HierarchyConfig:
    max_splits: int = 3
    variant: str = "B"
    bounds: GammaBounds = GammaBounds()
    meta: MetaConfig = MetaConfig()
    route_on: str = "query"  # or "support-holdout"

    def __post_init__(self):
        if self.max_splits < 1:
            raise ValueError("max_splits must be >= 1")
        if self.variant not in ("A", "B"):
            raise ValueError(f"variant must be 'A' or 'B', got {self.variant!r}")
        if self.route_on not in ("query", "support-holdout"):
            raise ValueError(f"unknown route_on {self.route_on!r}")


@dataclass
class AdaptiveLog:
    """Training history: thresholds per (epoch, layer) and per-epoch summary."""

    threshold_rows: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    events: list = field(default_factory=list)


def _meta_sweeps(model, tasks, meta: MetaConfig, sweeps, shuffle_rng):
    """Run full passes of batched meta updates over the given tasks."""
    if len(tasks) == 0 or sweeps <= 0:
        return model
    tasks = list(tasks)
    state = OptimizerState.adam(model.n_params)
    for _ in range(sweeps):
        order = shuffle_rng.permutation(len(tasks))
        for start in range(0, len(tasks), meta.task_batch_size):
            batch = [tasks[i] for i in order[start:start + meta.task_batch_size]]
            try:
                model, state, _ = meta_step(model, batch, meta, state)
            except StepError:
                log.warning("meta batch diverged entirely; skipping update")
    return model


def _leaf_assignments(chain):
    """Map task_id -> leaf model implied by the epoch's member sets."""
    out = {}
    for node in chain:
        for tid in node.easy_ids:
            out[tid] = node.easy_model
        if node.hard_model is not None:
            for tid in node.hard_ids:
                out[tid] = node.hard_model
    return out


def train_adaptive(train, pretrained: PredictiveModel, cfg: HierarchyConfig,
                   select_epoch="final", workers=1):
    """Build the hierarchy over the configured number of outer epochs.

    Every epoch re-partitions the full train set from scratch. Variant A
    restarts each epoch from the pretrained model; variant B carries the
    previous epoch's deepest hard model as the new starting point. The
    returned hierarchy is the final epoch's chain (``select_epoch="best"``
    keeps the epoch with the highest mean leaf-assigned train score instead).

    Returns ``(hierarchy, log)``.
    """
    if len(train) < 2:
        raise ValueError("need at least 2 training tasks")
    if select_epoch not in ("final", "best"):
        raise ValueError(f"unknown select_epoch {select_epoch!r}")
    meta = cfg.meta
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(meta.seed).spawn(1)[0]
    )
    adaptive_log = AdaptiveLog()
    threshold_rows = []
    carried = pretrained
    kept_chain = None
    kept_metric = -np.inf
    for epoch in range(1, meta.outer_epochs + 1):
        t0 = time.perf_counter()
        start_model = pretrained if (cfg.variant == "A" or epoch == 1) else carried
        model = start_model
        tasks = list(train)
        chain: list[SplitNode] = []
        truncated = False
        for layer in range(1, cfg.max_splits + 1):
            model = _meta_sweeps(model, tasks, meta, meta.inner_epochs, shuffle_rng)
            scores = evaluate_tasks(model, tasks, meta.inner_lr,
                                    meta.adaptation_steps, workers=workers)
            r2s = [s.r2 for s in scores]
            split = select_threshold(r2s, cfg.bounds,
                                     task_ids=[t.task_id for t in tasks])
            threshold_rows.append({
                "epoch": epoch, "layer": layer, "gamma": split.gamma,
                "n_tasks": len(tasks), "n_easy": len(split.easy_ids),
                "n_hard": len(split.hard_ids),
            })
            easy_tasks = [t for t in tasks if t.task_id in split.easy_ids]
            hard_tasks = [t for t in tasks if t.task_id in split.hard_ids]
            easy_model = _meta_sweeps(model, easy_tasks, meta, meta.inner_epochs,
                                      shuffle_rng)
            node = SplitNode(
                layer=layer, gamma=split.gamma, layer_model=model,
                easy_model=easy_model, easy_ids=set(split.easy_ids),
                hard_ids=set(split.hard_ids),
            )
            chain.append(node)
            last_layer = layer == cfg.max_splits or len(hard_tasks) < 2
            if last_layer:
                if layer < cfg.max_splits:
                    truncated = True
                    adaptive_log.events.append(
                        f"epoch {epoch}: chain truncated at layer {layer} "
                        f"({len(hard_tasks)} hard tasks remain)"
                    )
                node.hard_model = _meta_sweeps(model, hard_tasks, meta,
                                               meta.inner_epochs, shuffle_rng)
                break
            tasks = hard_tasks
        for parent, child in zip(chain, chain[1:]):
            parent.child = child
        carried = chain[-1].hard_model

        leaf_of = _leaf_assignments(chain)
        leaf_r2s, leaf_mses, leaf_failed = [], [], 0
        for task in train:
            score = evaluate_task(leaf_of[task.task_id], task, meta.inner_lr,
                                  meta.adaptation_steps)
            if score.failed or not np.isfinite(score.r2):
                leaf_failed += 1
                continue
            leaf_r2s.append(score.r2)
            leaf_mses.append(score.mse)
        epoch_metric = float(np.mean(leaf_r2s)) if leaf_r2s else float("-inf")
        adaptive_log.epoch_rows.append({
            "epoch": epoch,
            "train_leaf_r2": epoch_metric,
            "train_leaf_mse": float(np.mean(leaf_mses)) if leaf_mses else float("inf"),
            "tasks_failed": leaf_failed,
            "depth": len(chain),
            "truncated": truncated,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        })
        if epoch == meta.outer_epochs and select_epoch == "final":
            kept_chain = chain
        if select_epoch == "best" and epoch_metric >= kept_metric:
            kept_chain, kept_metric = chain, epoch_metric

    adaptive_log.threshold_rows = threshold_rows
    hierarchy = TaskHierarchy(
        initial_model=pretrained,
        root=kept_chain[0],
        threshold_log=[(r["epoch"], r["layer"], r["gamma"]) for r in threshold_rows],
        route_on=cfg.route_on,
    )
    hierarchy.validate()
    return hierarchy, adaptive_log


# -- routing -----------------------------------------------------------------


def _routing_score(model, task, inner_lr, steps, route_on):
    """Adapted score used to compare against a node threshold."""
    from .metalearn import adapt  # local import keeps module load order simple
    from .errors import DivergenceError, NonFiniteError

    try:
        if route_on == "support-holdout" and len(task.support) >= 3:
            n_hold = max(2, int(np.ceil(0.2 * len(task.support))))
            n_hold = min(n_hold, len(task.support) - 1)
            fit = (task.support.features[:-n_hold], task.support.labels[:-n_hold])
            adapted = adapt(model, fit, inner_lr, steps)
            held_feats = task.support.features[-n_hold:]
            held_labels = task.support.labels[-n_hold:]
            preds = model.predict(adapted.params, held_feats)
            return r_squared(held_labels, preds)
        adapted = adapt(model, task.support, inner_lr, steps)
        preds = model.predict(adapted.params, task.query_features())
        return r_squared(task.query_labels(), preds)
    except (DivergenceError, NonFiniteError):
        return float("-inf")


@dataclass
class RouteResult:
    model: PredictiveModel
    layer: int
    leaf: str
    routing_r2: float  # score at the node that made the final decision


def route(task, hierarchy: TaskHierarchy, inner_lr, steps) -> RouteResult:
    """Descend the chain until a leaf claims the task.

    A score at or above a node's threshold selects that node's easy model; a
    lower score moves to the child, or to the deepest hard model at the end.
    Non-finite scores count as hard.
    """
    node = hierarchy.root
    while True:
        score = _routing_score(node.layer_model, task, inner_lr, steps,
                               hierarchy.route_on)
        if np.isfinite(score) and score >= node.gamma:
            return RouteResult(node.easy_model, node.layer, EASY, score)
        if node.child is None:
            return RouteResult(node.hard_model, node.layer, HARD, score)
        node = node.child


@dataclass
class RoutedTaskRecord:
    """Everything the report writers need about one evaluated task."""

    task_id: int
    lat: float
    lon: float
    layer: int
    leaf: str
    routing_r2: float
    r2: float
    mse: float
    predictions: np.ndarray
    labels: np.ndarray
    years: np.ndarray
    failed: bool = False


def evaluate_routed_task(task, hierarchy, inner_lr, steps) -> RoutedTaskRecord:
    from .metalearn import adapt
    from .errors import DivergenceError, NonFiniteError
    from .net import mse_loss

    decision = route(task, hierarchy, inner_lr, steps)
    labels = task.query_labels()
    try:
        adapted = adapt(decision.model, task.support, inner_lr, steps)
        preds = decision.model.predict(adapted.params, task.query_features())
        r2 = r_squared(labels, preds)
        mse = mse_loss(preds, labels)
        failed = False
    except (DivergenceError, NonFiniteError):
        preds = np.full(len(labels), np.nan)
        r2, mse, failed = float("-inf"), float("inf"), True
    return RoutedTaskRecord(
        task.task_id, task.location[0], task.location[1], decision.layer,
        decision.leaf, decision.routing_r2, r2, mse, preds, labels,
        task.query.years.copy(), failed,
    )


def evaluate_adaptive(test, hierarchy: TaskHierarchy, cfg: HierarchyConfig,
                      workers=1):
    """Route and score every task; records come back in task-id order."""
    meta = cfg.meta
    tasks = list(test)
    if workers <= 1 or len(tasks) <= 1:
        return [
            evaluate_routed_task(t, hierarchy, meta.inner_lr, meta.adaptation_steps)
            for t in tasks
        ]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(
            lambda t: evaluate_routed_task(t, hierarchy, meta.inner_lr,
                                           meta.adaptation_steps),
            tasks,
        ))


# -- hierarchy file round trip -------------------------------------------------

HIERARCHY_FORMAT_VERSION = 1


def save_hierarchy(hierarchy: TaskHierarchy, path, data_hash=None):
    nodes = []
    for node in hierarchy.nodes():
        entry = {
            "layer": node.layer,
            "gamma": node.gamma,
            "layer_model": model_to_dict(node.layer_model),
            "easy_model": model_to_dict(node.easy_model),
            "easy_ids": sorted(node.easy_ids),
            "hard_ids": sorted(node.hard_ids),
        }
        if node.hard_model is not None:
            entry["hard_model"] = model_to_dict(node.hard_model)
        nodes.append(entry)
    payload = {
        "format_version": HIERARCHY_FORMAT_VERSION,
        "kind": "task-hierarchy",
        "route_on": hierarchy.route_on,
        "data_hash": data_hash,
        "initial_model": model_to_dict(hierarchy.initial_model),
        "nodes": nodes,
        "threshold_log": [list(row) for row in hierarchy.threshold_log],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_hierarchy(path):
    """Returns ``(hierarchy, data_hash)``; raises FormatError on corruption."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable hierarchy file {path}: {exc}") from exc
    if payload.get("kind") != "task-hierarchy":
        raise FormatError(f"{path} is not a hierarchy file")
    if payload.get("format_version") != HIERARCHY_FORMAT_VERSION:
        raise FormatError(
            f"unsupported hierarchy format version {payload.get('format_version')}"
        )
    try:
        nodes = []
        for entry in payload["nodes"]:
            nodes.append(SplitNode(
                layer=int(entry["layer"]),
                gamma=float(entry["gamma"]),
                layer_model=model_from_dict(entry["layer_model"]),
                easy_model=model_from_dict(entry["easy_model"]),
                easy_ids=set(entry["easy_ids"]),
                hard_ids=set(entry["hard_ids"]),
                hard_model=model_from_dict(entry["hard_model"])
                if "hard_model" in entry else None,
            ))
        for parent, child in zip(nodes, nodes[1:]):
            parent.child = child
        hierarchy = TaskHierarchy(
            initial_model=model_from_dict(payload["initial_model"]),
            root=nodes[0],
            threshold_log=[tuple(row) for row in payload["threshold_log"]],
            route_on=payload.get("route_on", "query"),
        )
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt hierarchy file {path}: {exc}") from exc
    hierarchy.validate()
    return hierarchy, payload.get("data_hash")
