"""Meta-learning core: per-task adaptation, first-order meta updates, metrics.

The outer update is the first-order approximation: the gradient of the query
loss evaluated at the adapted parameters is applied as if the adapted
parameters did not depend on the shared initialization. Inner adaptation is
plain full-batch gradient descent on the support set.

Models are treated as values; every function returns fresh instances and
leaves its arguments untouched. Per-task work inside a batch is independent;
results are reduced in ascending task-id order so outcomes do not depend on
any parallel schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, NonFiniteError
from .net import Architecture, PredictiveModel, mse_loss
from .optim import OptimizerState, optimizer_step


@dataclass(frozen=True)
class MetaConfig:
    """Hyper-parameters of the two-loop training protocol."""

    inner_lr: float = 0.01
    outer_lr: float = 0.001
    adaptation_steps: int = 1
    task_batch_size: int = 32
    outer_epochs: int = 30
    inner_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.adaptation_steps < 0:
            raise ValueError("adaptation_steps must be >= 0")


@dataclass
class AdaptResult:
    """Adapted parameters plus the support loss before and after."""

    params: np.ndarray
    loss_before: float
    loss_after: float
    steps: int


class StepError(RuntimeError):
    """Every task in a meta batch diverged."""


@dataclass
class TaskScore:
    task_id: int
    r2: float
    mse: float
    failed: bool = False


@dataclass
class MetaStepReport:
    query_mse: float
    query_r2_mean: float
    per_task: list = field(default_factory=list)  # (task_id, mse, r2)
    skipped: list = field(default_factory=list)


def _support_arrays(support):
    if hasattr(support, "features"):
        return support.features, support.labels
    feats, labels = support
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.float64)


def adapt(model, support, inner_lr, steps) -> AdaptResult:
    """Run ``steps`` full-batch gradient-descent updates on the support set.

    With ``inner_lr`` 0 or ``steps`` 0 the returned parameters equal the
    model's bit for bit. A non-finite loss raises DivergenceError carrying
    the step index.
    """
    feats, labels = _support_arrays(support)
    if feats.shape[0] == 0:
        raise ValueError("support set must be non-empty")
    params = model.flatten()
    loss_before = None
    loss = None
    for step in range(steps):
        try:
            loss, grad, _ = model.loss_and_grad(params, feats, labels)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite support loss at step {step}",
                                  step=step) from exc
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite support loss at step {step}", step=step)
        if loss_before is None:
            loss_before = loss
        params = params - inner_lr * grad
    if loss_before is None:
        loss_before = mse_loss(model.predict(params, feats), labels)
        loss_after = loss_before
    else:
        loss_after = mse_loss(model.predict(params, feats), labels)
    return AdaptResult(params, loss_before, loss_after, steps)


def meta_step(model, task_batch, config: MetaConfig, optimizer_state: OptimizerState):
    """One outer update over a batch of tasks.

    Each task adapts on its support set, the query gradient is taken at the
    adapted parameters, and the mean of those gradients updates the shared
    parameters. Diverging tasks are skipped and reported; a batch with no
    surviving task raises StepError.

    Returns ``(new_model, new_state, report)``.
    """
    if len(task_batch) == 0:
        raise ValueError("task batch must be non-empty")
    tasks = sorted(task_batch, key=lambda t: t.task_id)
    base = model.flatten()
    grad_sum = np.zeros_like(base)
    report = MetaStepReport(query_mse=0.0, query_r2_mean=0.0)
    losses = []
    r2s = []
    for task in tasks:
        try:
            adapted = adapt(model, task.support, config.inner_lr,
                            config.adaptation_steps)
            q_feats = task.query_features()
            q_labels = task.query_labels()
            loss, grad, preds = model.loss_and_grad(adapted.params, q_feats, q_labels)
        except (DivergenceError, NonFiniteError):
            report.skipped.append(task.task_id)
            continue
        if not np.isfinite(loss):
            report.skipped.append(task.task_id)
            continue
        grad_sum += grad
        r2 = r_squared(q_labels, preds)
        losses.append(loss)
        r2s.append(r2)
        report.per_task.append((task.task_id, loss, r2))
    n_ok = len(losses)
    if n_ok == 0:
        raise StepError(f"all {len(tasks)} tasks in the batch diverged")
    outer_grad = grad_sum / n_ok
    new_params, new_state = optimizer_step(optimizer_state, base, outer_grad,
                                           config.outer_lr)
    report.query_mse = float(np.mean(losses))
    finite = [r for r in r2s if np.isfinite(r)]
    report.query_r2_mean = float(np.mean(finite)) if finite else float("-inf")
    return model.with_params(new_params), new_state, report


def default_model(descriptor, hidden_size=8, head_widths=(), seed=0):
    """Fresh seeded model matching a dataset descriptor."""
    arch = Architecture(
        input_size=descriptor.n_features,
        time_steps=descriptor.time_steps,
        hidden_size=hidden_size,
        head_widths=tuple(head_widths) or (hidden_size,),
    )
    return PredictiveModel.init(arch, np.random.default_rng(seed))


def train_origin_maml(train, config: MetaConfig, model=None):
    """Standard meta-training over shuffled task batches.

    Returns ``(model, log)`` where log rows are dicts with keys
    epoch, mean_query_mse, mean_query_r2, tasks_skipped, wall_ms.
    """
    init_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(2)
    if model is None:
        model = default_model(train.descriptor,
                              seed=init_ss.generate_state(1)[0])
    shuffle_rng = np.random.default_rng(shuffle_ss)
    state = OptimizerState.adam(model.n_params)
    tasks = list(train)
    log = []
    for epoch in range(config.outer_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(tasks))
        mses, r2s, skipped = [], [], 0
        for start in range(0, len(tasks), config.task_batch_size):
            batch = [tasks[i] for i in order[start:start + config.task_batch_size]]
            model, state, report = meta_step(model, batch, config, state)
            mses.extend(m for _, m, _ in report.per_task)
            r2s.extend(r for _, _, r in report.per_task if np.isfinite(r))
            skipped += len(report.skipped)
        log.append({
            "epoch": epoch + 1,
            "mean_query_mse": float(np.mean(mses)) if mses else float("nan"),
            "mean_query_r2": float(np.mean(r2s)) if r2s else float("-inf"),
            "tasks_skipped": skipped,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        })
    return model, log


def r_squared(labels, predictions) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot.

    Degenerate labels (zero total variance) give 1.0 on an exact match and
    -inf otherwise.
    """
    labels = np.asarray(labels, dtype=np.float64).ravel()
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    if labels.size != predictions.size:
        raise ValueError(
            f"length mismatch: {labels.size} labels vs {predictions.size} predictions"
        )
    if labels.size < 2:
        raise ValueError("r_squared needs at least 2 points")
    ss_res = float(np.sum((labels - predictions) ** 2))
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else float("-inf")
    return 1.0 - ss_res / ss_tot


def evaluate_task(model, task, inner_lr, steps) -> TaskScore:
    """Adapt on the support set, then score predictions on the query set.

    The model argument is left untouched. Divergence during adaptation is
    reported as a sentinel (-inf) score rather than raised.
    """
    try:
        adapted = adapt(model, task.support, inner_lr, steps)
        preds = model.predict(adapted.params, task.query_features())
    except (DivergenceError, NonFiniteError):
        return TaskScore(task.task_id, float("-inf"), float("inf"), failed=True)
    labels = task.query_labels()
    return TaskScore(
        task.task_id,
        r_squared(labels, preds),
        mse_loss(preds, labels),
        failed=False,
    )


def evaluate_tasks(model, tasks, inner_lr, steps, workers=1):
    """Score many tasks; results come back in the input order regardless of
    worker count."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [evaluate_task(model, t, inner_lr, steps) for t in tasks]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: evaluate_task(model, t, inner_lr, steps), tasks))
