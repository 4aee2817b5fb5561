"""Meta-training and meta-testing with a learnable geometric inner-update schedule.

Inner step ``j`` on the support set uses the step size ``alpha * gamma**j``.
The outer step moves the initial weights and, unless frozen, ``alpha`` and
``gamma`` along the gradient of the summed query losses, differentiating
through every inner step.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Tensor
from .models import Batch, ModelConfig, score_batch, task_loss
from .taskgen import EpisodeConfig, FineGrainedPool, Task, generate_task, sample_k, stack, task_rng

log = logging.getLogger(__name__)

MIN_AIU = 1e-8


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message)


@dataclass
class AIUParams:
    alpha: float = 0.001
    gamma: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 0):
            raise ValueError(f"alpha and gamma must be positive, got {self.alpha}, {self.gamma}")

    def step_size(self, j: int) -> float:
        return self.alpha * self.gamma ** j


class Adam:
    """Adaptive-moment outer optimiser, available as an alternative to plain descent."""

    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            out[k] = values[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


@dataclass
class MetaLearner:
    config: ModelConfig
    theta: dict
    aiu: AIUParams = field(default_factory=AIUParams)
    beta: float = 1e-4
    u: int = 3
    meta_batch: int = 8
    second_order: bool = True
    learn_aiu: bool = True
    optimizer: str = "sgd"
    loss_fn: Callable | None = None  # (weights, batch) -> scalar Tensor; default task_loss
    _adam: Adam | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    def loss(self, weights, batch: Batch) -> Tensor:
        if self.loss_fn is not None:
            return self.loss_fn(weights, batch)
        return task_loss(weights, batch, self.config)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.theta.items()}


@dataclass
class InnerResult:
    weights: dict
    step_sizes: list
    support_losses: list
    query_losses: list = field(default_factory=list)


def _finite(value: float, what: str, step: int | None = None):
    if not np.isfinite(value):
        where = f" at inner step {step}" if step is not None else ""
        raise DivergenceError(f"non-finite {what}{where}: {value}", step)


def inner_update(
    learner: MetaLearner,
    support: Batch,
    u: int | None = None,
    differentiable: bool = False,
    alpha: Tensor | None = None,
    gamma: Tensor | None = None,
    theta: Mapping[str, Tensor] | None = None,
    query: Batch | None = None,
) -> InnerResult:
    """``u`` full-batch descent steps on the support loss from ``theta``.

    The step at index ``j`` is ``alpha * gamma**j``. With ``differentiable``
    the returned weights stay on the graph of ``theta``, ``alpha`` and
    ``gamma``; the inner gradients are themselves differentiated only when
    ``learner.second_order`` holds. Otherwise every step is taken on detached
    copies and the learner's weights are left untouched. Passing ``query``
    records the query loss after every step, for diagnostics only.
    """
    u = learner.u if u is None else u
    if u < 0:
        raise ValueError(f"u must be >= 0, got {u}")
    if len(support) == 0:
        raise ValueError("inner_update needs a non-empty support set")
    theta = learner.theta if theta is None else theta
    alpha = Tensor(learner.aiu.alpha) if alpha is None else alpha
    gamma = Tensor(learner.aiu.gamma) if gamma is None else gamma
    step_sizes, losses, query_losses = [], [], []

    def probe(weights):
        if query is not None:
            with ad.no_grad():
                query_losses.append(learner.loss(weights, query).item())

    if not differentiable:
        weights = {k: Tensor(t.data, requires_grad=True) for k, t in theta.items()}
        for j in range(u):
            loss = learner.loss(weights, support)
            _finite(loss.item(), "support loss", j)
            g = ad.grad(loss, weights)
            lr = float(alpha.data) * float(gamma.data) ** j
            weights = {k: Tensor(w.data - lr * g[k].data, requires_grad=True) for k, w in weights.items()}
            step_sizes.append(lr)
            losses.append(loss.item())
            probe(weights)
        return InnerResult(weights, step_sizes, losses, query_losses)

    weights = dict(theta)
    for j in range(u):
        loss = learner.loss(weights, support)
        _finite(loss.item(), "support loss", j)
        g = ad.grad(loss, weights, create_graph=learner.second_order)
        lr = alpha * ad.power(gamma, j)
        weights = {k: w - lr * g[k] for k, w in weights.items()}
        step_sizes.append(float(lr.data))
        losses.append(loss.item())
        probe(weights)
    return InnerResult(weights, step_sizes, losses, query_losses)


@dataclass
class StepResult:
    query_losses: list
    grads: dict
    step_sizes: list
    intermediate: list = field(default_factory=list)


def meta_gradient(learner: MetaLearner, tasks: Sequence[Task], record_intermediate: bool = False) -> StepResult:
    """Gradient of the summed query losses w.r.t. theta, alpha and gamma.

    Per-task gradients are computed independently and summed, which equals the
    gradient of the sum. With ``record_intermediate`` each task also reports
    the query loss after every inner step (diagnostics only).
    """
    total: dict[str, np.ndarray] = {}
    losses, sizes, intermediate = [], [], []
    for task in tasks:
        theta = {k: Tensor(t.data, requires_grad=True) for k, t in learner.theta.items()}
        alpha = Tensor(learner.aiu.alpha, requires_grad=True)
        gamma = Tensor(learner.aiu.gamma, requires_grad=True)
        res = inner_update(learner, task.support_batch(), differentiable=True, alpha=alpha, gamma=gamma,
                           theta=theta, query=task.query_batch() if record_intermediate else None)
        query_loss = learner.loss(res.weights, task.query_batch())
        _finite(query_loss.item(), "query loss")
        wrt = dict(theta)
        wrt["__alpha__"], wrt["__gamma__"] = alpha, gamma
        g = ad.grad(query_loss, wrt, allow_unused=True)
        for k, v in g.items():
            total[k] = total[k] + v.data if k in total else v.data.copy()
        losses.append(query_loss.item())
        sizes.append(res.step_sizes)
        intermediate.append(res.query_losses)
    return StepResult(losses, total, sizes, intermediate)


def meta_train_step(learner: MetaLearner, tasks: Sequence[Task]) -> StepResult:
    """One outer update of (theta, alpha, gamma) from a batch of tasks."""
    if len(tasks) != learner.meta_batch:
        raise ValueError(f"expected {learner.meta_batch} tasks, got {len(tasks)}")
    if learner.u < 1:
        raise ValueError("meta-training needs u >= 1")
    res = meta_gradient(learner, tasks)
    grads = dict(res.grads)
    if not learner.learn_aiu:
        grads.pop("__alpha__")
        grads.pop("__gamma__")
    values = learner.snapshot()
    values["__alpha__"] = np.float64(learner.aiu.alpha)
    values["__gamma__"] = np.float64(learner.aiu.gamma)
    if learner.optimizer == "adam":
        if learner._adam is None:
            learner._adam = Adam(learner.beta)
        new = learner._adam.step(values, grads)
    else:
        new = {k: values[k] - learner.beta * g for k, g in grads.items()}
    for k, t in learner.theta.items():
        learner.theta[k] = Tensor(new[k], requires_grad=True)
    if learner.learn_aiu:
        learner.aiu = AIUParams(max(float(new["__alpha__"]), MIN_AIU), max(float(new["__gamma__"]), MIN_AIU))
    return res


def pretrain(
    learner: MetaLearner,
    pool: FineGrainedPool,
    epochs: int,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
    optimizer: str = "adam",
) -> list[float]:
    """Conventional supervised training on every sample of ``pool``.

    Updates ``learner.theta`` in place and returns the mean loss per epoch.
    """
    samples = pool.samples()
    if not samples:
        raise ValueError("pretraining pool is empty")
    return supervised_train(learner.theta, learner.config, samples, epochs, lr, batch_size, seed, optimizer)


def supervised_train(theta, config, samples, epochs, lr=0.01, batch_size=32, seed=0, optimizer="adam") -> list[float]:
    rng = np.random.default_rng([seed, 7919])
    opt = Adam(lr) if optimizer == "adam" else None
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = stack([samples[i] for i in order[start:start + batch_size]])
            loss = task_loss(theta, batch, config)
            _finite(loss.item(), "pretraining loss")
            g = ad.grad(loss, theta)
            values = {k: t.data for k, t in theta.items()}
            grads = {k: v.data for k, v in g.items()}
            new = opt.step(values, grads) if opt else {k: values[k] - lr * grads[k] for k in values}
            for k in theta:
                theta[k] = Tensor(new[k], requires_grad=True)
            epoch_losses.append(loss.item() * len(batch))
        history.append(sum(epoch_losses) / len(samples))
    return history


def pool_loss(theta, config, samples, batch_size=64) -> float:
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = stack(samples[start:start + batch_size])
            total += task_loss(theta, batch, config).item() * len(batch)
    return total / len(samples)


def evaluate_task(theta, config: ModelConfig, task: Task) -> metrics.TaskMetrics:
    """Score a task's query with ``theta``; the threshold comes from the support."""
    s, q = task.support_batch(), task.query_batch()
    support_scores = score_batch(theta, s.images, config)
    threshold = metrics.select_threshold(support_scores, s.live)
    query_scores = score_batch(theta, q.images, config)
    apcer, bpcer, acer = metrics.classify(query_scores, q.live, threshold)
    return metrics.TaskMetrics(apcer, bpcer, acer, metrics.auc(query_scores, q.live), threshold, task.K)


def _run_tasks(fn: Callable[[Task], metrics.TaskMetrics], tasks, workers: int):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def meta_test(learner: MetaLearner, tasks: Sequence[Task], u: int | None = None, workers: int = 1, label: str = "aim-fas") -> metrics.EvalReport:
    """Adapt on each task's support for ``u`` steps, then score its query."""
    if not tasks:
        raise ValueError("meta_test needs at least one task")

    def run(task):
        res = inner_update(learner, task.support_batch(), u=u)
        return evaluate_task(res.weights, learner.config, task)

    per_task = _run_tasks(run, tasks, workers)
    return metrics.EvalReport.from_tasks(per_task, label, u=learner.u if u is None else u,
                                         alpha=f"{learner.aiu.alpha:.6g}", gamma=f"{learner.aiu.gamma:.6g}")


def baseline_finetune_eval(
    theta: Mapping[str, Tensor],
    config: ModelConfig,
    tasks: Sequence[Task],
    finetune_steps: int = 10,
    lr: float = 0.001,
    workers: int = 1,
    label: str = "baseline",
) -> metrics.EvalReport:
    """Compared-method protocol: evaluate zero-shot tasks as trained, fine-tune on the support otherwise.

    Fine-tuning is ``finetune_steps`` full-batch descent steps at fixed ``lr``
    on a copy of the weights, so every task starts from the same model.
    """
    if not tasks:
        raise ValueError("baseline evaluation needs at least one task")
    frozen = MetaLearner(config, dict(theta), AIUParams(lr, 1.0), u=finetune_steps)

    def run(task):
        if task.K == 0:
            weights = frozen.theta
        else:
            weights = inner_update(frozen, task.support_batch()).weights
        return evaluate_task(weights, config, task)

    per_task = _run_tasks(run, tasks, workers)
    return metrics.EvalReport.from_tasks(per_task, label, finetune_steps=finetune_steps, lr=lr)


@dataclass
class TrainRunState:
    seed: int
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    alpha_history: list = field(default_factory=list)
    gamma_history: list = field(default_factory=list)
    k_history: list = field(default_factory=list)
    checkpoint_every: int = 0

    def record(self, loss, alpha, gamma, ks):
        self.iteration += 1
        self.loss_history.append(float(loss))
        self.alpha_history.append(float(alpha))
        self.gamma_history.append(float(gamma))
        self.k_history.append(list(ks))

    def log_line(self) -> str:
        i = self.iteration
        return f"{i}\t{self.loss_history[-1]:.8f}\t{self.alpha_history[-1]:.8g}\t{self.gamma_history[-1]:.8g}"


LOG_HEADER = "iteration\tquery_loss\talpha\tgamma"


def sample_training_tasks(pool: FineGrainedPool, episode: EpisodeConfig, seed: int, iteration: int, count: int) -> list[Task]:
    tasks = []
    for i in range(count):
        rng = task_rng(seed, 1, iteration, i)
        K = sample_k(episode, rng)
        tasks.append(generate_task(pool, pool, K, episode, rng))
    return tasks


def meta_train(
    learner: MetaLearner,
    train_pool: FineGrainedPool,
    episode: EpisodeConfig,
    iterations: int,
    seed: int = 0,
    log_fn: Callable[[str], None] | None = None,
    checkpoint_fn: Callable[[TrainRunState], None] | None = None,
    checkpoint_every: int = 0,
) -> TrainRunState:
    """Outer loop: each iteration draws ``meta_batch`` training tasks, K from the menu."""
    state = TrainRunState(seed, checkpoint_every=checkpoint_every)
    if log_fn:
        log_fn(LOG_HEADER)
    for it in range(iterations):
        tasks = sample_training_tasks(train_pool, episode, seed, it, learner.meta_batch)
        try:
            res = meta_train_step(learner, tasks)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc}", exc.step) from exc
        state.record(np.mean(res.query_losses), learner.aiu.alpha, learner.aiu.gamma, [t.K for t in tasks])
        if log_fn:
            log_fn(state.log_line())
        if checkpoint_fn and checkpoint_every and state.iteration % checkpoint_every == 0:
            checkpoint_fn(state)
    return state
