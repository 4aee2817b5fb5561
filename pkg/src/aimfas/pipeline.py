"""Train / evaluate / verify pipelines driven by a :class:`RunConfig`.

The command-line interface is a thin layer over these functions, and the
experiment helpers reuse them, so both follow exactly the same code path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable


from . import autodiff as ad
from . import metalearner as ml
from . import metrics
from .autodiff import Tensor
from .config import RunConfig
from .models import Checkpoint, ConfigError, build_model, count_parameters, save_checkpoint, task_loss
from .taskgen import FineGrainedPool, check_disjoint, generate_synthetic_benchmark, generate_tasks, load_manifest

log = logging.getLogger(__name__)

MAX_GRADCHECK_PARAMS = 100


def load_pools(cfg: RunConfig) -> dict[str, FineGrainedPool]:
    if cfg.data.manifest:
        return load_manifest(cfg.data.manifest, cfg.model.input_side, cfg.model.depth_side)
    pools = generate_synthetic_benchmark(cfg.data.synthetic)
    check_disjoint(list(pools.values()))
    return pools


def make_learner(cfg: RunConfig, theta=None, alpha=None, gamma=None) -> ml.MetaLearner:
    m = cfg.meta
    theta = build_model(cfg.model, cfg.seed) if theta is None else theta
    aiu = ml.AIUParams(m.alpha if alpha is None else alpha, m.gamma if gamma is None else gamma)
    return ml.MetaLearner(
        cfg.model,
        theta,
        aiu,
        beta=m.beta,
        u=m.u,
        meta_batch=m.meta_batch,
        second_order=not cfg.ablation.first_order,
        learn_aiu=not cfg.ablation.without_aiu,
        optimizer=m.optimizer,
    )


@dataclass
class TrainResult:
    learner: ml.MetaLearner
    checkpoint: Checkpoint
    state: ml.TrainRunState | None = None
    pretrain_losses: list = field(default_factory=list)


def _checkpoint(cfg: RunConfig, learner: ml.MetaLearner, iteration: int) -> Checkpoint:
    extra = {"train_mode": cfg.train_mode, "iteration": iteration, "u": cfg.meta.u, "run": cfg.to_dict()}
    return Checkpoint(cfg.model, cfg.seed, dict(learner.theta), learner.aiu.alpha, learner.aiu.gamma, extra)


def train(
    cfg: RunConfig,
    pools: dict[str, FineGrainedPool] | None = None,
    log_fn: Callable[[str], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Pre-train then fusion meta-train, or train the conventional baseline.

    With ``checkpoint_dir`` set, periodic checkpoints (``meta.checkpoint_every``)
    are written as ``checkpoint-<iteration>.npz``.
    """
    cfg.validate()
    pools = load_pools(cfg) if pools is None else pools
    learner = make_learner(cfg)
    train_pool = pools["train"]
    if cfg.train_mode == "baseline":
        b = cfg.baseline
        losses = ml.supervised_train(learner.theta, cfg.model, train_pool.samples(), b.epochs, b.lr, seed=cfg.seed)
        return TrainResult(learner, _checkpoint(cfg, learner, 0), None, losses)

    losses = ml.pretrain(learner, train_pool, cfg.meta.pretrain_epochs, lr=cfg.meta.pretrain_lr, seed=cfg.seed)

    def on_checkpoint(state):
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"checkpoint-{state.iteration}.npz"
            save_checkpoint(path, _checkpoint(cfg, learner, state.iteration))

    state = ml.meta_train(
        learner,
        train_pool,
        cfg.episode_config(),
        cfg.meta.iterations,
        seed=cfg.seed,
        log_fn=log_fn,
        checkpoint_fn=on_checkpoint,
        checkpoint_every=cfg.meta.checkpoint_every,
    )
    return TrainResult(learner, _checkpoint(cfg, learner, state.iteration), state, losses)


def evaluation_tasks(cfg: RunConfig, pools: dict[str, FineGrainedPool], K: int | None = None):
    """T evaluation tasks: predefined categories from train, novel ones from ``eval.split``.

    The task stream does not depend on K, so the K-shot tasks reuse the same
    category pairs for every K and differences between shot counts are not
    confounded by which categories were drawn.
    """
    K = cfg.eval.K if K is None else K
    return generate_tasks(pools["train"], pools[cfg.eval.split], K, cfg.episode_config(), seed=cfg.eval.task_seed, count=cfg.eval.T)


def evaluate(cfg: RunConfig, checkpoint: Checkpoint, pools=None, K: int | None = None, tasks=None) -> metrics.EvalReport:
    """Meta-test the checkpoint, or run the fine-tune protocol when ``eval.mode`` is baseline."""
    problems = cfg.problems()
    if checkpoint.config != cfg.model:
        problems.append("checkpoint model config differs from the run's model config")
    if problems:
        raise ConfigError(problems)
    pools = load_pools(cfg) if pools is None and tasks is None else pools
    tasks = evaluation_tasks(cfg, pools, K) if tasks is None else tasks
    K = tasks[0].K
    if cfg.eval.mode == "baseline":
        b = cfg.baseline
        report = ml.baseline_finetune_eval(checkpoint.params, cfg.model, tasks, b.finetune_steps, b.finetune_lr,
                                           workers=cfg.workers)
    else:
        learner = make_learner(cfg, checkpoint.params, checkpoint.alpha, checkpoint.gamma)
        u = cfg.eval.u if cfg.eval.u is not None else int(checkpoint.extra.get("u", cfg.meta.u))
        report = ml.meta_test(learner, tasks, u=u, workers=cfg.workers)
    report.meta.update(K=K, seed=cfg.seed, task_seed=cfg.eval.task_seed, split=cfg.eval.split, mode=cfg.eval.mode)
    return report


# -- verification ---------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "skipped"
    detail: str = ""

    def line(self) -> str:
        return f"{self.status.upper():7s} {self.name}" + (f": {self.detail}" if self.detail else "")


def _adapted_query_loss(learner, task, weights, alpha, gamma, u):
    """Query loss after ``u`` plain inner steps from ``weights`` (finite-difference oracle)."""
    with ad.set_grad_enabled(True):
        res = ml.inner_update(learner, task.support_batch(), u=u, alpha=alpha, gamma=gamma, theta=weights)
        with ad.no_grad():
            return learner.loss(res.weights, task.query_batch())


def meta_gradient_check(learner, task, rtol=1e-3, atol=1e-6):
    """Outer gradient vs central differences of the adapted query loss. Returns (ok, worst, computed, numeric)."""
    computed = ml.meta_gradient(learner, [task]).grads
    wrt = {k: Tensor(t.data, requires_grad=True) for k, t in learner.theta.items()}
    wrt["__alpha__"] = Tensor(learner.aiu.alpha, requires_grad=True)
    wrt["__gamma__"] = Tensor(learner.aiu.gamma, requires_grad=True)

    def fn(ws):
        theta = {k: v for k, v in ws.items() if not k.startswith("__")}
        return _adapted_query_loss(learner, task, theta, ws["__alpha__"], ws["__gamma__"], learner.u)

    numeric = ad.finite_difference_gradient(fn, wrt)
    ok, worst = ad.gradients_close(computed, numeric, rtol, atol)
    return ok, worst, computed, numeric


def first_order_check(learner, task, rtol=1e-3, atol=1e-6):
    """Under first-order semantics the theta gradient is the query gradient at the adapted weights."""
    computed = ml.meta_gradient(learner, [task]).grads
    adapted = ml.inner_update(learner, task.support_batch()).weights
    numeric = ad.finite_difference_gradient(lambda ws: learner.loss(ws, task.query_batch()), adapted)
    theta_part = {k: v for k, v in computed.items() if not k.startswith("__")}
    return ad.gradients_close(theta_part, numeric, rtol, atol)


def schedule_check(learner, task, u=5) -> tuple[bool, list, list]:
    alpha = Tensor(learner.aiu.alpha, requires_grad=True)
    gamma = Tensor(learner.aiu.gamma, requires_grad=True)
    theta = {k: Tensor(t.data, requires_grad=True) for k, t in learner.theta.items()}
    res = ml.inner_update(learner, task.support_batch(), u=u, differentiable=True, alpha=alpha, gamma=gamma, theta=theta)
    expected = [learner.aiu.alpha * learner.aiu.gamma ** j for j in range(u)]
    return res.step_sizes == expected, res.step_sizes, expected


def gradcheck(cfg: RunConfig, pools=None) -> list[CheckResult]:
    """Run the finite-difference and schedule oracles on a small model."""
    cfg.validate()
    pools = load_pools(cfg) if pools is None else pools
    learner = make_learner(cfg)
    n = count_parameters(learner.theta)
    if n > MAX_GRADCHECK_PARAMS:
        return [CheckResult("model size", "fail", f"{n} parameters, finite differences need <= {MAX_GRADCHECK_PARAMS}")]
    rng_task = generate_tasks(pools["train"], pools["train"], max(cfg.episode.k_menu), cfg.episode_config(), cfg.seed, 1)[0]
    results = []

    # plain support-loss gradient: covers every primitive of the network
    batch = rng_task.support_batch()
    analytic = ad.grad(task_loss(learner.theta, batch, cfg.model), learner.theta)
    numeric = ad.finite_difference_gradient(lambda ws: task_loss(ws, batch, cfg.model), learner.theta)
    ok, worst = ad.gradients_close(analytic, numeric, 1e-4, 1e-6)
    results.append(CheckResult(f"support-loss gradient ({n} params)", "pass" if ok else "fail", f"worst mismatch {worst:.3g}"))

    ok, sizes, _ = schedule_check(learner, rng_task)
    results.append(CheckResult("inner step sizes equal alpha*gamma^j (u=5)", "pass" if ok else "fail",
                               " ".join(f"{s:.6g}" for s in sizes)))

    one = replace(cfg, meta=replace(cfg.meta, u=1))
    g1 = ml.meta_gradient(make_learner(one), [rng_task]).grads["__gamma__"]
    results.append(CheckResult("gamma gradient at u=1", "pass" if float(g1) == 0.0 else "fail", f"{float(g1):.17g}"))

    if cfg.ablation.first_order:
        ok, worst = first_order_check(learner, rng_task)
        results.append(CheckResult(f"first-order theta gradient (u={learner.u})", "pass" if ok else "fail",
                                   f"worst mismatch {worst:.3g}"))
        results.append(CheckResult("second-order meta-gradient", "skipped", "first_order flag set"))
    else:
        ok, worst, computed, num = meta_gradient_check(learner, rng_task)
        detail = (f"worst mismatch {worst:.3g}; d/dalpha {float(computed['__alpha__']):.6g} vs {float(num['__alpha__']):.6g}; "
                  f"d/dgamma {float(computed['__gamma__']):.6g} vs {float(num['__gamma__']):.6g}")
        results.append(CheckResult(f"second-order meta-gradient (u={learner.u})", "pass" if ok else "fail", detail))
    return results
