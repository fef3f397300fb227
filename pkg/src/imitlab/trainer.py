"""Optimization loops for every objective.

The first ``warmup_mle_steps`` steps always optimize the likelihood; the
configured objective takes over afterwards. Randomness comes from named,
independent streams so that, e.g., evaluation frequency never perturbs the
training trajectory.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .core import OptimizerState, Tensor, backward, optimizer_step
from .envs import SyntheticTask, Trajectory
from .objectives import (IqlConfig, LossOutput, Rollout, entropy_regularized_mle_loss,
                         gail_discriminator_loss, gail_policy_loss, gail_rewards,
                         iqlearn_offline_loss, iqlearn_online_loss, mle_loss)
from .policy import PolicyModel, SamplerConfig, SeqNet, sample_batch, scalar_net_like


STREAMS = ("init", "data", "rollout", "eval", "gail")
DISC_SATURATION_STEPS = 500


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, decomposition: dict):
        self.step = step
        self.decomposition = decomposition
        super().__init__(f"non-finite loss at step {step}: {json.dumps(decomposition)}")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: np.random.default_rng([seed, i]) for i, name in enumerate(STREAMS)}


def eval_rng(seed: int, step: int) -> np.random.Generator:
    """Fresh generator per evaluation point; never shared with training."""
    return np.random.default_rng([seed, STREAMS.index("eval"), step])


def make_optimizer(cfg: ExperimentConfig) -> OptimizerState:
    return OptimizerState(base_rate=cfg.learning_rate, warmup_steps=cfg.lr_warmup_steps,
                          weight_decay=cfg.weight_decay)


def iql_config(cfg: ExperimentConfig) -> IqlConfig:
    return IqlConfig(lam=cfg.lam, gamma=cfg.gamma, alpha=cfg.alpha)


def apply_gradients(loss: Tensor, params: dict[str, Tensor], opt: OptimizerState) -> None:
    grads = backward(loss)
    by_name = {name: grads[p] for name, p in params.items() if p in grads}
    optimizer_step(params, by_name, opt)


# ------------------------------------------------------------- rollouts

@dataclass
class RolloutBuffer:
    """Policy samples tagged with the step whose parameters produced them."""

    capacity: int = 1024
    staleness_bound: int = 0
    current_step: int = 0
    items: list[tuple[int, Trajectory]] = field(default_factory=list)

    def add(self, trajectories: Sequence[Trajectory], step: int) -> None:
        self.current_step = max(self.current_step, step)
        self.items.extend((step, t) for t in trajectories)
        self._prune()
        if len(self.items) > self.capacity:
            self.items = self.items[-self.capacity:]

    def _prune(self) -> None:
        self.items = [(s, t) for s, t in self.items
                      if self.current_step - s <= self.staleness_bound]

    def advance(self, step: int) -> None:
        self.current_step = max(self.current_step, step)
        self._prune()

    def fresh(self) -> list[Trajectory]:
        self._prune()
        return [t for _, t in self.items]

    def __len__(self) -> int:
        return len(self.fresh())


def online_count(alpha: float, batch_size: int, rng: np.random.Generator) -> int:
    """Stochastic rounding of ``alpha * batch_size``; at least one when ``alpha > 0``."""
    if alpha == 0:
        return 0
    x = alpha * batch_size
    n = int(math.floor(x)) + int(rng.random() < x - math.floor(x))
    return min(max(n, 1), batch_size - 1)


def assemble_online_batch(dataset: Sequence[Trajectory], buffer: RolloutBuffer | None,
                          alpha: float, batch_size: int, rng: np.random.Generator
                          ) -> tuple[list[Trajectory], list[Trajectory]]:
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if not dataset:
        raise ValueError("empty dataset")
    if batch_size < 2 and alpha > 0:
        raise ValueError("mixing needs batch_size >= 2")
    pool = buffer.fresh() if buffer is not None else []
    if alpha > 0 and not pool:
        raise RuntimeError("rollout buffer is empty: generate policy rollouts before "
                           "assembling a mixed batch (alpha > 0)")
    n_online = online_count(alpha, batch_size, rng)
    idx = rng.integers(len(dataset), size=batch_size - n_online)
    expert = [dataset[i] for i in idx]
    if n_online == 0:
        return expert, []
    pick = rng.choice(len(pool), size=n_online, replace=len(pool) < n_online)
    return expert, [pool[i] for i in pick]


def rollout_max_len(cfg: ExperimentConfig, model: SeqNet, prompts: Sequence[Sequence[int]]) -> int:
    room = model.max_context - max(len(p) for p in prompts)
    if room < 1:
        raise ValueError("prompt fills the model context; nothing left to generate")
    return min(cfg.max_completion, room)


def generate_rollouts(model: PolicyModel, prompts: Sequence[Sequence[int]], cfg: ExperimentConfig,
                      rng: np.random.Generator) -> list[Trajectory]:
    scfg = SamplerConfig(temperature=cfg.rollout_temperature,
                         max_len=rollout_max_len(cfg, model, prompts))
    return sample_batch(model, prompts, scfg, rng)


# ------------------------------------------------------------------ GAIL

def kl_weight_at(k: int, kl_weight_final: float, anneal_steps: int) -> float:
    """Linear ramp from 0 to ``kl_weight_final`` over ``anneal_steps``, then flat."""
    if anneal_steps <= 0:
        return kl_weight_final
    return kl_weight_final * min(1.0, k / anneal_steps)


@dataclass
class GailModels:
    policy: PolicyModel
    value: SeqNet
    disc: SeqNet
    initial: PolicyModel
    policy_opt: OptimizerState
    disc_opt: OptimizerState
    disc_updates: int = 0
    gail_steps: int = 0
    saturated_run: int = 0
    warned: bool = False

    @classmethod
    def start(cls, policy: PolicyModel, cfg: ExperimentConfig, policy_opt: OptimizerState,
              seed: int) -> "GailModels":
        return cls(policy=policy, value=scalar_net_like(policy, seed=seed + 1),
                   disc=scalar_net_like(policy, seed=seed + 2), initial=policy.clone(),
                   policy_opt=policy_opt, disc_opt=make_optimizer(cfg))

    def joint_params(self) -> dict[str, Tensor]:
        params = dict(self.policy.params)
        params.update({f"value/{k}": v for k, v in self.value.params.items()})
        return params


def _disc_accuracy(disc: SeqNet, expert: Sequence[Trajectory], policy: Sequence[Trajectory]) -> float:
    from .objectives import discriminator_logits
    from .core import no_grad
    with no_grad():
        de = discriminator_logits(disc, expert).data
        dp = discriminator_logits(disc, policy).data
    return float((np.sum(de > 0) + np.sum(dp < 0)) / (len(de) + len(dp)))


def gail_train_step(models: GailModels, cfg: ExperimentConfig, step: int,
                    expert_batch: Sequence[Trajectory], buffer: RolloutBuffer,
                    rng: np.random.Generator) -> LossOutput:
    """One policy/value update on fresh rollouts, then one discriminator update."""
    models.gail_steps += 1
    prompts = [t.prompt for t in expert_batch]
    fresh = generate_rollouts(models.policy, prompts, cfg, rng)
    buffer.add(fresh, step)
    rollouts_t = [t for t in buffer.fresh() if t.completion]
    if not rollouts_t:
        raise RuntimeError("no non-empty rollouts to train on")
    rewards = gail_rewards(models.disc, rollouts_t)
    rollouts = [Rollout(t, r) for t, r in zip(rollouts_t, rewards)]
    kl_w = kl_weight_at(models.gail_steps, cfg.kl_weight_final, cfg.anneal_steps)
    out = gail_policy_loss(rollouts, models.value, models.disc, kl_w, cfg.mle_weight,
                           models.initial, models.policy, expert_batch, gamma=cfg.gamma)
    _check_finite(out, step)
    apply_gradients(out.loss, models.joint_params(), models.policy_opt)

    d_loss = gail_discriminator_loss(expert_batch, rollouts_t, models.disc)
    apply_gradients(d_loss, models.disc.params, models.disc_opt)
    models.disc_updates += 1

    acc = _disc_accuracy(models.disc, expert_batch, rollouts_t)
    models.saturated_run = models.saturated_run + 1 if acc == 1.0 else 0
    if models.saturated_run >= DISC_SATURATION_STEPS and not models.warned:
        warnings.warn(f"discriminator accuracy has been 1.0 for {models.saturated_run} "
                      "consecutive steps (possible mode collapse)", RuntimeWarning)
        models.warned = True
    out.extras.update(disc_loss=float(d_loss.data), disc_accuracy=acc, kl_weight=kl_w)
    return out


# --------------------------------------------------------------- history

HISTORY_COLUMNS = ("step", "objective", "loss_total", "loss_mle", "loss_td", "loss_entropy",
                   "val_accuracy", "self_bleu", "per_token_entropy")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False
    best_step: int | None = None

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("history records must be strictly increasing in step")
        self.records.append(dict(record))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: _fmt(r.get(k)) for k in HISTORY_COLUMNS})
        return buf.getvalue()

    def summary(self) -> dict:
        return {"records": self.records, "step_losses": self.step_losses,
                "stopped_early": self.stopped_early, "best_step": self.best_step}

    def write(self, out_dir: str) -> None:
        _atomic_write(os.path.join(out_dir, "history.csv"), self.to_csv())
        _atomic_write(os.path.join(out_dir, "history.json"),
                      json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_summary(cls, d: dict) -> "TrainHistory":
        return cls(list(d["records"]), list(d["step_losses"]), d["stopped_early"], d["best_step"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -------------------------------------------------------------- training

def _check_finite(out: LossOutput, step: int) -> None:
    if not math.isfinite(out.total):
        raise TrainingDiverged(step, out.as_dict())


OBJECTIVE_FNS: dict[str, Callable] = {
    "mle": lambda expert, online, model, cfg: mle_loss(expert, model),
    "mle-ent": lambda expert, online, model, cfg: entropy_regularized_mle_loss(expert, model, cfg.lam),
    "iql-offline": lambda expert, online, model, cfg: iqlearn_offline_loss(expert, model, iql_config(cfg)),
    "iql-online": lambda expert, online, model, cfg: iqlearn_online_loss(expert, online, model,
                                                                       iql_config(cfg)),
}


def objective_at(cfg: ExperimentConfig, step: int) -> str:
    """Objective used at 1-based ``step``: warm-up MLE first, then the configured one."""
    return "mle" if step <= cfg.warmup_mle_steps else cfg.objective


@dataclass
class _RunState:
    step: int
    opt: OptimizerState
    rngs: dict[str, np.random.Generator]
    history: TrainHistory
    best_acc: float = -math.inf
    best_params: dict | None = None
    evals_since_best: int = 0
    gail: GailModels | None = None


def _rng_states(rngs) -> dict:
    return {k: g.bit_generator.state for k, g in rngs.items()}


def _restore_rngs(states: dict) -> dict[str, np.random.Generator]:
    out = {}
    for k, st in states.items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        out[k] = g
    return out


def _save_run(out_dir: str, model: PolicyModel, cfg: ExperimentConfig, rs: _RunState) -> None:
    extra = {"config": cfg.to_dict(), "rng": _rng_states(rs.rngs), "history": rs.history.summary(),
             "best_acc": rs.best_acc if math.isfinite(rs.best_acc) else None,
             "evals_since_best": rs.evals_since_best}
    if rs.gail is not None:
        g = rs.gail
        extra["gail"] = {"disc_updates": g.disc_updates, "gail_steps": g.gail_steps,
                         "saturated_run": g.saturated_run, "warned": g.warned}
        save_checkpoint(os.path.join(out_dir, "gail_value.bin"),
                        Checkpoint(g.value, rs.step, cfg.seed))
        save_checkpoint(os.path.join(out_dir, "gail_disc.bin"),
                        Checkpoint(g.disc, rs.step, cfg.seed, g.disc_opt))
        save_checkpoint(os.path.join(out_dir, "gail_initial.bin"),
                        Checkpoint(g.initial, rs.step, cfg.seed))
    if rs.best_params is not None:
        best = model.clone()
        best.load_state_dict(rs.best_params)
        save_checkpoint(os.path.join(out_dir, "best.bin"), Checkpoint(best, rs.step, cfg.seed))
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"),
                    Checkpoint(model, rs.step, cfg.seed, rs.opt, extra))


def _load_run(out_dir: str, cfg: ExperimentConfig) -> tuple[PolicyModel, _RunState]:
    ck = load_checkpoint(os.path.join(out_dir, "checkpoint.bin"))
    extra = ck.extra
    rs = _RunState(step=ck.step, opt=ck.optimizer, rngs=_restore_rngs(extra["rng"]),
                   history=TrainHistory.from_summary(extra["history"]),
                   best_acc=-math.inf if extra["best_acc"] is None else extra["best_acc"],
                   evals_since_best=extra["evals_since_best"])
    model = ck.model
    if os.path.exists(os.path.join(out_dir, "best.bin")):
        rs.best_params = load_checkpoint(os.path.join(out_dir, "best.bin")).model.state_dict()
    if "gail" in extra:
        disc_ck = load_checkpoint(os.path.join(out_dir, "gail_disc.bin"))
        rs.gail = GailModels(policy=model,
                             value=load_checkpoint(os.path.join(out_dir, "gail_value.bin")).model,
                             disc=disc_ck.model,
                             initial=load_checkpoint(os.path.join(out_dir, "gail_initial.bin")).model,
                             policy_opt=rs.opt, disc_opt=disc_ck.optimizer, **extra["gail"])
    return model, rs


def _evaluate(model: PolicyModel, cfg: ExperimentConfig, task: SyntheticTask | None,
              val_prompts: Sequence[Sequence[int]] | None, step: int) -> dict:
    if task is None or not val_prompts:
        return {"val_accuracy": math.nan, "self_bleu": math.nan, "per_token_entropy": math.nan}
    from .evalsuite import evaluate_policy
    scfg = SamplerConfig(temperature=cfg.eval_temperature, mode=cfg.eval_mode,
                         max_len=rollout_max_len(cfg, model, val_prompts))
    rep = evaluate_policy(model, task, val_prompts[:cfg.eval_prompts], scfg,
                          cfg.eval_samples, eval_rng(cfg.seed, step))
    return {"val_accuracy": rep["accuracy"], "self_bleu": rep["self_bleu"],
            "per_token_entropy": rep["per_token_entropy"]}


def train(cfg: ExperimentConfig, dataset: Sequence[Trajectory], model: PolicyModel, *,
          task: SyntheticTask | None = None, val_prompts: Sequence[Sequence[int]] | None = None,
          out_dir: str | None = None, resume: bool = False,
          on_eval: Callable[[dict], None] | None = None) -> tuple[PolicyModel, TrainHistory]:
    """Train ``model`` in place for ``cfg.total_steps`` steps.

    With ``out_dir`` a checkpoint (and history) is written at every eval
    point; ``resume=True`` continues from the checkpoint found there.
    """
    cfg.validate()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    if resume:
        if out_dir is None:
            raise ValueError("resume needs out_dir")
        model, rs = _load_run(out_dir, cfg)
    else:
        rs = _RunState(step=0, opt=make_optimizer(cfg), rngs=make_streams(cfg.seed),
                       history=TrainHistory())
    buffer = RolloutBuffer(capacity=max(cfg.batch_size, 1) * 4, staleness_bound=cfg.staleness_bound)

    while rs.step < cfg.total_steps:
        step = rs.step + 1
        name = objective_at(cfg, step)
        buffer.advance(step)
        if name == "gail":
            if rs.gail is None:
                rs.gail = GailModels.start(model, cfg, rs.opt, cfg.seed)
            expert, _ = assemble_online_batch(dataset, None, 0.0, cfg.batch_size, rs.rngs["data"])
            out = gail_train_step(rs.gail, cfg, step, expert, buffer, rs.rngs["gail"])
        else:
            online_needed = name == "iql-online"
            if online_needed:
                n_roll = int(math.ceil(cfg.alpha * cfg.batch_size))
                pidx = rs.rngs["rollout"].integers(len(dataset), size=n_roll)
                prompts = [dataset[i].prompt for i in pidx]
                buffer.add(generate_rollouts(model, prompts, cfg, rs.rngs["rollout"]), step)
            expert, online = assemble_online_batch(
                dataset, buffer, cfg.alpha if online_needed else 0.0, cfg.batch_size,
                rs.rngs["data"])
            out = OBJECTIVE_FNS[name](expert, online, model, cfg)
            _check_finite(out, step)
            apply_gradients(out.loss, model.params, rs.opt)
        rs.history.step_losses.append(out.total)
        rs.step = step

        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            record = {"step": step, "objective": name, "loss_total": out.total,
                      "loss_mle": out.mle_term, "loss_td": out.td_term,
                      "loss_entropy": out.entropy_term}
            record.update(_evaluate(model, cfg, task, val_prompts, step))
            rs.history.append(record)
            if on_eval is not None:
                on_eval(record)
            stop = _early_stopping(cfg, rs, model, record)
            if out_dir is not None:
                _save_run(out_dir, model, cfg, rs)
                rs.history.write(out_dir)
            if stop:
                rs.history.stopped_early = True
                break

    if rs.history.stopped_early and rs.best_params is not None:
        model.load_state_dict(rs.best_params)
    return model, rs.history


def _early_stopping(cfg: ExperimentConfig, rs: _RunState, model: PolicyModel, record: dict) -> bool:
    if cfg.early_stopping_patience <= 0:
        return False
    acc = record["val_accuracy"]
    if math.isnan(acc):
        return False
    if acc > rs.best_acc:
        rs.best_acc = acc
        rs.best_params = model.state_dict()
        rs.history.best_step = record["step"]
        rs.evals_since_best = 0
        return False
    rs.evals_since_best += 1
    return rs.evals_since_best >= cfg.early_stopping_patience


# ------------------------------------------------------------ experiments

@dataclass
class Experiment:
    task: SyntheticTask
    train_set: list[Trajectory]
    val_prompts: list[tuple[int, ...]]
    model: PolicyModel


def setup_experiment(cfg: ExperimentConfig) -> Experiment:
    """Task, data split and freshly initialised model for ``cfg``.

    The training set is cut to ``subset_fraction`` after generation so
    subsets of one seed are nested; validation prompts never occur in it.
    """
    from .config import task_params
    from .envs import gen_dataset, make_task

    task = make_task(cfg.task, **task_params(cfg))
    full = gen_dataset(task, cfg.train_size, seed=cfg.seed)
    keep = max(1, int(math.ceil(cfg.subset_fraction * len(full))))
    train_set = full[:keep]
    seen = {t.prompt for t in full}
    val = gen_dataset(task, cfg.val_size, seed=cfg.seed + 1_000_003, exclude_prompts=seen)
    val_prompts = list(dict.fromkeys(t.prompt for t in val))
    init = make_streams(cfg.seed)["init"]
    model = PolicyModel(task.vocab, cfg.embed_dim, cfg.hidden_dim, cfg.n_layers, cfg.max_context,
                        seed=int(init.integers(2**31)))
    return Experiment(task, train_set, val_prompts, model)
