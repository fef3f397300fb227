"""Training objectives over batches of demonstrations.

All losses reduce by the per-token mean. Every model exposes
``score(batch) -> StepBatch`` (logits at ``s_t`` and ``s_{t+1}`` plus the
taken actions), so the same code serves the attention policy on token
trajectories and the tabular policy on toy-MDP transitions.

The TD objective treats logits as rescaled soft Q-values: with
``v(s) = logsumexp(logits(s))`` and ``log pi(a|s) = logits(s)[a] - v(s)``,
the residual ``v(s) + log pi(a|s) - gamma * v(s')`` is
``logits(s)[a] - gamma * v(s')``. Terminal successors have value zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import T, Tensor, no_grad
from .envs import Trajectory
from .policy import SeqNet, scalar_outputs


@dataclass
class LossOutput:
    """Differentiable total plus its decomposition (plain floats).

    ``total == td_term + mle_term - entropy_term + sum(extras.values())``.
    """

    loss: Tensor
    mle_term: float = 0.0
    td_term: float = 0.0
    entropy_term: float = 0.0
    token_count: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.loss.data)

    def as_dict(self) -> dict[str, float]:
        out = {"total": self.total, "mle_term": self.mle_term, "td_term": self.td_term,
               "entropy_term": self.entropy_term, "token_count": self.token_count}
        out.update(self.extras)
        return out


@dataclass
class IqlConfig:
    lam: float = 0.1
    gamma: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass
class RewardTrace:
    per_step: list[float]
    total_return: float
    trajectory: object = None


def _nonempty(batch, what="batch"):
    if batch is None or len(batch) == 0:
        raise ValueError(f"empty {what}")


# -------------------------------------------------------------------- MLE

def mle_loss(batch: Sequence, model) -> LossOutput:
    """Mean negative log-likelihood per completion token."""
    _nonempty(batch)
    sb = model.score(batch)
    nll = T.mean(sb.log_probs() * -1.0)
    return LossOutput(nll, mle_term=float(nll.data), token_count=len(sb))


def entropy_regularized_mle_loss(batch: Sequence, model, lam: float) -> LossOutput:
    """Mean over tokens of ``-log pi(a|s) - lam * H(pi(.|s))``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    _nonempty(batch)
    sb = model.score(batch)
    logsm = T.log_softmax(sb.logits)
    neg_logp = T.gather(logsm, sb.actions) * -1.0
    ent = T.sum(T.exp(logsm) * logsm, axis=-1) * -1.0
    total = T.mean(neg_logp - ent * lam)
    return LossOutput(total, mle_term=float(neg_logp.data.mean()),
                      entropy_term=float(lam * ent.data.mean()), token_count=len(sb))


# ---------------------------------------------------------------- IQLearn

def td_residual(sb, gamma: float, logp_scale: float = 1.0) -> Tensor:
    """``v(s) + logp_scale * log pi(a|s) - gamma * v(s')`` per transition."""
    if logp_scale == 1.0:
        q = sb.q_taken()
    else:
        q = sb.values() + sb.log_probs() * logp_scale
    return q - sb.next_values() * gamma


def iqlearn_offline_loss(batch: Sequence, model, cfg: IqlConfig) -> LossOutput:
    """Per-token mean of ``lam * delta**2 - log pi(a|s)`` over expert data."""
    _nonempty(batch)
    sb = model.score(batch)
    neg_logp = sb.log_probs() * -1.0
    reg = T.square(td_residual(sb, cfg.gamma)) * cfg.lam
    total = T.mean(reg + neg_logp)
    return LossOutput(total, mle_term=float(neg_logp.data.mean()), td_term=float(reg.data.mean()),
                      token_count=len(sb))


def iqlearn_online_loss(expert_batch: Sequence, online_batch: Sequence, model,
                        cfg: IqlConfig) -> LossOutput:
    """Mixed-occupancy variant.

    The residual scales the log-probability by ``1/(1-alpha)``; the squared
    residual is averaged with weight ``1-alpha`` on expert tokens and
    ``alpha`` on online tokens; the likelihood term uses expert tokens only.
    """
    _nonempty(expert_batch, "expert batch")
    if cfg.alpha > 0:
        _nonempty(online_batch, "online batch (alpha > 0 needs policy rollouts)")
    scale = 1.0 / (1.0 - cfg.alpha)
    se = model.score(expert_batch)
    neg_logp = se.log_probs() * -1.0
    mle = T.mean(neg_logp)
    td = T.mean(T.square(td_residual(se, cfg.gamma, scale))) * ((1.0 - cfg.alpha) * cfg.lam)
    count = len(se)
    if online_batch:
        so = model.score(online_batch)
        td = td + T.mean(T.square(td_residual(so, cfg.gamma, scale))) * (cfg.alpha * cfg.lam)
        count += len(so)
    total = td + mle
    return LossOutput(total, mle_term=float(mle.data), td_term=float(td.data), token_count=count)


def extract_rewards(model, traj, cfg: IqlConfig) -> RewardTrace:
    """Implicit per-step rewards ``lam * (logits(s_t)[a_t] - gamma * v(s_{t+1}))``.

    ``traj`` is a ``Trajectory`` for sequence policies or a list of toy
    transitions for tabular ones.
    """
    batch = [traj] if isinstance(traj, Trajectory) else list(traj)
    if not batch or (isinstance(traj, Trajectory) and not traj.completion):
        return RewardTrace([], 0.0, traj)
    with no_grad():
        sb = model.score(batch)
        r = cfg.lam * td_residual(sb, cfg.gamma).data
    per_step = [float(x) for x in r]
    return RewardTrace(per_step, math.fsum(per_step), traj)


# ------------------------------------------------------------------- GAIL

def discriminator_logits(disc: SeqNet, batch: Sequence[Trajectory]) -> Tensor:
    """``D`` at every generated step, read on the prefix ending with that token."""
    return scalar_outputs(disc, batch, at="after")


def gail_discriminator_loss(expert_states: Sequence[Trajectory], policy_states: Sequence[Trajectory],
                            disc: SeqNet) -> Tensor:
    """Binary cross-entropy on ``sigmoid(D)``: expert = 1, policy = 0.

    Averaged over the pooled steps of both batches; returns a scalar tensor.
    """
    _nonempty(expert_states, "expert batch")
    _nonempty(policy_states, "policy batch")
    d_exp = discriminator_logits(disc, expert_states)
    d_pol = discriminator_logits(disc, policy_states)
    # -log sigmoid(d) = softplus(-d); -log(1 - sigmoid(d)) = softplus(d)
    per = T.concat([T.softplus(d_exp * -1.0), T.softplus(d_pol)], axis=0)
    return T.mean(per)


def gail_reward(disc: SeqNet, state: Sequence[int]) -> float:
    """``log(1 + exp(D(state)))``; strictly positive for finite ``D``."""
    d = disc.last_outputs([list(state)])[0, 0]
    return float(np.logaddexp(0.0, d))


def gail_rewards(disc: SeqNet, batch: Sequence[Trajectory]) -> list[np.ndarray]:
    with no_grad():
        d = discriminator_logits(disc, batch).data
    out, pos = [], 0
    for t in batch:
        n = len(t.completion)
        out.append(np.logaddexp(0.0, d[pos:pos + n]))
        pos += n
    return out


@dataclass
class Rollout:
    trajectory: Trajectory
    rewards: np.ndarray


def reward_to_go(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def rescale_advantages(adv: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Centre per batch; divide by the std only when it is non-zero."""
    adv = adv - adv.mean()
    std = adv.std()
    return adv / std if std > eps else adv


def gail_policy_loss(rollouts: Sequence[Rollout], value_net: SeqNet, disc: SeqNet | None,
                     kl_weight: float, mle_weight: float, initial_model, model,
                     expert_batch: Sequence[Trajectory] = (), gamma: float = 1.0) -> LossOutput:
    """Advantage actor-critic step with KL anchor and optional MLE mixing.

    ``total = pg + kl_weight * KL(pi || pi_init) + mle_weight * mle + value``
    where ``pg = -mean(A * log pi)`` with standardised advantages
    ``A = R - V(s)`` and ``value = mean((V(s) - R)**2)``. ``disc`` is unused
    here (rewards already sit in the rollouts) and kept for signature parity.
    """
    _nonempty(rollouts, "rollout batch")
    trajs = [r.trajectory for r in rollouts]
    returns = np.concatenate([reward_to_go(np.asarray(r.rewards, float), gamma) for r in rollouts])
    sb = model.score(trajs)
    logsm = T.log_softmax(sb.logits)
    logp = T.gather(logsm, sb.actions)
    values = scalar_outputs(value_net, trajs, at="state")
    adv = rescale_advantages(returns - values.data)
    pg = T.mean(logp * adv) * -1.0
    with no_grad():
        init_logsm = T.log_softmax(initial_model.score(trajs).logits).data
    kl = T.mean(T.sum(T.exp(logsm) * (logsm - init_logsm), axis=-1))
    value = T.mean(T.square(values - returns))
    total = pg + kl * kl_weight + value
    mle_term = 0.0
    if mle_weight and len(expert_batch):
        mle = mle_loss(expert_batch, model)
        total = total + mle.loss * mle_weight
        mle_term = mle_weight * mle.mle_term
    return LossOutput(total, mle_term=mle_term, token_count=len(sb),
                      extras={"pg_term": float(pg.data), "kl_term": kl_weight * float(kl.data),
                              "value_term": float(value.data)})
