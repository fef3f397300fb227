"""Quality and diversity metrics, reward correlation, and the toy-MDP comparison."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import OptimizerState, backward, no_grad, optimizer_step
from .envs import SyntheticTask, ToyMdp, ToyTransition, Trajectory, toy_demo_transitions, \
    toy_demonstrations, toy_step
from .objectives import IqlConfig, extract_rewards, iqlearn_offline_loss, iqlearn_online_loss
from .policy import PolicyModel, SamplerConfig, TabularPolicy, entropy_of_logits, sample_batch

# ------------------------------------------------------------- Self-BLEU


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def sentence_bleu(hypothesis: Sequence, references: Sequence[Sequence], max_ngram: int = 4) -> float:
    """Multi-reference BLEU with uniform weights, brevity penalty, no smoothing."""
    if not hypothesis:
        raise ValueError("empty hypothesis")
    log_p = 0.0
    for n in range(1, max_ngram + 1):
        hyp = _ngrams(hypothesis, n)
        total = sum(hyp.values())
        if total == 0:
            return 0.0
        best: Counter = Counter()
        for ref in references:
            best |= _ngrams(ref, n)
        clipped = sum(min(c, best[g]) for g, c in hyp.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / total) / max_ngram
    c = len(hypothesis)
    # closest reference length; ties go to the shorter one
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def self_bleu(samples: Sequence[Sequence], max_ngram: int = 4) -> float:
    """Mean BLEU of each sample against all the others."""
    samples = [tuple(s) for s in samples]
    if len(samples) < 2:
        raise ValueError("self-BLEU needs at least two samples")
    if any(not s for s in samples):
        raise ValueError("self-BLEU samples must be non-empty")
    scores = [sentence_bleu(s, samples[:i] + samples[i + 1:], max_ngram) for i, s in enumerate(samples)]
    return math.fsum(scores) / len(scores)


# ------------------------------------------------------------ accuracy


def task_accuracy(trajectories: Sequence[Trajectory], task: SyntheticTask) -> float:
    if not trajectories:
        raise ValueError("no trajectories")
    ok = sum(bool(task.answer_checker(t.prompt, t.completion)) for t in trajectories)
    return ok / len(trajectories)


@dataclass
class DiversityReport:
    self_bleu: float
    mean_per_token_entropy: float
    sample_count: int


def mean_token_entropy(model: PolicyModel, trajectories: Sequence[Trajectory]) -> float:
    """Mean entropy of ``pi(.|s)`` over every state visited by the trajectories."""
    trajs = [t for t in trajectories if t.completion]
    if not trajs:
        return 0.0
    with no_grad():
        z = model.score(trajs).logits.data
    return float(np.mean([entropy_of_logits(row) for row in z]))


def diversity_report(model: PolicyModel, groups: Sequence[Sequence[Trajectory]]) -> DiversityReport:
    """Self-BLEU averaged over groups of samples that share a prompt."""
    groups = [list(g) for g in groups if len(g) >= 2]
    if not groups:
        raise ValueError("need at least one group of two or more samples")
    sb = float(np.mean([self_bleu([t.completion for t in g]) for g in groups]))
    flat = [t for g in groups for t in g]
    return DiversityReport(sb, mean_token_entropy(model, flat), len(flat))


def evaluate_policy(model: PolicyModel, task: SyntheticTask, prompts: Sequence[Sequence[int]],
                    sampler: SamplerConfig, samples_per_prompt: int,
                    rng: np.random.Generator) -> dict:
    """Accuracy, Self-BLEU (within each prompt's samples) and per-token entropy.

    Deterministic decoders are run once per prompt and the result repeated,
    so every mode is scored on the same number of samples.
    """
    prompts = [tuple(p) for p in prompts]
    k = samples_per_prompt
    if sampler.mode == "sample":
        trajs = sample_batch(model, [p for p in prompts for _ in range(k)], sampler, rng)
    else:
        trajs = [t for t in sample_batch(model, prompts, sampler, rng) for _ in range(k)]
    groups = [trajs[i * k:(i + 1) * k] for i in range(len(prompts))]
    if k >= 2:
        rep = diversity_report(model, groups)
        sb, ent = rep.self_bleu, rep.mean_per_token_entropy
    else:
        sb, ent = math.nan, mean_token_entropy(model, trajs)
    return {"accuracy": task_accuracy(trajs, task), "self_bleu": sb, "per_token_entropy": ent,
            "sample_count": len(trajs), "trajectories": trajs}


# ------------------------------------------------------------- Spearman


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN (with a warning) when undefined."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-d and of equal length")
    if len(x) < 3:
        raise ValueError("spearman needs at least three pairs")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("spearman undefined: zero rank variance", RuntimeWarning)
        return math.nan
    rho = float(rx @ ry) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


@dataclass
class CorrelationReport:
    spearman_rho: float
    n: int
    metric: str
    returns: list[float]
    scores: list[float]

    def row(self) -> tuple[str, str]:
        rho = "n/a" if math.isnan(self.spearman_rho) else f"{self.spearman_rho:.3f}"
        return self.metric, rho


def reward_metric_correlation(model: PolicyModel, eval_prompts: Sequence[Sequence[int]],
                              task: SyntheticTask, sampler_cfg: SamplerConfig, iql_cfg: IqlConfig,
                              rng: np.random.Generator,
                              metric: str | Callable[[Sequence[int], Sequence[int]], float] = "task",
                              ) -> CorrelationReport:
    """Spearman rho between accumulated implicit reward and a per-trajectory metric.

    ``metric`` is ``"task"`` (the task's graded metric), ``"accuracy"``,
    ``"total_return"`` or a callable ``(prompt, completion) -> float``.
    """
    prompts = [tuple(p) for p in eval_prompts]
    if len(prompts) < 3:
        raise ValueError("need at least three prompts")
    trajs = sample_batch(model, prompts, sampler_cfg, rng)
    returns = [extract_rewards(model, t, iql_cfg).total_return for t in trajs]
    if metric == "task":
        name, scores = "task", [task.metric(t.prompt, t.completion) for t in trajs]
    elif metric == "accuracy":
        name, scores = "accuracy", [float(task.answer_checker(t.prompt, t.completion)) for t in trajs]
    elif metric == "total_return":
        name, scores = "total_return", list(returns)
    elif callable(metric):
        name, scores = getattr(metric, "__name__", "custom"), [metric(t.prompt, t.completion) for t in trajs]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return CorrelationReport(spearman(returns, scores), len(prompts), name, returns, scores)


# -------------------------------------------------------------- toy MDP

TOY_VARIANTS = ("recoverable", "non-recoverable")
TOY_ALGORITHMS = ("iql-offline", "iql-online")


@dataclass
class ToyTrainConfig:
    lam: float = 0.1
    gamma: float = 1.0
    alpha: float = 0.1
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 0.1
    n_demos: int = 100
    episodes: int = 1000
    init_scale: float = 0.5
    rollouts_per_step: int = 16
    eval_greedy: bool = True


@dataclass
class ToyResult:
    variant: str
    algorithm: str
    seed: int
    success_rate: float
    stderr: float
    episodes: int


def _policy_column(probs: np.ndarray, s: int, mask: np.ndarray, rng: np.random.Generator,
                   greedy: bool) -> int:
    if mask[s].sum() == 1:
        return int(np.argmax(mask[s]))
    if greedy:
        return int(probs[s, 1] > probs[s, 0])
    return int(rng.random() >= probs[s, 0])


def toy_episode(mdp: ToyMdp, probs: np.ndarray, rng: np.random.Generator,
                greedy: bool = False) -> tuple[bool, list[ToyTransition]]:
    """Run one noisy episode.

    Transitions record the executed action. Only the goal stops
    bootstrapping: the dead end is absorbing and its value is learned.
    """
    mask = mdp.action_mask()
    s, out = mdp.start, []
    for _ in range(mdp.horizon):
        col = _policy_column(probs, s, mask, rng, greedy)
        nxt, r, term = toy_step(mdp, s, mdp.action_for(s, col), rng)
        out.append(ToyTransition(s, mdp.executed_column(s, nxt), nxt, nxt == mdp.goal, r))
        s = nxt
        if term:
            break
    return s == mdp.goal, out


def success_rate(mdp: ToyMdp, probs: np.ndarray, episodes: int, rng: np.random.Generator,
                 greedy: bool = True) -> float:
    return sum(toy_episode(mdp, probs, rng, greedy)[0] for _ in range(episodes)) / episodes


def train_toy_policy(mdp: ToyMdp, algorithm: str, cfg: ToyTrainConfig, seed: int) -> TabularPolicy:
    if algorithm not in TOY_ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    demos = [tr for d in toy_demonstrations(mdp, cfg.n_demos) for tr in toy_demo_transitions(mdp, d)]
    policy = TabularPolicy(mdp.n_states, 2, mdp.action_mask(), seed=seed, init_scale=cfg.init_scale)
    opt = OptimizerState(base_rate=cfg.learning_rate, warmup_steps=0)
    data_rng = np.random.default_rng([seed, 1])
    roll_rng = np.random.default_rng([seed, 2])
    online = algorithm == "iql-online"
    iql = IqlConfig(lam=cfg.lam, gamma=cfg.gamma, alpha=cfg.alpha if online else 0.0)
    for _ in range(cfg.steps):
        if online:
            probs = policy.probs()
            pool = [tr for _ in range(cfg.rollouts_per_step) for tr in toy_episode(mdp, probs, roll_rng)[1]]
            # the loss weights online data by alpha; using the whole pool only cuts variance
            expert = [demos[i] for i in data_rng.integers(len(demos), size=cfg.batch_size)]
            out = iqlearn_online_loss(expert, pool, policy, iql)
        else:
            expert = [demos[i] for i in data_rng.integers(len(demos), size=cfg.batch_size)]
            out = iqlearn_offline_loss(expert, policy, iql)
        grads = backward(out.loss)
        optimizer_step(policy.params, {"q": grads[policy.params["q"]]}, opt)
    return policy


def run_toy_comparison(mdp_cfg: ToyMdp | None = None, train_cfg: ToyTrainConfig | None = None,
                       seeds: Sequence[int] = (0, 1, 2)) -> list[ToyResult]:
    """Train offline and online tabular policies on both variants; one row per seed.

    Both algorithms of a seed are evaluated on the same episode stream.
    """
    base = mdp_cfg or ToyMdp()
    cfg = train_cfg or ToyTrainConfig()
    rows: list[ToyResult] = []
    for variant in TOY_VARIANTS:
        mdp = ToyMdp(base.chain_length, base.noise, variant == "recoverable", base.goal_reward,
                     base.horizon)
        for algorithm in TOY_ALGORITHMS:
            rates = []
            for seed in seeds:
                policy = train_toy_policy(mdp, algorithm, cfg, seed)
                rates.append(success_rate(mdp, policy.probs(), cfg.episodes,
                                          np.random.default_rng([seed, 99]), cfg.eval_greedy))
            se = _stderr(rates)
            rows += [ToyResult(variant, algorithm, s, r, se, cfg.episodes) for s, r in zip(seeds, rates)]
    return rows


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def toy_gap_table(rows: Sequence[ToyResult]) -> list[dict]:
    """Per variant: mean success of each algorithm, their gap and combined stderr."""
    table = []
    for variant in TOY_VARIANTS:
        stats = {}
        for alg in TOY_ALGORITHMS:
            rates = [r.success_rate for r in rows if r.variant == variant and r.algorithm == alg]
            if rates:
                stats[alg] = (float(np.mean(rates)), _stderr(rates), len(rates))
        if len(stats) < 2:
            continue
        (m_off, se_off, n), (m_on, se_on, _) = stats["iql-offline"], stats["iql-online"]
        gap = m_on - m_off
        table.append({"variant": variant, "offline_mean": m_off, "offline_stderr": se_off,
                      "online_mean": m_on, "online_stderr": se_on, "gap": gap,
                      "within_bounds": abs(gap) <= 2 * (se_on + se_off), "seeds": n})
    return table


def toy_rows_as_dicts(rows: Sequence[ToyResult]) -> list[dict]:
    return [asdict(r) for r in rows]


__all__ = [
    "sentence_bleu", "self_bleu", "task_accuracy", "DiversityReport", "diversity_report",
    "mean_token_entropy", "evaluate_policy", "spearman", "CorrelationReport",
    "reward_metric_correlation", "ToyTrainConfig", "ToyResult", "toy_episode", "success_rate",
    "train_toy_policy", "run_toy_comparison", "toy_gap_table", "toy_rows_as_dicts",
]
