"""Autoregressive policies whose logits double as soft Q-values.

``SeqNet`` is a small causal self-attention stack over token prefixes. With
a vocabulary-sized head it is a ``PolicyModel``; with a scalar head it serves
as a GAIL discriminator or value network. ``TabularPolicy`` is the
lookup-table analogue used on the toy MDP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import T, Tensor, no_grad, parameter
from .envs import ToyTransition, Trajectory, Vocabulary

ARCH = "causal-attention"
_NEG = -1e9


class SeqNet:
    """Causal self-attention over token ids with a linear output head.

    Residual stream of width ``embed_dim``; every layer is single-head
    attention followed by a ReLU MLP of width ``hidden_dim``.
    """

    arch = ARCH

    def __init__(self, vocab_size: int, out_dim: int, embed_dim: int = 32, hidden_dim: int = 64,
                 n_layers: int = 2, max_context: int = 128, seed: int = 0, zero_head: bool = True):
        self.vocab_size = vocab_size
        self.out_dim = out_dim
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.max_context = max_context
        self.seed = seed
        rng = np.random.default_rng(seed)
        e, h = embed_dim, hidden_dim

        def normal(shape, scale):
            return rng.normal(0.0, scale, size=shape)

        p = {
            "tok_emb": normal((vocab_size, e), 0.5),
            "pos_emb": normal((max_context, e), 0.1),
        }
        for i in range(n_layers):
            p[f"l{i}.wq"] = normal((e, e), e ** -0.5)
            p[f"l{i}.wk"] = normal((e, e), e ** -0.5)
            p[f"l{i}.wv"] = normal((e, e), e ** -0.5)
            p[f"l{i}.wo"] = normal((e, e), 0.5 * e ** -0.5)
            p[f"l{i}.w1"] = normal((e, h), e ** -0.5)
            p[f"l{i}.b1"] = np.zeros(h)
            p[f"l{i}.w2"] = normal((h, e), 0.5 * h ** -0.5)
            p[f"l{i}.b2"] = np.zeros(e)
        p["head.w"] = np.zeros((e, out_dim)) if zero_head else normal((e, out_dim), e ** -0.5)
        p["head.b"] = np.zeros(out_dim)
        self.params: dict[str, Tensor] = {k: parameter(v, name=k) for k, v in p.items()}

    # ------------------------------------------------------------------
    def dims(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "out_dim": self.out_dim,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "max_context": self.max_context,
        }

    def forward(self, ids: np.ndarray) -> Tensor:
        """``ids`` of shape (B, L) -> outputs of shape (B, L, out_dim)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"expected (batch, length) ids, got shape {ids.shape}")
        b, n = ids.shape
        if n > self.max_context:
            raise ValueError(f"prefix length {n} exceeds max context {self.max_context}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of range for vocabulary of size {self.vocab_size}")
        p = self.params
        e = self.embed_dim
        x = T.reshape(T.take_rows(p["tok_emb"], ids.reshape(-1)), (b, n, e))
        x = x + T.take_rows(p["pos_emb"], np.arange(n))
        mask = np.triu(np.full((n, n), _NEG), 1)
        scale = e ** -0.5
        for i in range(self.n_layers):
            q = x @ p[f"l{i}.wq"]
            k = x @ p[f"l{i}.wk"]
            v = x @ p[f"l{i}.wv"]
            att = T.softmax(T.matmul(q, T.transpose(k)) * scale + mask)
            x = x + T.matmul(att, v) @ p[f"l{i}.wo"]
            hid = T.relu(x @ p[f"l{i}.w1"] + p[f"l{i}.b1"])
            x = x + hid @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        return x @ p["head.w"] + p["head.b"]

    def pad_batch(self, seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        ids = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
        for r, s in enumerate(seqs):
            ids[r, :len(s)] = s
        return ids, lengths

    def last_outputs(self, prefixes: Sequence[Sequence[int]], pad_id: int = 0) -> np.ndarray:
        """Output at the final position of every prefix, without building a graph."""
        ids, lengths = self.pad_batch(prefixes, pad_id)
        with no_grad():
            out = self.forward(ids).data
        return out[np.arange(len(prefixes)), lengths - 1]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r}")
            if arrays[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arrays[k].shape} vs {v.shape}")
            v.data = np.array(arrays[k], dtype=np.float64)

    def clone(self) -> "SeqNet":
        twin = object.__new__(type(self))
        twin.__dict__.update(self.__dict__)
        twin.params = {k: parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return twin


class PolicyModel(SeqNet):
    """Token policy: ``pi(a|s) = softmax(logits(s))[a]``."""

    def __init__(self, vocab: Vocabulary, embed_dim: int = 32, hidden_dim: int = 64,
                 n_layers: int = 2, max_context: int = 128, seed: int = 0, zero_head: bool = True):
        super().__init__(len(vocab), len(vocab), embed_dim, hidden_dim, n_layers, max_context,
                         seed, zero_head)
        self.vocab = vocab

    def score(self, batch: Sequence[Trajectory]) -> "StepBatch":
        return score_trajectories(self, batch)

    def transplant_trunk(self, net: SeqNet) -> None:
        """Copy every non-head parameter into ``net`` (warm-starting scalar heads)."""
        for k, v in self.params.items():
            if not k.startswith("head."):
                net.params[k].data = v.data.copy()


def scalar_net_like(model: PolicyModel, seed: int = 0) -> SeqNet:
    """Scalar-output network sharing ``model``'s trunk weights and dims."""
    net = SeqNet(model.vocab_size, 1, model.embed_dim, model.hidden_dim, model.n_layers,
                 model.max_context, seed=seed, zero_head=True)
    model.transplant_trunk(net)
    return net


# ---------------------------------------------------------------- scoring

@dataclass
class StepBatch:
    """Per-transition logits gathered from one forward pass.

    ``next_logits`` rows for terminal transitions are placeholders; use
    ``next_values`` which zeroes them.
    """

    logits: Tensor
    next_logits: Tensor
    actions: np.ndarray
    nonterminal: np.ndarray
    traj_index: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def log_probs(self) -> Tensor:
        return T.gather(T.log_softmax(self.logits), self.actions)

    def q_taken(self) -> Tensor:
        return T.gather(self.logits, self.actions)

    def values(self) -> Tensor:
        return T.logsumexp(self.logits, axis=-1)

    def next_values(self) -> Tensor:
        return T.logsumexp(self.next_logits, axis=-1) * self.nonterminal


def score_trajectories(model: SeqNet, batch: Sequence[Trajectory], pad_id: int = 0) -> StepBatch:
    """Logits at ``s_t`` and ``s_{t+1}`` for every completion token in ``batch``."""
    if not batch:
        raise ValueError("empty batch")
    ids, _ = model.pad_batch([t.tokens for t in batch], pad_id)
    out = model.forward(ids)
    width = ids.shape[1]
    rows, nxt, actions, nonterminal, owner = [], [], [], [], []
    for b, traj in enumerate(batch):
        p, n = len(traj.prompt), len(traj.completion)
        if p == 0:
            raise ValueError("trajectories need a non-empty prompt")
        for j in range(n):
            rows.append(b * width + p + j - 1)
            nxt.append(b * width + p + j)
            actions.append(traj.completion[j])
            nonterminal.append(0.0 if (j == n - 1 and traj.terminated) else 1.0)
            owner.append(b)
    flat = T.reshape(out, (-1, out.shape[-1]))
    return StepBatch(
        logits=T.take_rows(flat, rows),
        next_logits=T.take_rows(flat, nxt),
        actions=np.asarray(actions, dtype=np.int64),
        nonterminal=np.asarray(nonterminal),
        traj_index=np.asarray(owner, dtype=np.int64),
    )


def scalar_outputs(net: SeqNet, batch: Sequence[Trajectory], at: str = "state",
                   pad_id: int = 0) -> Tensor:
    """Scalar head per completion step.

    ``at="state"`` reads the output at ``s_t`` (value network); ``at="after"``
    reads it at the prefix ending with the step's own token (discriminator).
    """
    ids, _ = net.pad_batch([t.tokens for t in batch], pad_id)
    out = net.forward(ids)
    width = ids.shape[1]
    shift = -1 if at == "state" else 0
    rows = [b * width + len(t.prompt) + j + shift
            for b, t in enumerate(batch) for j in range(len(t.completion))]
    return T.reshape(T.take_rows(T.reshape(out, (-1, 1)), rows), (-1,))


# ------------------------------------------------------- per-state queries

def logits(model: SeqNet, state: Sequence[int]) -> Tensor:
    """Differentiable logit vector at ``state``."""
    state = list(state)
    if not state:
        raise ValueError("state must be a non-empty prefix")
    out = model.forward(np.asarray([state]))
    return T.reshape(T.take_rows(T.reshape(out, (-1, out.shape[-1])), [len(state) - 1]),
                     (out.shape[-1],))


def _lse(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def state_value(model: SeqNet, state: Sequence[int]) -> float:
    with no_grad():
        return float(T.logsumexp(logits(model, state)).data)


def log_prob(model: SeqNet, state: Sequence[int], action: int) -> float:
    with no_grad():
        z = logits(model, state).data
    return float(z[action] - _lse(z))


def per_token_entropy(model: SeqNet, state: Sequence[int]) -> float:
    with no_grad():
        z = logits(model, state).data
    return entropy_of_logits(z)


def entropy_of_logits(z: np.ndarray) -> float:
    logp = z - _lse(z)
    p = np.exp(logp)
    return float(max(0.0, -(p * logp).sum()))


# ----------------------------------------------------------------- tabular

class TabularPolicy:
    """Logit table over (state, action); invalid actions are masked out."""

    def __init__(self, n_states: int, n_actions: int, mask: np.ndarray | None = None,
                 seed: int = 0, init_scale: float = 0.0):
        rng = np.random.default_rng(seed)
        self.n_states, self.n_actions = n_states, n_actions
        self.mask = np.ones((n_states, n_actions), bool) if mask is None else np.asarray(mask, bool)
        table = rng.normal(0.0, init_scale, size=(n_states, n_actions)) if init_scale else \
            np.zeros((n_states, n_actions))
        self.params = {"q": parameter(table, name="q")}
        self._bias = np.where(self.mask, 0.0, _NEG)

    def table(self) -> np.ndarray:
        return self.params["q"].data + self._bias

    def probs(self) -> np.ndarray:
        z = self.table()
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def score(self, batch: Sequence[ToyTransition]) -> StepBatch:
        if not batch:
            raise ValueError("empty batch")
        s = np.array([t.state for t in batch])
        s2 = np.array([t.next_state for t in batch])
        q = self.params["q"]
        return StepBatch(
            logits=T.take_rows(q, s) + self._bias[s],
            next_logits=T.take_rows(q, s2) + self._bias[s2],
            actions=np.array([t.column for t in batch], dtype=np.int64),
            nonterminal=np.array([0.0 if t.terminal else 1.0 for t in batch]),
            traj_index=np.arange(len(batch)),
        )


# ---------------------------------------------------------------- decoding

@dataclass
class SamplerConfig:
    temperature: float = 1.0
    max_len: int = 64
    mode: str = "sample"
    beam_size: int = 4
    length_penalty: float = 0.6

    def __post_init__(self):
        if self.mode not in ("sample", "greedy", "beam"):
            raise ValueError(f"unknown decoding mode {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ValueError("temperature must be positive in sample mode")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _pick(z: np.ndarray, temperature: float, u: np.ndarray) -> np.ndarray:
    z = z / temperature
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, z.shape[1] - 1)


def sample_batch(model: PolicyModel, prompts: Sequence[Sequence[int]], cfg: SamplerConfig,
                 rng: np.random.Generator | None = None) -> list[Trajectory]:
    """Decode every prompt in lockstep; greedy when ``cfg.mode == 'greedy'``."""
    if cfg.mode == "beam":
        return [beam_search(model, p, cfg) for p in prompts]
    eos = model.vocab.eos_id
    seqs = [list(p) for p in prompts]
    done = [False] * len(seqs)
    n_new = [0] * len(seqs)
    for _ in range(cfg.max_len):
        live = [i for i, d in enumerate(done) if not d]
        if not live:
            break
        z = model.last_outputs([seqs[i] for i in live], model.vocab.pad_id)
        if cfg.mode == "greedy":
            picks = z.argmax(axis=1)
        else:
            picks = _pick(z, cfg.temperature, rng.random(len(live)))
        for i, tok in zip(live, picks):
            seqs[i].append(int(tok))
            n_new[i] += 1
            if tok == eos or n_new[i] >= cfg.max_len:
                done[i] = True
    return [Trajectory(tuple(p), tuple(s[len(p):]), True) for p, s in zip(prompts, seqs)]


def sample(model: PolicyModel, prompt: Sequence[int], cfg: SamplerConfig,
           rng: np.random.Generator) -> Trajectory:
    """Temperature sampling until eos or ``cfg.max_len`` new tokens."""
    return sample_batch(model, [prompt], cfg, rng)[0]


def greedy(model: PolicyModel, prompt: Sequence[int], max_len: int = 64) -> Trajectory:
    return sample_batch(model, [prompt], SamplerConfig(mode="greedy", max_len=max_len))[0]


def decode(model: PolicyModel, prompt: Sequence[int], cfg: SamplerConfig,
           rng: np.random.Generator | None = None) -> Trajectory:
    if cfg.mode == "beam":
        return beam_search(model, prompt, cfg)
    return sample_batch(model, [prompt], cfg, rng)[0]


def beam_score(total_logp: float, length: int, length_penalty: float) -> float:
    return total_logp / (length ** length_penalty)


def beam_search(model: PolicyModel, prompt: Sequence[int], cfg: SamplerConfig) -> Trajectory:
    """Length-normalised beam search.

    The top ``beam_size`` expansions survive each step; those ending in eos
    or reaching ``max_len`` tokens leave the beam as finished hypotheses.
    Returns the finished hypothesis with the best ``sum_logp / len**lp``.
    """
    prompt = tuple(prompt)
    eos = model.vocab.eos_id
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, tuple[int, ...], bool]] = []
    for depth in range(1, cfg.max_len + 1):
        prefixes = [toks for toks, _ in live]
        z = model.last_outputs([prompt + toks for toks in prefixes], model.vocab.pad_id)
        logp = z - np.array([_lse(row) for row in z])[:, None]
        cands = [(live[h][1] + logp[h, tok], h, tok)
                 for h in range(len(live)) for tok in range(logp.shape[1])]
        # stable sort: ties keep the earlier hypothesis, then the lower token id
        cands.sort(key=lambda c: -c[0])
        live = []
        for total, h, tok in cands[:cfg.beam_size]:
            toks = prefixes[h] + (int(tok),)
            if tok == eos or depth == cfg.max_len:
                finished.append((beam_score(total, depth, cfg.length_penalty), toks, True))
            else:
                live.append((toks, total))
        if not live:
            break
    best = max(range(len(finished)), key=lambda i: (finished[i][0], -i))
    return Trajectory(prompt, finished[best][1], finished[best][2])
