"""Environments: token-concatenation MDP, a two-row toy MDP, synthetic tasks.

The sequence MDP has deterministic dynamics: the next state is the current
prefix with the chosen token appended. The toy MDP is a short chain whose
noisy transitions occasionally knock the agent into an upper row; in the
recoverable variant the agent can step back down, in the other it cannot.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "="

TASK_KINDS = ("copy", "reverse", "modular-sum", "multi-reference")


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary symbols must be distinct")
        ids = (self.pad_id, self.bos_id, self.eos_id)
        if len(set(ids)) != 3 or not all(0 <= i < len(self.tokens) for i in ids):
            raise ValueError(f"special ids {ids} must be distinct and in range")

    @classmethod
    def build(cls, symbols: Iterable[str]) -> "Vocabulary":
        return cls(tokens=(PAD, BOS, EOS, *symbols))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, symbol: str) -> int:
        return self.tokens.index(symbol)

    def encode(self, symbols: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(s) for s in symbols)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Trajectory:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    terminated: bool = True

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "completion", tuple(int(t) for t in self.completion))

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.completion


@dataclass(frozen=True)
class Transition:
    state: tuple[int, ...]
    action: int
    next_state: tuple[int, ...]
    terminal: bool


# ------------------------------------------------------------ sequence MDP

@dataclass(frozen=True)
class SequenceMdp:
    """Token-level MDP; ``max_len`` caps the total prefix length."""

    vocab: Vocabulary
    max_len: int

    def is_terminal(self, state: Sequence[int]) -> bool:
        return (len(state) > 0 and state[-1] == self.vocab.eos_id) or len(state) >= self.max_len

    def step(self, state: Sequence[int], action: int) -> Transition:
        return seq_step(state, action, self.vocab, self.max_len)


def seq_step(state: Sequence[int], action: int, vocab: Vocabulary, max_len: int) -> Transition:
    state = tuple(int(t) for t in state)
    if not 0 <= action < len(vocab):
        raise ValueError(f"action {action} outside vocabulary of size {len(vocab)}")
    if (state and state[-1] == vocab.eos_id) or len(state) >= max_len:
        raise ContractError("cannot step from a terminal state")
    nxt = state + (int(action),)
    terminal = action == vocab.eos_id or len(nxt) >= max_len
    return Transition(state, int(action), nxt, terminal)


def trajectory_to_transitions(traj: Trajectory) -> list[Transition]:
    out = []
    prefix = traj.prompt
    last = len(traj.completion) - 1
    for i, tok in enumerate(traj.completion):
        nxt = prefix + (tok,)
        out.append(Transition(prefix, tok, nxt, traj.terminated and i == last))
        prefix = nxt
    return out


def transitions_to_trajectory(transitions: Sequence[Transition], prompt: Sequence[int]) -> Trajectory:
    prompt = tuple(prompt)
    if not transitions:
        return Trajectory(prompt, (), False)
    return Trajectory(prompt, tuple(t.action for t in transitions), transitions[-1].terminal)


# ------------------------------------------------------------------ toy MDP

class ToyAction(enum.IntEnum):
    PROGRESS = 0
    DEVIATE = 1
    RETURN = 2
    STAY = 3

    @property
    def column(self) -> int:
        """Index into a two-column tabular policy (first/second action of the state class)."""
        return 0 if self in (ToyAction.PROGRESS, ToyAction.RETURN) else 1


@dataclass(frozen=True)
class ToyMdp:
    """Bottom chain ``0..n-1`` leading to the goal, upper row ``n..2n-1``.

    From bottom state ``i``: PROGRESS moves to ``i+1`` (or the goal), DEVIATE
    moves up to top state ``n+i``. From top state ``n+i``: STAY walks along
    the upper row to ``n+i+1`` and falls off into a dead end after the last
    one; RETURN (recoverable variant only) drops back to bottom state ``i``.
    With probability ``noise`` the other action of the state's class fires.
    """

    chain_length: int = 5
    noise: float = 0.1
    recoverable: bool = True
    goal_reward: float = 1.0
    horizon: int = 20

    def __post_init__(self):
        if self.chain_length < 1:
            raise ValueError("chain_length must be positive")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.goal_reward <= 0:
            raise ValueError("goal_reward must be positive")

    @property
    def n_states(self) -> int:
        return 2 * self.chain_length + 2

    @property
    def start(self) -> int:
        return 0

    @property
    def goal(self) -> int:
        return 2 * self.chain_length

    @property
    def dead_end(self) -> int:
        return 2 * self.chain_length + 1

    def is_bottom(self, s: int) -> bool:
        return 0 <= s < self.chain_length

    def is_top(self, s: int) -> bool:
        return self.chain_length <= s < 2 * self.chain_length

    def is_terminal(self, s: int) -> bool:
        return s in (self.goal, self.dead_end)

    def valid_actions(self, s: int) -> tuple[ToyAction, ...]:
        if self.is_bottom(s):
            return (ToyAction.PROGRESS, ToyAction.DEVIATE)
        if self.is_top(s):
            return (ToyAction.RETURN, ToyAction.STAY) if self.recoverable else (ToyAction.STAY,)
        return ()

    def action_mask(self) -> np.ndarray:
        """(n_states, 2) boolean table of which policy columns are usable.

        The dead end is absorbing and keeps one nominal column so a tabular
        policy can hold a finite value for it; the goal has none.
        """
        mask = np.zeros((self.n_states, 2), dtype=bool)
        for s in range(self.n_states):
            for a in self.valid_actions(s):
                mask[s, a.column] = True
        mask[self.dead_end, 0] = True
        return mask

    def action_for(self, s: int, column: int) -> ToyAction:
        for a in self.valid_actions(s):
            if a.column == column:
                return a
        raise ValueError(f"column {column} is not available in state {s}")

    def executed_column(self, s: int, nxt: int) -> int:
        """Column of the action that actually moved ``s`` to ``nxt``."""
        for a in self.valid_actions(s):
            if self._move(s, a) == nxt:
                return a.column
        raise ValueError(f"no action moves state {s} to {nxt}")

    def _move(self, s: int, a: ToyAction) -> int:
        n = self.chain_length
        if a is ToyAction.PROGRESS:
            return s + 1 if s + 1 < n else self.goal
        if a is ToyAction.DEVIATE:
            return n + s
        if a is ToyAction.RETURN:
            return s - n
        nxt = s + 1
        return nxt if nxt < 2 * n else self.dead_end


def toy_step(mdp: ToyMdp, state: int, action: ToyAction, rng: np.random.Generator):
    """One noisy transition. Returns ``(next_state, reward, terminal)``."""
    if mdp.is_terminal(state):
        raise ContractError(f"state {state} is terminal")
    action = ToyAction(action)
    valid = mdp.valid_actions(state)
    if action not in valid:
        raise ValueError(f"action {action.name} is not valid in state {state}")
    executed = action
    if len(valid) == 2 and rng.random() < mdp.noise:
        executed = valid[1] if action == valid[0] else valid[0]
    nxt = mdp._move(state, executed)
    reward = mdp.goal_reward if nxt == mdp.goal else 0.0
    return nxt, reward, mdp.is_terminal(nxt)


@dataclass(frozen=True)
class ToyTransition:
    state: int
    column: int
    next_state: int
    terminal: bool
    reward: float = 0.0


def toy_demonstrations(mdp: ToyMdp, count: int, rng: np.random.Generator | None = None) -> list[Trajectory]:
    """Noiseless expert rollouts: PROGRESS until the goal.

    ``rng`` is accepted for interface symmetry; the expert never draws from it.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    demo = Trajectory((mdp.start,), (int(ToyAction.PROGRESS),) * mdp.chain_length, True)
    return [demo] * count


def toy_demo_transitions(mdp: ToyMdp, traj: Trajectory) -> list[ToyTransition]:
    """Replay a demonstration under noiseless dynamics."""
    s = traj.prompt[0]
    out = []
    for a in traj.completion:
        action = ToyAction(a)
        nxt = mdp._move(s, action)
        out.append(ToyTransition(s, action.column, nxt, mdp.is_terminal(nxt),
                                 mdp.goal_reward if nxt == mdp.goal else 0.0))
        s = nxt
    return out


# ----------------------------------------------------------- synthetic tasks

@dataclass
class SyntheticTask:
    """Desk-scale generation task with a deterministic exact-match checker.

    ``metric`` is a graded per-trajectory score in ``[0, 1]``.
    """

    kind: str
    vocab: Vocabulary
    num_symbols: int = 8
    min_len: int = 3
    max_len: int = 6
    modulus: int = 10
    n_terms: int = 2
    n_references: int = 4
    reference_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    refs_per_prompt: int = 4
    max_completion: int = 64
    answer_checker: Callable[[Sequence[int], Sequence[int]], bool] = field(init=False, repr=False)
    metric: Callable[[Sequence[int], Sequence[int]], float] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if not 1 <= self.n_references <= 4:
            raise ValueError("n_references must be between 1 and 4")
        self.answer_checker = self._check
        self.metric = self._score

    # token helpers
    def _content(self, i: int) -> int:
        return self.vocab.id(_content_symbol(self.kind, i))

    def _content_index(self, tok: int) -> int | None:
        sym = self.vocab.tokens[tok]
        prefix = "d" if self.kind == "modular-sum" else "s"
        if sym.startswith(prefix) and sym[1:].isdigit():
            return int(sym[1:])
        return None

    def _body(self, prompt: Sequence[int]) -> list[int]:
        sep = self.vocab.id(SEP)
        return [t for t in prompt[1:] if t != sep]

    def valid_completions(self, prompt: Sequence[int]) -> list[tuple[int, ...]]:
        eos = self.vocab.eos_id
        body = self._body(prompt)
        if self.kind == "copy":
            return [tuple(body) + (eos,)]
        if self.kind == "reverse":
            return [tuple(reversed(body)) + (eos,)]
        if self.kind == "modular-sum":
            plus = self.vocab.id("+")
            terms = [self._content_index(t) for t in body if t != plus]
            return [(self._content(sum(terms) % self.modulus), eos)]
        refs = []
        for k in range(self.n_references):
            marker = self.vocab.id(f"m{k}")
            refs.append((marker, *_paraphrase(body, k), eos))
        return refs

    def _check(self, prompt: Sequence[int], completion: Sequence[int]) -> bool:
        return tuple(completion) in self.valid_completions(prompt)

    def _score(self, prompt: Sequence[int], completion: Sequence[int]) -> float:
        completion = tuple(completion)
        if self.kind == "modular-sum":
            target = self.valid_completions(prompt)[0]
            if len(completion) != 2 or completion[1] != self.vocab.eos_id:
                return 0.0
            got = self._content_index(completion[0])
            if got is None or got >= self.modulus:
                return 0.0
            want = self._content_index(target[0])
            dist = min((got - want) % self.modulus, (want - got) % self.modulus)
            return 1.0 - dist / (self.modulus // 2)
        return max(_positional_match(completion, ref) for ref in self.valid_completions(prompt))

    def sample_prompt(self, rng: np.random.Generator) -> tuple[int, ...]:
        bos, sep = self.vocab.bos_id, self.vocab.id(SEP)
        if self.kind == "modular-sum":
            plus = self.vocab.id("+")
            out = [bos]
            for i in range(self.n_terms):
                if i:
                    out.append(plus)
                out.append(self._content(int(rng.integers(self.modulus))))
            return tuple(out + [sep])
        length = int(rng.integers(self.min_len, self.max_len + 1))
        body = [self._content(int(i)) for i in rng.integers(self.num_symbols, size=length)]
        return (bos, *body, sep)

    def demonstrate(self, prompt: Sequence[int], rng: np.random.Generator) -> tuple[int, ...]:
        refs = self.valid_completions(prompt)
        if len(refs) == 1:
            return refs[0]
        w = np.asarray(self.reference_weights, dtype=float)
        return refs[int(rng.choice(len(refs), p=w / w.sum()))]


def _content_symbol(kind: str, i: int) -> str:
    return f"d{i}" if kind == "modular-sum" else f"s{i}"


def _paraphrase(body: Sequence[int], k: int) -> tuple[int, ...]:
    body = list(body)
    if k % 4 == 0:
        return tuple(body)
    if k % 4 == 1:
        return tuple(reversed(body))
    if k % 4 == 2:
        return tuple(body[1:] + body[:1])
    rev = list(reversed(body))
    return tuple(rev[1:] + rev[:1])


def _positional_match(got: Sequence[int], want: Sequence[int]) -> float:
    span = max(len(got), len(want))
    if span == 0:
        return 1.0
    return sum(a == b for a, b in zip(got, want)) / span


def make_task(kind: str, **params) -> SyntheticTask:
    """Build a task together with its vocabulary."""
    num_symbols = params.get("num_symbols", 8)
    modulus = params.get("modulus", 10)
    n_refs = params.get("n_references", 4)
    if kind == "modular-sum":
        symbols = [f"d{i}" for i in range(modulus)] + ["+", SEP]
    elif kind == "multi-reference":
        symbols = [f"s{i}" for i in range(num_symbols)] + [f"m{k}" for k in range(n_refs)] + [SEP]
    elif kind in ("copy", "reverse"):
        symbols = [f"s{i}" for i in range(num_symbols)] + [SEP]
    else:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    return SyntheticTask(kind=kind, vocab=Vocabulary.build(symbols), **params)


def gen_dataset(task: SyntheticTask, n: int, seed: int,
                exclude_prompts: Iterable[Sequence[int]] = ()) -> list[Trajectory]:
    """Draw ``n`` demonstrations; bit-identical for a fixed ``seed``.

    Multi-reference prompts are emitted in groups of ``refs_per_prompt``
    demonstrations, each group holding at least two distinct references.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    excluded = {tuple(p) for p in exclude_prompts}

    def fresh_prompt():
        for _ in range(10_000):
            p = task.sample_prompt(rng)
            if p not in excluded:
                return p
        raise RuntimeError("prompt space exhausted by exclusions")

    out: list[Trajectory] = []
    if task.kind != "multi-reference":
        while len(out) < n:
            p = fresh_prompt()
            out.append(Trajectory(p, task.demonstrate(p, rng), True))
        return out

    group = max(2, task.refs_per_prompt)
    while len(out) < n:
        p = fresh_prompt()
        while True:
            comps = [task.demonstrate(p, rng) for _ in range(group)]
            if len(set(comps)) >= 2:
                break
        out.extend(Trajectory(p, c, True) for c in comps)
    out = out[:n]
    # a lone trailing demonstration is re-pointed at the previous prompt
    if n % group == 1 and n > 1:
        prev = out[-2].prompt
        out[-1] = Trajectory(prev, task.demonstrate(prev, rng), True)
    return out


# ------------------------------------------------------------------ file io

def write_dataset(path: str | os.PathLike, trajectories: Iterable[Trajectory]) -> None:
    """One line per trajectory: ``prompt<TAB>completion<TAB>terminated``."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(" ".join(map(str, t.prompt)) + "\t"
                     + " ".join(map(str, t.completion)) + "\t"
                     + ("1" if t.terminated else "0") + "\n")


def read_dataset(path: str | os.PathLike) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            prompt = tuple(int(x) for x in parts[0].split())
            completion = tuple(int(x) for x in parts[1].split())
            out.append(Trajectory(prompt, completion, parts[2] == "1"))
    return out
