import numpy as np
import pytest

from imitlab.core import backward, no_grad
from imitlab.envs import Trajectory, Vocabulary
from imitlab.policy import PolicyModel

# 3 specials + 5 symbols = 8 tokens
VOCAB8 = Vocabulary.build([f"s{i}" for i in range(5)])


def tiny_model(seed=0, vocab=VOCAB8, embed=8, hidden=16, layers=2, zero_head=False):
    return PolicyModel(vocab, embed_dim=embed, hidden_dim=hidden, n_layers=layers,
                       max_context=32, seed=seed, zero_head=zero_head)


def random_batch(rng, vocab=VOCAB8, n=None, terminated=None, min_len=1, max_len=5):
    """Trajectories with random content; the last token is eos when terminated."""
    n = n or int(rng.integers(1, 5))
    out = []
    for _ in range(n):
        p = (vocab.bos_id, *rng.integers(3, len(vocab), size=int(rng.integers(1, 4))))
        k = int(rng.integers(min_len, max_len + 1))
        term = bool(rng.random() < 0.7) if terminated is None else terminated
        body = list(rng.integers(3, len(vocab), size=k))
        if term:
            body[-1] = vocab.eos_id
        out.append(Trajectory(p, tuple(body), term))
    return out


def grads_by_name(loss, params):
    g = backward(loss)
    return {k: g.get(p, np.zeros_like(p.data)) for k, p in params.items()}


def finite_difference(fn, params, rng, n_coords=24, eps=1e-6):
    """Central differences of ``fn()`` at randomly chosen parameter coordinates.

    Returns ``[(name, index, numeric)]``; parameters are restored afterwards.
    """
    names = sorted(params)
    out = []
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        arr = params[name].data
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        with no_grad():
            up = fn()
        arr[idx] = orig - eps
        with no_grad():
            down = fn()
        arr[idx] = orig
        out.append((name, idx, (up - down) / (2 * eps)))
    return out


def relative_gradient_error(analytic, numeric_entries):
    a = np.array([analytic[name][idx] for name, idx, _ in numeric_entries])
    n = np.array([v for _, _, v in numeric_entries])
    scale = max(np.linalg.norm(n), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
