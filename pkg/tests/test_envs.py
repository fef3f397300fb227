import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imitlab.envs import (TASK_KINDS, ContractError, SequenceMdp, ToyAction, ToyMdp, Trajectory,
                          Vocabulary, gen_dataset, make_task, read_dataset, seq_step, toy_demonstrations,
                          toy_step, trajectory_to_transitions, transitions_to_trajectory, write_dataset)

V = Vocabulary.build([f"t{i}" for i in range(8)])
BOS, EOS = V.bos_id, V.eos_id
T5, T2 = V.id("t5"), V.id("t2")


# ------------------------------------------------------------- vocabulary

def test_vocabulary_round_trip_and_validation():
    assert V.decode(V.encode(["t1", "t7"])) == ["t1", "t7"]
    with pytest.raises(ValueError):
        Vocabulary(("a", "a", "b"))
    with pytest.raises(ValueError):
        Vocabulary(("a", "b", "c"), pad_id=0, bos_id=0, eos_id=2)


# ------------------------------------------------------------ sequence MDP

def test_seq_step_concatenates():
    tr = seq_step([BOS], T5, V, max_len=10)
    assert tr.next_state == (BOS, T5) and not tr.terminal


def test_seq_step_eos_terminates():
    assert seq_step([BOS, T5], EOS, V, max_len=10).terminal


@pytest.mark.parametrize("cap", range(2, 9))
def test_seq_step_length_cap(cap):
    for length in range(1, cap):
        state = [BOS] + [T5] * (length - 1)
        tr = seq_step(state, T2, V, max_len=cap)
        assert tr.terminal == (length == cap - 1)


def test_seq_step_rejects_terminal_and_bad_action():
    with pytest.raises(ContractError):
        seq_step([BOS, EOS], T5, V, max_len=10)
    with pytest.raises(ContractError):
        seq_step([BOS, T5, T5], T5, V, max_len=3)
    with pytest.raises(ValueError):
        seq_step([BOS], len(V), V, max_len=10)


def test_sequence_mdp_is_pure():
    mdp = SequenceMdp(V, 6)
    assert mdp.step((BOS, T5), T2) == mdp.step((BOS, T5), T2)
    assert mdp.is_terminal((BOS, EOS)) and not mdp.is_terminal((BOS,))


def test_trajectory_to_transitions_examples():
    a, b = V.id("t1"), V.id("t3")
    trs = trajectory_to_transitions(Trajectory((BOS,), (a, b, EOS), True))
    assert len(trs) == 3
    assert [t.terminal for t in trs] == [False, False, True]
    assert trs[1].state == (BOS, a) and trs[1].next_state == (BOS, a, b)
    assert trajectory_to_transitions(Trajectory((BOS,), (), False)) == []


def test_trajectory_round_trip_1000_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        prompt = (BOS, *rng.integers(3, len(V), size=int(rng.integers(0, 4))))
        comp = tuple(rng.integers(0, len(V), size=int(rng.integers(1, 7))))
        traj = Trajectory(prompt, comp, bool(rng.integers(2)))
        assert transitions_to_trajectory(trajectory_to_transitions(traj), prompt) == traj


# ----------------------------------------------------------------- toy MDP

def test_toy_noiseless_progress():
    mdp = ToyMdp(noise=0.0)
    rng = np.random.default_rng(0)
    for i in range(mdp.chain_length - 1):
        assert toy_step(mdp, i, ToyAction.PROGRESS, rng) == (i + 1, 0.0, False)
    assert toy_step(mdp, mdp.chain_length - 1, ToyAction.PROGRESS, rng) == (mdp.goal, 1.0, True)


def test_toy_noise_frequency():
    mdp = ToyMdp(noise=0.1)
    rng = np.random.default_rng(1)
    n = 100_000
    up = sum(toy_step(mdp, 2, ToyAction.PROGRESS, rng)[0] == mdp.chain_length + 2 for _ in range(n))
    p = up / n
    assert abs(p - 0.1) <= 0.01
    assert abs(p - 0.1) <= 3 * np.sqrt(0.1 * 0.9 / n)


def test_toy_top_state_moves():
    mdp = ToyMdp(noise=0.0)
    rng = np.random.default_rng(0)
    n = mdp.chain_length
    assert toy_step(mdp, n + 2, ToyAction.RETURN, rng)[0] == 2
    assert toy_step(mdp, n + 2, ToyAction.STAY, rng)[0] == n + 3
    assert toy_step(mdp, 2 * n - 1, ToyAction.STAY, rng) == (mdp.dead_end, 0.0, True)


def test_non_recoverable_never_returns():
    mdp = ToyMdp(noise=0.3, recoverable=False)
    rng = np.random.default_rng(2)
    for s in range(mdp.chain_length, 2 * mdp.chain_length):
        assert mdp.valid_actions(s) == (ToyAction.STAY,)
        for _ in range(200):
            assert not mdp.is_bottom(toy_step(mdp, s, ToyAction.STAY, rng)[0])
        with pytest.raises(ValueError):
            toy_step(mdp, s, ToyAction.RETURN, rng)


def test_non_recoverable_reachability():
    mdp = ToyMdp(recoverable=False)
    reach = set()
    frontier = list(range(mdp.chain_length, 2 * mdp.chain_length))
    while frontier:
        s = frontier.pop()
        if s in reach or mdp.is_terminal(s):
            continue
        reach.add(s)
        frontier += [mdp._move(s, a) for a in mdp.valid_actions(s)]
    assert not any(mdp.is_bottom(s) for s in reach)


def test_toy_terminal_step_is_an_error():
    mdp = ToyMdp()
    with pytest.raises(ContractError):
        toy_step(mdp, mdp.goal, ToyAction.PROGRESS, np.random.default_rng(0))


def test_toy_demonstrations():
    mdp = ToyMdp(chain_length=5)
    demos = toy_demonstrations(mdp, 20, np.random.default_rng(0))
    assert len(set(demos)) == 1
    d = demos[0]
    assert d.completion == (int(ToyAction.PROGRESS),) * 5
    s, visited = mdp.start, []
    for a in d.completion:
        visited.append(s)
        s = mdp._move(s, ToyAction(a))
    assert s == mdp.goal
    assert not any(mdp.is_top(x) for x in visited)


def test_toy_config_validation():
    with pytest.raises(ValueError):
        ToyMdp(noise=0.5)
    with pytest.raises(ValueError):
        ToyMdp(chain_length=0)


# ---------------------------------------------------------- synthetic tasks

def test_copy_task_definition():
    task = make_task("copy")
    s1, s2 = task.vocab.id("s1"), task.vocab.id("s2")
    sep = task.vocab.id("=")
    prompt = (task.vocab.bos_id, s1, s2, sep)
    assert task.valid_completions(prompt) == [(s1, s2, task.vocab.eos_id)]


def test_modular_sum_definition():
    task = make_task("modular-sum", modulus=10, n_terms=2)
    v = task.vocab
    prompt = (v.bos_id, v.id("d3"), v.id("+"), v.id("d4"), v.id("="))
    assert task.valid_completions(prompt) == [(v.id("d7"), v.eos_id)]
    assert task.metric(prompt, (v.id("d7"), v.eos_id)) == 1.0
    assert task.metric(prompt, (v.id("d2"), v.eos_id)) == 0.0
    assert task.metric(prompt, (v.id("d8"), v.eos_id)) == pytest.approx(0.8)
    assert task.metric(prompt, (v.id("d7"),)) == 0.0


def test_reverse_and_multi_reference_definitions():
    task = make_task("reverse")
    v = task.vocab
    prompt = (v.bos_id, v.id("s1"), v.id("s2"), v.id("s3"), v.id("="))
    assert task.valid_completions(prompt) == [(v.id("s3"), v.id("s2"), v.id("s1"), v.eos_id)]
    mr = make_task("multi-reference")
    v = mr.vocab
    prompt = (v.bos_id, v.id("s1"), v.id("s2"), v.id("s3"), v.id("="))
    refs = mr.valid_completions(prompt)
    assert len(refs) == 4 and len(set(refs)) == 4
    assert [r[0] for r in refs] == [v.id(f"m{k}") for k in range(4)]


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_gen_dataset_deterministic_and_valid(kind):
    task = make_task(kind)
    a = gen_dataset(task, 60, seed=3)
    b = gen_dataset(task, 60, seed=3)
    assert a == b
    assert all(task.answer_checker(t.prompt, t.completion) for t in a)
    assert gen_dataset(task, 60, seed=4) != a


def test_multi_reference_groups_hold_two_distinct_references():
    task = make_task("multi-reference", reference_weights=(0.97, 0.01, 0.01, 0.01))
    data = gen_dataset(task, 40, seed=0)
    for i in range(0, 40, 4):
        group = data[i:i + 4]
        assert len({t.prompt for t in group}) == 1
        assert len({t.completion for t in group}) >= 2


def test_gen_dataset_exclusions():
    task = make_task("copy")
    first = gen_dataset(task, 30, seed=0)
    seen = {t.prompt for t in first}
    second = gen_dataset(task, 30, seed=1, exclude_prompts=seen)
    assert not seen & {t.prompt for t in second}
    tiny = make_task("modular-sum", modulus=2, n_terms=1)
    with pytest.raises(RuntimeError):
        gen_dataset(tiny, 5, seed=0, exclude_prompts=[t.prompt for t in gen_dataset(tiny, 50, seed=0)])


def test_unknown_task_kind():
    with pytest.raises(ValueError):
        make_task("translate")


def test_dataset_file_round_trip(tmp_path):
    data = gen_dataset(make_task("reverse"), 25, seed=9) + [Trajectory((1, 4), (5,), False)]
    path = tmp_path / "d.tsv"
    write_dataset(path, data)
    first = path.read_text()
    assert first.splitlines()[0].count("\t") == 2
    assert read_dataset(path) == data
    write_dataset(path, read_dataset(path))
    assert path.read_text() == first


def test_dataset_file_rejects_malformed(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("1 2\t3\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        read_dataset(path)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generated_prompts_are_well_formed(seed):
    task = make_task("copy", min_len=2, max_len=4)
    for t in gen_dataset(task, 5, seed=seed):
        assert t.prompt[0] == task.vocab.bos_id and t.prompt[-1] == task.vocab.id("=")
        assert 2 <= len(t.prompt) - 2 <= 4
        assert t.completion[-1] == task.vocab.eos_id
