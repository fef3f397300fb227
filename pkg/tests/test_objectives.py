import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import VOCAB8, finite_difference, grads_by_name, random_batch, relative_gradient_error, \
    tiny_model
from imitlab.core import no_grad
from imitlab.envs import ToyTransition, Trajectory, Vocabulary
from imitlab.objectives import (IqlConfig, Rollout, discriminator_logits, entropy_regularized_mle_loss,
                                extract_rewards, gail_discriminator_loss, gail_policy_loss, gail_reward,
                                gail_rewards, iqlearn_offline_loss, iqlearn_online_loss, mle_loss,
                                reward_to_go, td_residual)
from imitlab.policy import PolicyModel, SeqNet, TabularPolicy, log_prob, per_token_entropy, \
    scalar_net_like

LN4 = math.log(4.0)
LN2 = math.log(2.0)
VOCAB4 = Vocabulary(("<pad>", "<bos>", "<eos>", "a"))


def uniform_model(vocab=VOCAB4):
    return PolicyModel(vocab, embed_dim=4, hidden_dim=4, n_layers=1, max_context=16)


def open_traj(n, tok=3):
    return Trajectory((1,), (tok,) * n, False)


def hand_nll(model, batch):
    """Per-token NLL from single-state queries, independent of batched scoring."""
    terms = []
    for t in batch:
        for j, a in enumerate(t.completion):
            terms.append(-log_prob(model, t.prompt + t.completion[:j], a))
    return math.fsum(terms) / len(terms)


def hand_entropy(model, batch):
    terms = [per_token_entropy(model, t.prompt + t.completion[:j])
             for t in batch for j in range(len(t.completion))]
    return math.fsum(terms) / len(terms)


# --------------------------------------------------------------------- MLE

def test_mle_uniform_is_ln4():
    out = mle_loss([open_traj(3)], uniform_model())
    assert out.total == pytest.approx(LN4, abs=1e-15)
    assert out.token_count == 3 and out.td_term == 0 and out.entropy_term == 0


def test_mle_two_sequences_per_token_mean():
    m = tiny_model(3)
    batch = [Trajectory((1, 4), (5, 2), True), Trajectory((1, 6, 3), (7, 7, 4, 2), True)]
    out = mle_loss(batch, m)
    assert out.token_count == 6
    assert out.total == pytest.approx(hand_nll(m, batch), abs=1e-12)


def test_mle_peaked_policy_near_zero():
    m = uniform_model()
    m.params["head.b"].data[:] = [-1e9, -1e9, -1e9, 50.0]
    assert mle_loss([open_traj(4)], m).total < 1e-20


def test_mle_empty_batch_rejected():
    with pytest.raises(ValueError):
        mle_loss([], uniform_model())


# ------------------------------------------------------------------ MLE-ent

def test_entropy_regularized_zero_lambda_equals_mle(rng):
    m = tiny_model(4)
    batch = random_batch(rng)
    assert entropy_regularized_mle_loss(batch, m, 0.0).total == mle_loss(batch, m).total


def test_entropy_regularized_uniform_cancels():
    out = entropy_regularized_mle_loss([open_traj(3)], uniform_model(), 1.0)
    assert out.total == pytest.approx(0.0, abs=1e-15)
    assert out.entropy_term == pytest.approx(LN4, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_entropy_regularized_two_path(seed):
    m = tiny_model(seed)
    batch = random_batch(np.random.default_rng(seed), n=3)
    out = entropy_regularized_mle_loss(batch, m, 0.1)
    expected = hand_nll(m, batch) - 0.1 * hand_entropy(m, batch)
    assert out.total == pytest.approx(expected, abs=1e-12)
    assert out.total == pytest.approx(out.mle_term - out.entropy_term, abs=1e-12)


def test_entropy_regularized_rejects_negative_lambda():
    with pytest.raises(ValueError):
        entropy_regularized_mle_loss([open_traj(1)], uniform_model(), -0.1)


# ------------------------------------------------------------ TD, offline

def test_iql_config_validation():
    with pytest.raises(ValueError):
        IqlConfig(lam=-1)
    with pytest.raises(ValueError):
        IqlConfig(gamma=1.5)
    with pytest.raises(ValueError):
        IqlConfig(alpha=1.0)


@pytest.mark.parametrize("seed", range(50))
def test_offline_zero_lambda_is_mle(seed):
    r = np.random.default_rng(seed)
    m = tiny_model(seed, layers=1)
    batch = random_batch(r)
    off = iqlearn_offline_loss(batch, m, IqlConfig(lam=0.0, gamma=float(r.random())))
    mle = mle_loss(batch, m)
    assert off.total == mle.total
    g_off = grads_by_name(off.loss, m.params)
    g_mle = grads_by_name(mle.loss, m.params)
    for k in m.params:
        np.testing.assert_allclose(g_off[k], g_mle[k], rtol=0, atol=1e-10)


@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0, 2.5])
def test_offline_uniform_nonterminal(lam):
    out = iqlearn_offline_loss([open_traj(3)], uniform_model(), IqlConfig(lam=lam))
    assert out.total == pytest.approx(lam * LN4 ** 2 + LN4, abs=1e-14)
    assert out.td_term == pytest.approx(lam * LN4 ** 2, abs=1e-14)
    assert out.mle_term == pytest.approx(LN4, abs=1e-15)


def test_offline_uniform_terminal_token():
    out = iqlearn_offline_loss([Trajectory((1,), (2,), True)], uniform_model(), IqlConfig(lam=0.7))
    assert out.total == pytest.approx(LN4, abs=1e-15)
    assert out.td_term == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_offline_total_is_sum_of_terms(seed):
    m = tiny_model(seed)
    out = iqlearn_offline_loss(random_batch(np.random.default_rng(seed)), m, IqlConfig(lam=0.3))
    assert out.total == pytest.approx(out.td_term + out.mle_term, abs=1e-10)


# ------------------------------------------------------------- TD, online

def test_online_tiny_alpha_matches_offline(rng):
    m = tiny_model(11)
    exp, onl = random_batch(rng, n=3), random_batch(rng, n=3)
    off = iqlearn_offline_loss(exp, m, IqlConfig(lam=0.5))
    on = iqlearn_online_loss(exp, onl, m, IqlConfig(lam=0.5, alpha=1e-12))
    assert abs(on.total - off.total) < 1e-6


def test_online_continuity_is_monotone(rng):
    m = tiny_model(12)
    exp, onl = random_batch(rng, n=3), random_batch(rng, n=3)
    off = iqlearn_offline_loss(exp, m, IqlConfig(lam=0.5)).total
    gaps = [abs(iqlearn_online_loss(exp, onl, m, IqlConfig(lam=0.5, alpha=eps)).total - off)
            for eps in (1e-3, 1e-6, 1e-9)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-7


def test_online_uniform_half_mix():
    m = uniform_model()
    cfg = IqlConfig(lam=0.3, gamma=1.0, alpha=0.5)
    exp, onl = [open_traj(3)], [open_traj(2)]
    with no_grad():
        delta = td_residual(m.score(exp), cfg.gamma, 1.0 / (1.0 - cfg.alpha)).data
    np.testing.assert_allclose(delta, -2 * LN4, atol=1e-14)
    out = iqlearn_online_loss(exp, onl, m, cfg)
    # both batches hold uniform non-terminal tokens, so the weighted mean of
    # squared residuals is (2 ln4)^2 and the per-token total matches
    assert out.total == pytest.approx(cfg.lam * (2 * LN4) ** 2 + LN4, abs=1e-13)
    assert out.mle_term == pytest.approx(LN4, abs=1e-15)


def test_online_likelihood_ignores_online_tokens(rng):
    m = tiny_model(13)
    exp = random_batch(rng, n=3)
    cfg = IqlConfig(lam=0.4, alpha=0.3)
    a = iqlearn_online_loss(exp, random_batch(rng, n=2), m, cfg)
    b = iqlearn_online_loss(exp, random_batch(rng, n=4), m, cfg)
    assert a.mle_term == b.mle_term == mle_loss(exp, m).total
    # with the TD term switched off, gradients are the expert-only likelihood gradients
    zero = iqlearn_online_loss(exp, random_batch(rng, n=5), m, IqlConfig(lam=0.0, alpha=0.3))
    g_on = grads_by_name(zero.loss, m.params)
    g_mle = grads_by_name(mle_loss(exp, m).loss, m.params)
    for k in m.params:
        np.testing.assert_allclose(g_on[k], g_mle[k], rtol=0, atol=1e-12)


def test_online_requires_online_batch():
    with pytest.raises(ValueError):
        iqlearn_online_loss([open_traj(1)], [], uniform_model(), IqlConfig(alpha=0.2))


# --------------------------------------------------------- soft-RL identities

@pytest.mark.parametrize("seed", range(10))
def test_value_plus_logprob_is_logit(seed):
    m = tiny_model(seed)
    with no_grad():
        sb = m.score(random_batch(np.random.default_rng(seed)))
        lhs = sb.values().data + sb.log_probs().data
        np.testing.assert_allclose(lhs, sb.q_taken().data, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20), st.floats(0, 1))
def test_global_logit_shift_moves_residual(c, gamma):
    m = tiny_model(14)
    batch = random_batch(np.random.default_rng(3), n=4)
    with no_grad():
        sb = m.score(batch)
        before = td_residual(sb, gamma).data
        m.params["head.b"].data += c
        after = td_residual(m.score(batch), gamma).data
    shift = np.where(sb.nonterminal > 0, (1 - gamma) * c, c)
    np.testing.assert_allclose(after - before, shift, atol=1e-9)


# ---------------------------------------------------------- reward extraction

def test_extracted_reward_uniform_step():
    lam = 0.25
    tr = extract_rewards(uniform_model(), open_traj(2), IqlConfig(lam=lam))
    np.testing.assert_allclose(tr.per_step, [-lam * LN4] * 2, atol=1e-15)
    assert tr.total_return == pytest.approx(math.fsum(tr.per_step), abs=1e-10)


@pytest.mark.parametrize("c", [0.5, 3.0, 10.0])
def test_extracted_rewards_linear_in_lambda(c, rng):
    m = tiny_model(15)
    traj = random_batch(rng, n=1)[0]
    base = extract_rewards(m, traj, IqlConfig(lam=0.2, gamma=0.9))
    scaled = extract_rewards(m, traj, IqlConfig(lam=0.2 * c, gamma=0.9))
    np.testing.assert_allclose(scaled.per_step, np.array(base.per_step) * c, rtol=1e-14)
    assert scaled.total_return == pytest.approx(c * base.total_return, rel=1e-13)


def test_extracted_rewards_empty_completion():
    tr = extract_rewards(uniform_model(), Trajectory((1,), (), False), IqlConfig())
    assert tr.per_step == [] and tr.total_return == 0.0


def soft_value_iteration(n_states, n_actions, nxt, reward, terminal, gamma):
    """Exact soft Q on a layered DAG by backward recursion from terminal states."""
    q = np.zeros((n_states, n_actions))
    value = np.zeros(n_states)
    for s in range(n_states - 1, -1, -1):
        for a in range(n_actions):
            s2 = nxt[s, a]
            q[s, a] = reward[s, a] + (0.0 if terminal[s, a] else gamma * value[s2])
        m = q[s].max()
        value[s] = m + math.log(np.exp(q[s] - m).sum())
    return q


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("gamma", [1.0, 0.8])
def test_extracted_rewards_recover_soft_bellman_reward(seed, gamma):
    r = np.random.default_rng(seed)
    n_states, n_actions = 12, 3
    # edges point to strictly larger state ids; the last layer terminates
    nxt = np.zeros((n_states, n_actions), dtype=int)
    terminal = np.zeros((n_states, n_actions), dtype=bool)
    for s in range(n_states):
        if s >= n_states - 3:
            terminal[s] = True
            nxt[s] = s
        else:
            nxt[s] = r.integers(s + 1, n_states, size=n_actions)
    reward = r.normal(0, 1, size=(n_states, n_actions))
    q = soft_value_iteration(n_states, n_actions, nxt, reward, terminal, gamma)
    pol = TabularPolicy(n_states, n_actions)
    pol.params["q"].data[:] = q
    trans = [ToyTransition(s, a, int(nxt[s, a]), bool(terminal[s, a]))
             for s in range(n_states) for a in range(n_actions)]
    got = extract_rewards(pol, trans, IqlConfig(lam=1.0, gamma=gamma)).per_step
    np.testing.assert_allclose(got, [reward[t.state, t.column] for t in trans], rtol=0, atol=1e-8)


# --------------------------------------------------------------------- GAIL

def zero_disc(vocab=VOCAB8):
    return SeqNet(len(vocab), 1, embed_dim=4, hidden_dim=4, n_layers=1, max_context=32)


def separating_disc(vocab, good, bad):
    """Attention-free discriminator reading only the newest token: +20 on ``good``, -20 on ``bad``."""
    v = len(vocab)
    d = SeqNet(v, 1, embed_dim=v, hidden_dim=4, n_layers=0, max_context=32)
    d.params["tok_emb"].data[:] = np.eye(v)
    d.params["pos_emb"].data[:] = 0.0
    head = np.zeros((v, 1))
    head[good], head[bad] = 20.0, -20.0
    d.params["head.w"].data[:] = head
    return d


def test_discriminator_zero_gives_ln2(rng):
    loss = gail_discriminator_loss(random_batch(rng), random_batch(rng), zero_disc())
    assert float(loss.data) == pytest.approx(LN2, abs=1e-15)


def test_discriminator_separating_gives_near_zero():
    v = VOCAB8
    good, bad = v.id("s0"), v.id("s1")
    exp = [Trajectory((1,), (good,) * 3, False)]
    pol = [Trajectory((1,), (bad,) * 2, False)]
    loss = gail_discriminator_loss(exp, pol, separating_disc(v, good, bad))
    assert 0 < float(loss.data) < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_discriminator_two_path_bce(seed):
    r = np.random.default_rng(seed)
    disc = SeqNet(len(VOCAB8), 1, embed_dim=8, hidden_dim=8, n_layers=1, max_context=32, seed=seed,
                  zero_head=False)
    exp, pol = random_batch(r), random_batch(r)

    def steps(batch):
        return [t.prompt + t.completion[:j + 1] for t in batch for j in range(len(t.completion))]

    d_exp = disc.last_outputs(steps(exp))[:, 0]
    d_pol = disc.last_outputs(steps(pol))[:, 0]
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    bce = np.concatenate([-np.log(sig(d_exp)), -np.log(1 - sig(d_pol))]).mean()
    assert float(gail_discriminator_loss(exp, pol, disc).data) == pytest.approx(bce, abs=1e-10)


def test_gail_reward_values():
    d = SeqNet(4, 1, embed_dim=4, hidden_dim=4, n_layers=0, max_context=8)
    assert gail_reward(d, [1, 3]) == pytest.approx(LN2, abs=1e-15)
    d.params["head.b"].data[:] = 1.0
    assert gail_reward(d, [1, 3]) == pytest.approx(1.3132616875182228, abs=1e-12)
    d.params["head.b"].data[:] = -800.0
    assert gail_reward(d, [1, 3]) == 0.0 or 0 < gail_reward(d, [1, 3]) < 1e-300
    d.params["head.b"].data[:] = -30.0
    assert 0 < gail_reward(d, [1, 3]) < 1e-12


@given(st.floats(-50, 50))
def test_gail_reward_positive(dval):
    d = SeqNet(4, 1, embed_dim=4, hidden_dim=4, n_layers=0, max_context=8)
    d.params["head.b"].data[:] = dval
    assert gail_reward(d, [1, 3]) > 0


def test_gail_rewards_match_single_state(rng):
    disc = SeqNet(len(VOCAB8), 1, embed_dim=8, hidden_dim=8, n_layers=1, max_context=32, seed=2,
                  zero_head=False)
    batch = random_batch(rng, n=3)
    per = gail_rewards(disc, batch)
    for t, rs in zip(batch, per):
        want = [gail_reward(disc, t.prompt + t.completion[:j + 1]) for j in range(len(t.completion))]
        np.testing.assert_allclose(rs, want, atol=1e-12)


def test_reward_to_go():
    np.testing.assert_allclose(reward_to_go(np.array([1.0, 2.0, 3.0]), 0.5), [2.75, 3.5, 3.0])


def _policy_setup(seed=0):
    m = tiny_model(seed)
    return m, scalar_net_like(m, seed=1), m.clone()


def test_kl_term_zero_for_identical_policies(rng):
    m, value_net, init = _policy_setup()
    rolls = [Rollout(t, rng.random(len(t.completion))) for t in random_batch(rng, n=3)]
    out = gail_policy_loss(rolls, value_net, None, kl_weight=5.0, mle_weight=0.0,
                           initial_model=init, model=m)
    assert abs(out.extras["kl_term"]) < 1e-15


def test_constant_rewards_give_zero_policy_gradient_term(rng):
    m, value_net, init = _policy_setup()
    rolls = [Rollout(Trajectory((1, 3), (int(a),), False), np.array([0.7]))
             for a in rng.integers(3, 8, size=6)]
    out = gail_policy_loss(rolls, value_net, None, 0.0, 0.0, init, m)
    assert abs(out.extras["pg_term"]) < 1e-15  # mean-centring leaves ulp residue


@pytest.mark.parametrize("seed", range(10))
def test_policy_gradient_term_invariant_to_affine_reward_shift(seed):
    r = np.random.default_rng(seed)
    m, value_net, init = _policy_setup(seed)
    trajs = [Trajectory((1, int(r.integers(3, 8))), (int(r.integers(3, 8)),), False) for _ in range(8)]
    rewards = r.normal(size=8)
    scale, shift = float(r.uniform(0.1, 10)), float(r.normal(0, 5))
    base = gail_policy_loss([Rollout(t, np.array([x])) for t, x in zip(trajs, rewards)],
                            value_net, None, 0.0, 0.0, init, m)
    moved = gail_policy_loss([Rollout(t, np.array([scale * x + shift])) for t, x in zip(trajs, rewards)],
                             value_net, None, 0.0, 0.0, init, m)
    assert moved.extras["pg_term"] == pytest.approx(base.extras["pg_term"], abs=1e-12)
    # ranking of per-sample |advantage| is unchanged
    adv = np.abs(rewards - rewards.mean())
    adv2 = np.abs(scale * rewards + shift - (scale * rewards + shift).mean())
    assert np.array_equal(np.argsort(adv, kind="stable"), np.argsort(adv2, kind="stable"))


def test_policy_loss_total_decomposes(rng):
    m, value_net, init = _policy_setup(3)
    m.params["head.b"].data += rng.normal(size=len(VOCAB8))
    rolls = [Rollout(t, rng.random(len(t.completion))) for t in random_batch(rng, n=3)]
    exp = random_batch(rng, n=2)
    out = gail_policy_loss(rolls, value_net, None, 0.3, 0.5, init, m, expert_batch=exp)
    parts = out.extras["pg_term"] + out.extras["kl_term"] + out.extras["value_term"] + out.mle_term
    assert out.total == pytest.approx(parts, abs=1e-10)
    assert out.mle_term == pytest.approx(0.5 * mle_loss(exp, m).total, abs=1e-12)


# ---------------------------------------------------- finite-difference gradients

def _fd_check(loss_fn, params, seed):
    analytic = grads_by_name(loss_fn().loss if hasattr(loss_fn(), "loss") else loss_fn(), params)

    def value():
        out = loss_fn()
        return float(out.loss.data) if hasattr(out, "loss") else float(out.data)

    numeric = finite_difference(value, params, np.random.default_rng(seed), n_coords=24)
    return relative_gradient_error(analytic, numeric)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("objective", ["mle", "mle-ent", "iql-offline", "iql-online", "gail"])
def test_objective_gradients_match_finite_differences(objective, seed):
    r = np.random.default_rng(seed)
    m = tiny_model(seed, embed=6, hidden=8, layers=1)
    exp, onl = random_batch(r, n=2), random_batch(r, n=2)
    if objective == "mle":
        fn = lambda: mle_loss(exp, m)  # noqa: E731
    elif objective == "mle-ent":
        fn = lambda: entropy_regularized_mle_loss(exp, m, 0.3)  # noqa: E731
    elif objective == "iql-offline":
        fn = lambda: iqlearn_offline_loss(exp, m, IqlConfig(lam=0.7, gamma=0.9))  # noqa: E731
    elif objective == "iql-online":
        fn = lambda: iqlearn_online_loss(exp, onl, m, IqlConfig(lam=0.7, gamma=0.9, alpha=0.3))  # noqa: E731
    else:
        init = m.clone()
        m.params["head.b"].data += r.normal(size=len(VOCAB8))
        value_net = scalar_net_like(m, seed=5)
        value_net.params["head.w"].data[:] = r.normal(0, 0.3, size=value_net.params["head.w"].shape)
        rolls = [Rollout(t, r.random(len(t.completion))) for t in onl]
        fn = lambda: gail_policy_loss(rolls, value_net, None, 0.2, 0.5, init, m, expert_batch=exp)  # noqa: E731
    assert _fd_check(fn, m.params, seed) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_discriminator_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    disc = SeqNet(len(VOCAB8), 1, embed_dim=6, hidden_dim=8, n_layers=1, max_context=32, seed=seed,
                  zero_head=False)
    exp, pol = random_batch(r, n=2), random_batch(r, n=2)
    assert _fd_check(lambda: gail_discriminator_loss(exp, pol, disc), disc.params, seed) < 1e-5


def test_discriminator_logits_one_per_step(rng):
    batch = random_batch(rng, n=3)
    d = discriminator_logits(zero_disc(), batch)
    assert d.shape == (sum(len(t.completion) for t in batch),)
