import numpy as np
import pytest

from seqtta import nn
from seqtta.augment import AugAction, OperatorParams
from seqtta.backbones import Backbone, BackboneConfig, train_backbone
from seqtta.data import (PopulationSpec, SyntheticSpec, generate_synthetic,
                         popularity_percentiles, split_leave_one_out)
from seqtta.engine import TtaConfig
from seqtta.policy import (PolicyNet, PpoConfig, RewardConfig, Transition,
                           TransitionBatch, TtaEnvironment, build_state,
                           collect_rollout, combined_reward, dynamic_entropy,
                           macro_reward, ppo_loss, ppo_update, rank_reward,
                           select_action, train_policy)
from seqtta.rng import stream


def make_backbone(num_items=15, d=8, seed=0, max_len=20):
    return Backbone(BackboneConfig(kind="attentive", embed_dim=d,
                                   max_len=max_len, rng_seed=seed), num_items)


# -- state construction --------------------------------------------------------


def test_state_degenerate_repeated_item():
    bb = make_backbone()
    pct = np.full(bb.num_items + 2, 0.5)
    state = build_state(bb, [4] * 6, pct)
    z = state.z_stat
    assert np.isclose(z[1], 1 / 6)   # distinct ratio
    assert np.isclose(z[2], 1.0)     # consecutive repeats
    assert np.isclose(z[3], 1.0)     # pairwise cosine of identical rows
    assert np.isclose(z[4], 1.0)     # adjacent cosine
    assert np.isclose(z[5], 0.0)     # adjacent-cosine std
    assert state.vector.shape == (bb.embed_dim + 8,)


def test_state_full_length_feature():
    bb = make_backbone(max_len=10)
    pct = np.full(bb.num_items + 2, 0.5)
    state = build_state(bb, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], pct)
    assert state.z_stat[0] == 1.0


def test_state_hand_computed_fixture():
    bb = make_backbone()
    pct = popularity_percentiles_fixture(bb.num_items)
    seq = [2, 2, 5, 7, 5]
    state = build_state(bb, seq, pct)

    E = bb.store["E"][seq]
    H = bb.encode(seq)
    assert np.allclose(state.z_sem, H.mean(axis=0))

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    pair = []
    for i in range(5):
        for j in range(i + 1, 5):
            pair.append(cos(E[i], E[j]))
    adj = [cos(E[i], E[i + 1]) for i in range(4)]
    scores = bb.score(H[-1])[1:bb.num_items + 1]
    probs = np.exp(scores - scores.max())
    probs /= probs.sum()

    expected = [
        5 / 20,
        3 / 5,
        1 / 4,
        (np.mean(pair) + 1) / 2,
        (np.mean(adj) + 1) / 2,
        float(np.std(adj)),
        float(np.mean([pct[v] for v in seq])),
        float(probs.max()),
    ]
    assert np.allclose(state.z_stat, expected)


def popularity_percentiles_fixture(num_items):
    pct = np.zeros(num_items + 2)
    pct[1:num_items + 1] = np.linspace(0.1, 1.0, num_items)
    return pct


def test_state_rejects_empty_sequence():
    bb = make_backbone()
    with pytest.raises(ValueError):
        build_state(bb, [], np.zeros(bb.num_items + 2))


# -- network --------------------------------------------------------------------


def test_zeroed_heads_give_uniform_distribution_and_zero_value():
    net = PolicyNet(10, 6, rng_seed=0)
    for name in ("Wa", "ba", "Wc", "bc"):
        net.store.params[name][...] = 0.0
    probs, values, _ = net.forward(stream(0, "s").normal(size=(4, 10)))
    assert np.allclose(probs, 1 / 6)
    assert np.allclose(values, 0.0)


def test_action_probabilities_sum_to_one():
    net = PolicyNet(12, 9, rng_seed=1)
    probs, _, _ = net.forward(stream(1, "s").normal(size=(32, 12)) * 5)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(probs >= 0)


def test_log_prob_gradient_matches_finite_differences():
    net = PolicyNet(6, 4, rng_seed=2)
    x = stream(2, "s").normal(size=(1, 6))
    action = 2

    def logp_of(param_name, value):
        net.store.params[param_name][...] = value
        _, _, cache = net.forward(x)
        return float(cache[6][0, action])

    for name in ("W1", "W2", "Wa", "b1"):
        original = net.store.params[name].copy()
        probs, _, cache = net.forward(x)
        dlogits = -probs.copy()
        dlogits[0, action] += 1.0
        net.store.zero_grads()
        net.backward(cache, dlogits, np.zeros(1))
        analytic = net.store.grads[name].copy()
        fd = nn.numeric_grad(lambda v: logp_of(name, v), original.copy())
        net.store.params[name][...] = original
        assert nn.rel_error(analytic, fd) < 1e-5, name


def test_select_action_modes():
    net = PolicyNet(4, 3, rng_seed=3)
    for name in ("Wa", "ba"):
        net.store.params[name][...] = 0.0
    state = np.ones(4)
    assert select_action(net, state, "greedy") == 0  # uniform ties -> index 0

    net.store.params["ba"][...] = np.array([0.0, 50.0, 0.0])
    assert select_action(net, state, "greedy") == 1
    assert select_action(net, state, "sample", rng=stream(0, "a")) == 1

    # greedy invariant to a constant shift of the logits
    net.store.params["ba"][...] += 7.3
    assert select_action(net, state, "greedy") == 1
    with pytest.raises(ValueError):
        select_action(net, state, "sample")


# -- rewards ---------------------------------------------------------------------


def test_macro_reward_tiers():
    cfg = RewardConfig().validate()
    assert macro_reward(1, 1, 10, cfg.tiers, cfg.below) == 0.0
    assert macro_reward(50, 1, 10, cfg.tiers, cfg.below) == 2.0
    # 2 -> 3: delta = 1/log2(4) - 1/log2(3) < 0
    assert macro_reward(2, 3, 10, cfg.tiers, cfg.below) == -1.0
    # small positive gain: rank 10 -> 9 inside the cutoff
    delta = (1 / np.log2(10)) - (1 / np.log2(11))
    assert 0 < delta < 0.1
    assert macro_reward(10, 9, 10, cfg.tiers, cfg.below) == 1.0


def test_rank_reward_values():
    assert rank_reward(7, 7, 100.0, 1.0) == 0.0
    assert rank_reward(250, 150, 100.0, 1.0) == 1.0
    assert rank_reward(5, 55, 100.0, 1.0) == -0.5
    assert rank_reward(1, 500, 100.0, 1.0) == -1.0  # clipped


def test_combined_reward_weights():
    assert combined_reward(1.0, -0.5, 1.0, 0.0) == 1.0
    assert combined_reward(1.0, -0.5, 0.0, 1.0) == -0.5
    assert np.isclose(combined_reward(1.0, -0.5, 0.2, 0.8), -0.2)


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(alpha=0.0, beta=0.0).validate()
    with pytest.raises(ValueError):
        RewardConfig(tiers=((0.1, 2.0), (0.1, 1.0))).validate()


def test_dynamic_entropy_schedule():
    cfg = PpoConfig(entropy_coef=0.09, entropy_min=0.01)
    high = np.log(9)  # healthy entropy, no boost
    assert dynamic_entropy(0, 1000, high, 9, cfg) == pytest.approx(0.09)
    assert dynamic_entropy(1000, 1000, high, 9, cfg) == pytest.approx(0.01)
    mid = dynamic_entropy(500, 1000, high, 9, cfg)
    assert mid == pytest.approx(max(0.01, 0.09 * 0.5))
    # collapsed entropy doubles the schedule, capped at the starting value
    low = 0.1 * np.log(9)
    assert dynamic_entropy(500, 1000, low, 9, cfg) == pytest.approx(
        min(2 * 0.045, 0.09))
    assert dynamic_entropy(0, 1000, low, 9, cfg) == pytest.approx(0.09)
    fixed = PpoConfig(entropy_coef=0.05, dynamic_entropy=False)
    assert dynamic_entropy(700, 1000, low, 9, fixed) == 0.05


# -- PPO -------------------------------------------------------------------------


def _batch_from_policy(net, states, actions, advantages, returns):
    probs, values, cache = net.forward(states)
    logp = cache[6]
    transitions = []
    for i, a in enumerate(actions):
        t = Transition(state=states[i], action=int(a),
                       log_prob=float(logp[i, a]), value=float(values[i]),
                       reward=float(returns[i]))
        t.ret = float(returns[i])
        t.advantage = float(advantages[i])
        transitions.append(t)
    return TransitionBatch.from_transitions(transitions)


def test_ppo_ratio_one_matches_vanilla_policy_gradient():
    rng = stream(4, "ppo")
    B, D, A = 6, 5, 4
    net = PolicyNet(D, A, rng_seed=4)
    states = rng.normal(size=(B, D))
    actions = rng.integers(0, A, size=B)
    advantages = rng.normal(size=B)
    returns = rng.normal(size=B)
    batch = _batch_from_policy(net, states, actions, advantages, returns)

    cfg = PpoConfig(epochs=1, minibatch=B, value_coef=0.0, entropy_coef=0.0,
                    dynamic_entropy=False, grad_clip=1e9, lr=0.0)
    ppo_update(net, batch, cfg, c2=0.0, seed=0, update_idx=0)
    ppo_grads = {k: v.copy() for k, v in net.store.grads.items()}

    # vanilla policy gradient of the same (normalized-advantage) batch
    ref = net.clone()
    norm_adv = (batch.advantages - batch.advantages.mean()) / \
        (batch.advantages.std() + 1e-8)
    probs, _, cache = ref.forward(states)
    dlogits = np.zeros_like(probs)
    for i, a in enumerate(actions):
        onehot = np.zeros(A)
        onehot[a] = 1.0
        dlogits[i] = -norm_adv[i] * (onehot - probs[i]) / B
    ref.store.zero_grads()
    ref.backward(cache, dlogits, np.zeros(B))
    for name in ppo_grads:
        assert np.allclose(ppo_grads[name], ref.store.grads[name], atol=1e-12), name


def test_ppo_zero_advantages_zero_policy_gradient():
    rng = stream(5, "ppo")
    B, D, A = 5, 4, 3
    net = PolicyNet(D, A, rng_seed=5)
    states = rng.normal(size=(B, D))
    actions = rng.integers(0, A, size=B)
    batch = _batch_from_policy(net, states, actions, np.zeros(B), np.zeros(B))
    batch.values[...] = 0.0  # make returns - values = 0 as well
    cfg = PpoConfig(epochs=1, minibatch=B, value_coef=0.0, entropy_coef=0.0,
                    dynamic_entropy=False, grad_clip=1e9, lr=0.0)
    ppo_update(net, batch, cfg, c2=0.0, seed=0, update_idx=0)
    for name, g in net.store.grads.items():
        assert np.allclose(g, 0.0), name


def test_ppo_full_loss_gradient_matches_finite_differences():
    rng = stream(6, "ppo")
    B, D, A = 3, 4, 3
    net = PolicyNet(D, A, rng_seed=6)
    states = rng.normal(size=(B, D))
    actions = np.array([0, 2, 1])
    advantages = np.array([0.7, -1.2, 0.4])
    returns = np.array([0.5, -0.3, 0.1])
    batch = _batch_from_policy(net, states, actions, advantages, returns)
    cfg = PpoConfig(epochs=1, minibatch=B, grad_clip=1e9, lr=0.0)
    c2 = 0.05
    norm_adv = (batch.advantages - batch.advantages.mean()) / \
        (batch.advantages.std() + 1e-8)

    ppo_update(net, batch, cfg, c2=c2, seed=0, update_idx=0)
    analytic = {k: v.copy() for k, v in net.store.grads.items()}

    for name in ("W1", "b2", "Wa", "Wc", "bc"):
        original = net.store.params[name].copy()

        def f(v, name=name):
            net.store.params[name][...] = v
            total, _ = ppo_loss(net, batch.states, batch.actions,
                                batch.log_probs, norm_adv, batch.returns,
                                cfg, c2)
            return total

        fd = nn.numeric_grad(f, original.copy())
        net.store.params[name][...] = original
        assert nn.rel_error(analytic[name], fd) < 1e-5, name


def test_ppo_degenerate_batch_flagged():
    rng = stream(7, "ppo")
    B, D, A = 4, 3, 2
    net = PolicyNet(D, A, rng_seed=7)
    states = rng.normal(size=(B, D))
    batch = _batch_from_policy(net, states, np.zeros(B, dtype=int),
                               rng.normal(size=B), rng.normal(size=B))
    diag = ppo_update(net, batch, PpoConfig(epochs=1, minibatch=B), c2=0.0)
    assert diag["degenerate_actions"] is True


class BanditEnv:
    """Two-state environment where action 0 always earns +1 and action 1 -1
    (through the rank-reward channel with beta = 1)."""

    def __init__(self):
        self.users = [0, 1]
        self.state_matrix = np.array([[1.0, 0.0, 0.0, 0.0],
                                      [0.0, 1.0, 0.0, 0.0]])
        self.base_ranks = np.array([101, 101])
        self.actions = (AugAction.IDENTITY, AugAction.CROP)

    def augmented_rank(self, pos, action_idx):
        return 1 if action_idx == 0 else 201


def test_bandit_converges_to_optimal_action():
    env = BanditEnv()
    reward_cfg = RewardConfig(alpha=0.0, beta=1.0)
    ppo_cfg = PpoConfig(batch_size=64, minibatch=32, epochs=4, lr=3e-3,
                        total_updates=60)
    net = PolicyNet(4, 2, rng_seed=8)
    for update in range(ppo_cfg.total_updates):
        batch = collect_rollout(net, env, reward_cfg, ppo_cfg.batch_size,
                                seed=8, update_idx=update)
        c2 = dynamic_entropy(update * ppo_cfg.batch_size,
                             ppo_cfg.total_env_steps, 0.6, 2, ppo_cfg)
        ppo_update(net, batch, ppo_cfg, c2, seed=8, update_idx=update)
    probs, _, _ = net.forward(env.state_matrix)
    assert probs[0, 0] > 0.95
    assert probs[1, 0] > 0.95


# -- rollout over the real environment -------------------------------------------


def _tiny_env():
    spec = SyntheticSpec(
        populations=[PopulationSpec(num_users=20, transition_seed=2,
                                    noise_rate=0.3, min_len=5, max_len=9)],
        num_items=15, rng_seed=6)
    ds = generate_synthetic(spec)
    split = split_leave_one_out(ds)
    bb = train_backbone(ds, split, BackboneConfig(
        kind="attentive", embed_dim=8, epochs=1, batch_size=16, rng_seed=0))
    pct = popularity_percentiles(ds)
    actions = (AugAction.IDENTITY, AugAction.MASK, AugAction.TMASK_R)
    env = TtaEnvironment(bb, ds, split, actions, OperatorParams(),
                         TtaConfig(m=2), seed=3, popularity_pct=pct)
    return ds, split, bb, env


def test_identity_forced_policy_earns_zero_reward():
    _, _, _, env = _tiny_env()
    net = PolicyNet(env.state_dim, len(env.actions), rng_seed=9)
    net.store.params["Wa"][...] = 0.0
    net.store.params["ba"][...] = np.array([60.0, 0.0, 0.0])
    batch = collect_rollout(net, env, RewardConfig(), 32, seed=1, update_idx=0)
    assert np.all(batch.actions == 0)
    assert np.allclose(batch.rewards, 0.0)


def test_rollout_bookkeeping():
    _, _, _, env = _tiny_env()
    net = PolicyNet(env.state_dim, len(env.actions), rng_seed=10)
    batch = collect_rollout(net, env, RewardConfig(), 48, seed=2, update_idx=5)
    assert len(batch) == 48
    _, _, cache = net.forward(batch.states)
    logp = cache[6]
    recomputed = logp[np.arange(48), batch.actions]
    assert np.allclose(batch.log_probs, recomputed)
    assert np.allclose(batch.returns, batch.rewards)
    assert np.allclose(batch.advantages, batch.returns - batch.values)


def test_train_policy_log_deterministic():
    ds, split, bb, _ = _tiny_env()
    pct = popularity_percentiles(ds)
    actions = (AugAction.IDENTITY, AugAction.MASK)
    kwargs = dict(params=OperatorParams(), tta_cfg=TtaConfig(m=2),
                  reward_cfg=RewardConfig(),
                  ppo_cfg=PpoConfig(batch_size=16, minibatch=8, epochs=2,
                                    total_updates=3),
                  seed=4, popularity_pct=pct)
    _, _, rec1 = train_policy(bb, ds, split, actions, **kwargs)
    _, _, rec2 = train_policy(bb, ds, split, actions, **kwargs)
    assert rec1 == rec2
    assert {"update", "step", "mean_reward", "entropy", "policy_loss",
            "value_loss", "clip_fraction", "c2"} <= set(rec1[0])


def test_policy_checkpoint_round_trip(tmp_path):
    net = PolicyNet(10, 3, rng_seed=11)
    path = tmp_path / "p.ckpt"
    net.save(path, ["identity", "mask", "crop"])
    loaded, actions, meta = PolicyNet.load(path)
    assert actions == (AugAction.IDENTITY, AugAction.MASK, AugAction.CROP)
    x = stream(3, "x").normal(size=(2, 10))
    p1, v1, _ = net.forward(x)
    p2, v2, _ = loaded.forward(x)
    assert np.array_equal(p1, p2) and np.array_equal(v1, v2)
