"""Learned per-sequence operator selection.

A hybrid state (mean-pooled encoder states + 8 hand-crafted sequence
statistics) feeds a small actor-critic network trained with PPO against a
one-step environment: pick an operator, run averaged test-time augmentation,
observe a reward mixing a tiered top-K metric delta with a normalized rank
shift, terminate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .augment import AugAction, build_similarity_index
from .engine import base_predict, tta_predict
from .metrics import RankingReport, ndcg_at_k, summarize
from .rng import stream

STAT_FEATURES = 8


# ---------------------------------------------------------------------------
# state construction


@dataclass
class PolicyState:
    z_sem: np.ndarray
    z_stat: np.ndarray

    @property
    def vector(self):
        return np.concatenate([self.z_sem, self.z_stat])


def _cos01(c):
    """Map a cosine in [-1, 1] onto [0, 1]."""
    return (c + 1.0) / 2.0


def build_state(backbone, seq, popularity_pct):
    """Hybrid state vector for one inference input.

    Statistical features, all clipped to [0, 1]:
      length / max_len, distinct-item ratio, consecutive-repeat fraction,
      mean pairwise embedding cosine, mean adjacent-step cosine,
      std of adjacent-step cosine (noise proxy), mean popularity percentile,
      and the base prediction's max softmax probability (confidence).
    """
    if not seq:
        raise ValueError("cannot build a state for an empty sequence")
    trunc = backbone.truncate(seq)
    n = len(trunc)
    E = backbone.embed(trunc)
    H = backbone.encode_from(E)
    z_sem = H.mean(axis=0)

    length_feat = min(1.0, len(seq) / backbone.cfg.max_len)
    distinct = len(set(trunc)) / n
    repeats = 0.0
    if n >= 2:
        repeats = sum(1 for a, b in zip(trunc, trunc[1:]) if a == b) / (n - 1)

    norms = np.linalg.norm(E, axis=1)
    N = E / np.where(norms > 0, norms, 1.0)[:, None]
    if n >= 2:
        total = N.sum(axis=0)
        pairwise = (float(total @ total) - n) / (n * (n - 1))
        adj = np.sum(N[:-1] * N[1:], axis=1)
        adj_mean = float(adj.mean())
        adj_std = float(adj.std())
    else:
        pairwise, adj_mean, adj_std = 1.0, 1.0, 0.0

    pop = float(np.mean(popularity_pct[np.asarray(trunc, dtype=np.int64)]))
    scores = backbone.score(H[-1])
    confidence = float(np.max(nn.softmax(scores)))

    z_stat = np.clip(np.array([
        length_feat, distinct, repeats, _cos01(pairwise), _cos01(adj_mean),
        adj_std, pop, confidence,
    ]), 0.0, 1.0)
    nn.check_finite(z_stat, "policy state statistics")
    nn.check_finite(z_sem, "policy state embedding")
    return PolicyState(z_sem=z_sem, z_stat=z_stat)


# ---------------------------------------------------------------------------
# network


class PolicyNet:
    """Shared two-layer ReLU encoder with softmax actor and scalar critic."""

    def __init__(self, state_dim, num_actions, hidden=128, rng_seed=0):
        self.state_dim = state_dim
        self.num_actions = num_actions
        self.hidden = hidden
        rng = stream(rng_seed, "policy-init")
        s = self.store = nn.ParamStore()
        s.add("W1", nn.init_uniform(rng, (state_dim, hidden), state_dim))
        s.add("b1", np.zeros(hidden))
        s.add("W2", nn.init_uniform(rng, (hidden, hidden), hidden))
        s.add("b2", np.zeros(hidden))
        s.add("Wa", nn.init_uniform(rng, (hidden, num_actions), hidden))
        s.add("ba", np.zeros(num_actions))
        s.add("Wc", nn.init_uniform(rng, (hidden, 1), hidden))
        s.add("bc", np.zeros(1))

    def forward(self, X):
        """Batch forward: (action probabilities, values, cache)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        p = self.store.params
        h1_pre, _ = nn.affine_forward(X, p["W1"], p["b1"])
        h1, m1 = nn.relu_forward(h1_pre)
        h2_pre, _ = nn.affine_forward(h1, p["W2"], p["b2"])
        h2, m2 = nn.relu_forward(h2_pre)
        logits = h2 @ p["Wa"] + p["ba"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        probs = np.exp(logp)
        values = (h2 @ p["Wc"] + p["bc"])[:, 0]
        cache = (X, m1, h1, m2, h2, probs, logp)
        return probs, values, cache

    def backward(self, cache, dlogits, dvalues):
        """Accumulate parameter gradients for upstream dlogits / dvalues."""
        X, m1, h1, m2, h2, _, _ = cache
        p = self.store.params
        g = self.store.grads
        g["Wa"] += h2.T @ dlogits
        g["ba"] += dlogits.sum(axis=0)
        dv = np.asarray(dvalues, dtype=np.float64).reshape(-1, 1)
        g["Wc"] += h2.T @ dv
        g["bc"] += dv.sum(axis=0)
        dh2 = dlogits @ p["Wa"].T + dv @ p["Wc"].T
        dh2_pre = nn.relu_backward(dh2, m2)
        g["W2"] += h1.T @ dh2_pre
        g["b2"] += dh2_pre.sum(axis=0)
        dh1 = dh2_pre @ p["W2"].T
        dh1_pre = nn.relu_backward(dh1, m1)
        g["W1"] += X.T @ dh1_pre
        g["b1"] += dh1_pre.sum(axis=0)

    def clone(self):
        other = PolicyNet(self.state_dim, self.num_actions, hidden=self.hidden)
        for name in self.store.names():
            other.store.params[name][...] = self.store.params[name]
        return other

    def save(self, path, action_names, extra_meta=None):
        meta = {"state_dim": self.state_dim, "num_actions": self.num_actions,
                "hidden": self.hidden, "actions": list(action_names)}
        meta.update(extra_meta or {})
        self.store.save(path, meta=meta)

    @classmethod
    def load(cls, path):
        store, meta = nn.ParamStore.load(path)
        net = cls(meta["state_dim"], meta["num_actions"], hidden=meta["hidden"])
        for name in net.store.names():
            net.store.params[name][...] = store.params[name]
        actions = tuple(AugAction.from_name(a) for a in meta["actions"])
        return net, actions, meta


def select_action(net, state_vector, mode="greedy", rng=None):
    """Greedy argmax (ties to the lowest index) or a sampled draw."""
    probs, _, _ = net.forward(state_vector)
    probs = probs[0]
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        return int(np.searchsorted(np.cumsum(probs), rng.random()))
    raise ValueError(f"unknown selection mode {mode!r}")


# ---------------------------------------------------------------------------
# rewards


@dataclass
class RewardConfig:
    alpha: float = 0.2
    beta: float = 0.8
    metric_k: int = 10
    # scan order: first threshold the delta meets wins; `below` catches the rest.
    # The 1e-9 band treats only exact float equality as "no change".
    tiers: tuple = ((0.1, 2.0), (1e-9, 1.0), (-1e-9, 0.0))
    below: float = -1.0
    rank_norm: float = 100.0
    rank_clip: float = 1.0

    def validate(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")
        thresholds = [t for t, _ in self.tiers]
        if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("tier thresholds must strictly decrease")
        if self.rank_norm <= 0 or self.rank_clip <= 0:
            raise ValueError("rank_norm and rank_clip must be positive")
        return self


def macro_reward(rank_base, rank_aug, k, tiers, below):
    """Tiered reward on the NDCG@k change between base and augmented ranks."""
    delta = ndcg_at_k(rank_aug, k) - ndcg_at_k(rank_base, k)
    for threshold, reward in tiers:
        if delta >= threshold:
            return reward
    return below


def rank_reward(rank_base, rank_aug, norm, clip_bound):
    """Clipped, normalized position shift; positive when the target moves up."""
    return float(np.clip((rank_base - rank_aug) / norm, -clip_bound, clip_bound))


def combined_reward(r_macro, r_rank, alpha, beta):
    return alpha * r_macro + beta * r_rank


def reward_from_ranks(rank_base, rank_aug, cfg):
    r_macro = macro_reward(rank_base, rank_aug, cfg.metric_k, cfg.tiers, cfg.below)
    r_rank = rank_reward(rank_base, rank_aug, cfg.rank_norm, cfg.rank_clip)
    return combined_reward(r_macro, r_rank, cfg.alpha, cfg.beta)


# ---------------------------------------------------------------------------
# PPO


@dataclass
class PpoConfig:
    batch_size: int = 512
    clip_eps: float = 0.2
    value_coef: float = 0.25
    entropy_coef: float = 0.09      # starting c2 (also the fixed value)
    entropy_min: float = 0.01
    dynamic_entropy: bool = True
    gamma: float = 0.96             # stored for fidelity; unused by 1-step episodes
    epochs: int = 4
    minibatch: int = 128
    lr: float = 1e-3
    grad_clip: float = 1.0
    total_updates: int = 60

    def validate(self):
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.batch_size < 1 or self.minibatch < 1:
            raise ValueError("batch sizes must be >= 1")
        return self

    @property
    def total_env_steps(self):
        return self.batch_size * self.total_updates


@dataclass
class Transition:
    state: np.ndarray
    action: int
    log_prob: float
    value: float
    reward: float
    ret: float = None
    advantage: float = None

    def __post_init__(self):
        # one-step episodes: return is the reward, advantage is its residual
        if self.ret is None:
            self.ret = self.reward
        if self.advantage is None:
            self.advantage = self.ret - self.value


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_transitions(cls, transitions):
        return cls(
            states=np.stack([t.state for t in transitions]),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            log_probs=np.array([t.log_prob for t in transitions]),
            values=np.array([t.value for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            returns=np.array([t.ret for t in transitions]),
            advantages=np.array([t.advantage for t in transitions]),
        )

    def __len__(self):
        return self.states.shape[0]


def dynamic_entropy(step, total_steps, current_entropy, num_actions, cfg):
    """Linear decay from entropy_coef to entropy_min, doubled (capped at the
    starting value) while policy entropy sits below half the uniform level."""
    if not cfg.dynamic_entropy:
        return cfg.entropy_coef
    frac = step / total_steps if total_steps > 0 else 1.0
    c2 = max(cfg.entropy_min, cfg.entropy_coef * (1.0 - frac))
    if current_entropy < 0.5 * np.log(num_actions):
        c2 = min(2.0 * c2, cfg.entropy_coef)
    return float(c2)


def ppo_loss(net, states, actions, old_log_probs, advantages, returns, cfg, c2):
    """Scalar PPO loss (no gradients); used by tests and diagnostics."""
    probs, values, cache = net.forward(states)
    logp = cache[6]
    idx = np.arange(len(actions))
    logp_a = logp[idx, actions]
    ratio = np.exp(logp_a - old_log_probs)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    policy_loss = -float(np.minimum(surr1, surr2).mean())
    value_loss = float(((values - returns) ** 2).mean())
    entropy = float((-(probs * logp).sum(axis=1)).mean())
    total = policy_loss + cfg.value_coef * value_loss - c2 * entropy
    return total, {"policy_loss": policy_loss, "value_loss": value_loss,
                   "entropy": entropy}


def _ppo_minibatch_step(net, states, actions, old_log_probs, advantages,
                        returns, cfg, c2):
    B = len(actions)
    probs, values, cache = net.forward(states)
    logp = cache[6]
    idx = np.arange(B)
    logp_a = logp[idx, actions]
    ratio = np.exp(logp_a - old_log_probs)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    unclipped = surr1 <= surr2  # ties flow through the unclipped branch
    policy_loss = -float(np.minimum(surr1, surr2).mean())
    value_loss = float(((values - returns) ** 2).mean())
    entropy_rows = -(probs * logp).sum(axis=1)
    entropy = float(entropy_rows.mean())

    # d(policy_loss)/d(logp_a), zero where the clipped branch is active
    dlogp_a = np.where(unclipped, ratio * advantages, 0.0) * (-1.0 / B)
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    dlogits = dlogp_a[:, None] * (onehot - probs)
    # entropy bonus: d(-c2 * mean H)/dlogits
    dlogits += (c2 / B) * probs * (logp + entropy_rows[:, None])
    dvalues = cfg.value_coef * 2.0 * (values - returns) / B

    net.store.zero_grads()
    net.backward(cache, dlogits, dvalues)
    net.store.clip_global_norm(cfg.grad_clip)
    net.store.adam_step(cfg.lr)
    clip_frac = float(np.mean(~unclipped))
    return {"policy_loss": policy_loss, "value_loss": value_loss,
            "entropy": entropy, "clip_fraction": clip_frac}


def ppo_update(net, batch, cfg, c2, seed=0, update_idx=0):
    """Run cfg.epochs shuffled-minibatch passes of clipped-surrogate PPO."""
    cfg.validate()
    B = len(batch)
    if B == 0:
        raise ValueError("empty transition batch")
    adv = batch.advantages
    adv_std = adv.std()
    norm_adv = (adv - adv.mean()) / (adv_std + 1e-8)
    degenerate = len(set(batch.actions.tolist())) == 1

    diagnostics = []
    for epoch in range(cfg.epochs):
        perm = stream(seed, "ppo-perm", update_idx, epoch).permutation(B)
        for start in range(0, B, cfg.minibatch):
            sel = perm[start:start + cfg.minibatch]
            diagnostics.append(_ppo_minibatch_step(
                net, batch.states[sel], batch.actions[sel],
                batch.log_probs[sel], norm_adv[sel], batch.returns[sel],
                cfg, c2))
    out = {key: float(np.mean([d[key] for d in diagnostics]))
           for key in diagnostics[0]}
    out["degenerate_actions"] = degenerate
    return out


# ---------------------------------------------------------------------------
# environment + training driver


class TtaEnvironment:
    """One-step decision environment over a frozen backbone.

    States, base ranks, and per-(user, action) augmented ranks depend only on
    keyed streams, so they are computed once and memoized.
    """

    def __init__(self, backbone, ds, split, actions, params, tta_cfg, seed,
                 popularity_pct, which="valid"):
        self.backbone = backbone
        self.ds = ds
        self.split = split
        self.actions = tuple(actions)
        self.params = params
        self.tta_cfg = tta_cfg
        self.seed = seed
        self.which = which
        self.index = build_similarity_index(backbone, params.similarity_top_k)
        self.users = split.users()
        states, base_ranks = [], []
        for u in self.users:
            seq = split.input_sequence(u, which)
            states.append(build_state(backbone, seq, popularity_pct).vector)
            base_ranks.append(base_predict(backbone, seq, split.target(u, which)).rank)
        self.state_matrix = np.stack(states)
        self.base_ranks = np.array(base_ranks, dtype=np.int64)
        self._aug_rank_memo = {}

    @property
    def state_dim(self):
        return self.state_matrix.shape[1]

    def augmented_rank(self, user_pos, action_idx):
        key = (user_pos, action_idx)
        if key not in self._aug_rank_memo:
            u = self.users[user_pos]
            seq = self.split.input_sequence(u, self.which)
            target = self.split.target(u, self.which)
            res = tta_predict(self.backbone, seq, target, self.actions[action_idx],
                              self.params, self.tta_cfg, self.seed,
                              self.ds.user_ids[u], index=self.index)
            self._aug_rank_memo[key] = res.rank
        return self._aug_rank_memo[key]


def collect_rollout(net, env, reward_cfg, batch_size, seed, update_idx):
    """Sample one batch of one-step transitions under the current policy."""
    reward_cfg.validate()
    pick = stream(seed, "rollout-users", update_idx)
    user_pos = pick.integers(0, len(env.users), size=batch_size)
    X = env.state_matrix[user_pos]
    probs, values, cache = net.forward(X)
    logp = cache[6]
    draws = stream(seed, "rollout-actions", update_idx).random(batch_size)
    cum = np.cumsum(probs, axis=1)
    actions = np.minimum((draws[:, None] < cum).argmax(axis=1), net.num_actions - 1)

    transitions = []
    for i in range(batch_size):
        pos = int(user_pos[i])
        a = int(actions[i])
        rank_base = int(env.base_ranks[pos])
        rank_aug = env.augmented_rank(pos, a)
        reward = reward_from_ranks(rank_base, rank_aug, reward_cfg)
        transitions.append(Transition(
            state=X[i], action=a, log_prob=float(logp[i, a]),
            value=float(values[i]), reward=reward))
    return TransitionBatch.from_transitions(transitions)


def train_policy(backbone, ds, split, actions, params, tta_cfg, reward_cfg,
                 ppo_cfg, seed, popularity_pct, which="valid", net=None):
    """PPO training loop; returns (net, env, per-update log records)."""
    ppo_cfg.validate()
    reward_cfg.validate()
    env = TtaEnvironment(backbone, ds, split, actions, params, tta_cfg, seed,
                         popularity_pct, which=which)
    if net is None:
        net = PolicyNet(env.state_dim, len(env.actions), rng_seed=seed)
    records = []
    for update in range(ppo_cfg.total_updates):
        batch = collect_rollout(net, env, reward_cfg, ppo_cfg.batch_size,
                                seed, update)
        probs, _, _ = net.forward(batch.states)
        entropy = float((-(probs * np.log(np.maximum(probs, 1e-300))).sum(axis=1)).mean())
        step = update * ppo_cfg.batch_size
        c2 = dynamic_entropy(step, ppo_cfg.total_env_steps, entropy,
                             len(env.actions), ppo_cfg)
        diag = ppo_update(net, batch, ppo_cfg, c2, seed=seed, update_idx=update)
        records.append({
            "update": update,
            "step": step + ppo_cfg.batch_size,
            "mean_reward": float(batch.rewards.mean()),
            "entropy": entropy,
            "policy_loss": diag["policy_loss"],
            "value_loss": diag["value_loss"],
            "clip_fraction": diag["clip_fraction"],
            "c2": c2,
        })
    return net, env, records


def write_training_log(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_adaptive(backbone, net, ds, split, actions, params, tta_cfg, seed,
                 popularity_pct, which="test", threads=1):
    """Greedy policy evaluation over a split; one chosen operator per user."""
    from concurrent.futures import ThreadPoolExecutor

    actions = tuple(actions)
    index = build_similarity_index(backbone, params.similarity_top_k)
    users = split.users()

    def one(u):
        seq = split.input_sequence(u, which)
        target = split.target(u, which)
        state = build_state(backbone, seq, popularity_pct)
        a = select_action(net, state.vector, mode="greedy")
        res = tta_predict(backbone, seq, target, actions[a], params, tta_cfg,
                          seed, ds.user_ids[u], index=index)
        return u, actions[a].value, res.rank

    if threads <= 1:
        triples = [one(u) for u in users]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            triples = list(pool.map(one, users))
    triples.sort(key=lambda t: t[0])
    rows = [(ds.user_ids[u], action_name, rank) for u, action_name, rank in triples]
    return RankingReport(rows=rows, summary=summarize(r for _, _, r in rows))
