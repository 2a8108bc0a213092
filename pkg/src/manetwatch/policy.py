"""Shared actor/critic networks and the clipped PPO update."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cq import obs_dim
from .nn import MLP, Adam

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Non-finite gradient or parameter during an update."""


@dataclass
class PpoHyperparams:
    gamma: float = 0.99
    lam: float = 0.0
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    entropy_coef: float = 0.01
    hidden: tuple = (64, 64)
    monitor_td: bool = True  # TD(0) advantages are what the detector watches

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.monitor_td and self.lam != 0.0:
            raise ValueError("lambda must be 0 when TD errors are monitored")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip <= 0 or self.epochs < 0 or self.minibatch < 1:
            raise ValueError("bad clip / epochs / minibatch")
        self.hidden = tuple(int(h) for h in self.hidden)


class PolicyParams(MLP):
    """Actor: observation -> logits over [BROADCAST, unicast slot 0..K-1]."""

    @classmethod
    def create(cls, k_max: int, hidden=(64, 64), rng=None):
        net = cls((obs_dim(k_max), *hidden, k_max + 1), rng=rng, out_scale=0.01)
        net.k_max = k_max
        return net

    def copy(self):
        net = super().copy()
        net.__class__ = type(self)
        net.k_max = self.k_max
        return net


class ValueParams(MLP):
    """Critic: observation -> V(s)."""

    @classmethod
    def create(cls, k_max: int, hidden=(64, 64), rng=None):
        net = cls((obs_dim(k_max), *hidden, 1), rng=rng)
        net.k_max = k_max
        return net

    def copy(self):
        net = super().copy()
        net.__class__ = type(self)
        net.k_max = self.k_max
        return net


def masked_log_softmax(logits, mask):
    """Log-probabilities with invalid entries at exactly -inf."""
    logits = np.atleast_2d(logits)
    mask = np.atleast_2d(mask).astype(bool)
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one valid action")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def action_probs(actor: PolicyParams, obs, mask):
    return np.exp(masked_log_softmax(actor.forward(obs), mask))


def act(actor: PolicyParams, obs, mask, rng: Optional[np.random.Generator] = None, greedy=False):
    """Sample actions for a batch of observations.

    Returns (actions, logprobs) as arrays; a single observation gives length-1 arrays.
    """
    logp = masked_log_softmax(actor.forward(obs), mask)
    if greedy:
        a = logp.argmax(axis=1)
    else:
        probs = np.exp(logp)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(len(probs))[:, None] * cdf[:, -1:]
        a = (cdf <= u).sum(axis=1)
        # u rounding up to the total mass: fall back to the last supported action
        over = a >= probs.shape[1]
        if over.any():
            last = probs.shape[1] - 1 - np.argmax((probs > 0)[:, ::-1], axis=1)
            a[over] = last[over]
    return a, logp[np.arange(len(a)), a]


def value(critic: ValueParams, obs) -> np.ndarray:
    return critic.forward(obs)[:, 0]


@dataclass
class TransitionBatch:
    """Column-stored transitions (s, a, logp, r, s', done) for many node-slots."""

    obs: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    nodes: np.ndarray
    slots: np.ndarray
    episodes: np.ndarray = None

    def __post_init__(self):
        if self.episodes is None:
            self.episodes = np.zeros(len(self.rewards), dtype=int)

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def concat(cls, batches: Sequence["TransitionBatch"]):
        batches = list(batches)
        offset, eps = 0, []
        for b in batches:
            eps.append(b.episodes + offset)
            offset += int(b.episodes.max()) + 1 if len(b) else 0
        cols = {f: np.concatenate([getattr(b, f) for b in batches])
                for f in ("obs", "mask", "actions", "logprobs", "rewards", "next_obs", "dones",
                          "nodes", "slots")}
        return cls(**cols, episodes=np.concatenate(eps))


def gae(rewards, values, next_values, dones, gamma, lam):
    """Advantages A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1} along one ordered trajectory."""
    rewards = np.asarray(rewards, dtype=float)
    delta = rewards + gamma * np.asarray(next_values) * (1.0 - np.asarray(dones, dtype=float)) \
        - np.asarray(values)
    if lam == 0.0:
        return delta
    adv = np.empty_like(delta)
    running = 0.0
    for t in range(len(delta) - 1, -1, -1):
        running = delta[t] + gamma * lam * (0.0 if dones[t] else 1.0) * running
        adv[t] = running
    return adv


def compute_advantages(batch: TransitionBatch, critic: ValueParams, hp: PpoHyperparams):
    """(advantages, returns) for every transition.

    Trajectories are the (episode, node) sequences ordered by slot; with lambda = 0
    the advantage is the one-step TD error r + gamma V(s') - V(s).
    """
    if len(batch) == 0:
        return np.zeros(0), np.zeros(0)
    v = value(critic, batch.obs)
    v_next = value(critic, batch.next_obs)
    if hp.lam == 0.0:
        adv = gae(batch.rewards, v, v_next, batch.dones, hp.gamma, 0.0)
    else:
        adv = np.empty(len(batch))
        order = np.lexsort((batch.slots, batch.nodes, batch.episodes))
        keys = np.stack([batch.episodes[order], batch.nodes[order]], 1)
        cuts = np.flatnonzero((np.diff(keys, axis=0) != 0).any(1)) + 1
        for seg in np.split(order, cuts):
            adv[seg] = gae(batch.rewards[seg], v[seg], v_next[seg], batch.dones[seg],
                           hp.gamma, hp.lam)
    return adv, adv + v


def policy_loss_and_grad(actor: PolicyParams, obs, mask, actions, logp_old, adv, clip, entropy_coef):
    """Negated clipped surrogate minus entropy bonus, with its parameter gradient."""
    logits, acts = actor.forward(obs, keep=True)
    logp_all = masked_log_softmax(logits, mask)
    probs = np.exp(logp_all)
    rows = np.arange(len(actions))
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1 - clip, 1 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    plogp = np.where(probs > 0, probs * np.where(probs > 0, logp_all, 0.0), 0.0)
    entropy = -plogp.sum(axis=1)
    b = len(actions)
    loss = -surr.mean() - entropy_coef * entropy.mean()

    unclipped = ratio * adv <= clipped * adv
    dlogp = -(adv * ratio * unclipped) / b
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    safe_logp = np.where(probs > 0, logp_all, 0.0)
    dent = -probs * (safe_logp + entropy[:, None])
    dlogits -= entropy_coef * dent / b
    grads = actor.backward(acts, dlogits)
    stats = {
        "policy_loss": float(loss),
        "entropy": float(entropy.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > clip)),
        "approx_kl": float(np.mean(logp_old - logp)),
    }
    return loss, grads, stats


def value_loss_and_grad(critic: ValueParams, obs, returns):
    """0.5 * mean squared error of V(s) against return targets."""
    out, acts = critic.forward(obs, keep=True)
    err = out[:, 0] - returns
    loss = 0.5 * np.mean(err ** 2)
    grads = critic.backward(acts, (err / len(err))[:, None])
    return loss, grads


def _check(grads, what):
    for g in grads:
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite {what} gradient; check learning rates")


def ppo_update(actor: PolicyParams, critic: ValueParams, batch: TransitionBatch, hp: PpoHyperparams,
               rng: np.random.Generator, optimizers=None, advantages=None, returns=None):
    """Run ``hp.epochs`` passes of minibatch PPO.  Inputs are not modified.

    ``optimizers`` is an (actor Adam, critic Adam) pair kept by the caller so moment
    estimates persist between iterations.  Returns (actor', critic', stats).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if advantages is None or returns is None:
        advantages, returns = compute_advantages(batch, critic, hp)
    adv = advantages - advantages.mean()
    std = adv.std()
    if std > 0:
        adv = adv / (std + 1e-8)
    new_actor, new_critic = actor.copy(), critic.copy()
    if optimizers is None:
        optimizers = (Adam(new_actor.params, hp.lr_actor), Adam(new_critic.params, hp.lr_critic))
    opt_a, opt_c = optimizers

    stats_acc, vlosses = [], []
    n = len(batch)
    for _ in range(hp.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hp.minibatch):
            idx = perm[start:start + hp.minibatch]
            _, ga, st = policy_loss_and_grad(new_actor, batch.obs[idx], batch.mask[idx],
                                              batch.actions[idx], batch.logprobs[idx], adv[idx],
                                              hp.clip, hp.entropy_coef)
            vl, gc = value_loss_and_grad(new_critic, batch.obs[idx], returns[idx])
            _check(ga, "policy")
            _check(gc, "value")
            opt_a.step(new_actor.params, ga)
            opt_c.step(new_critic.params, gc)
            stats_acc.append(st)
            vlosses.append(vl)
    if not (new_actor.all_finite() and new_critic.all_finite()):
        raise TrainingDiverged("parameters became non-finite")
    stats = {k: float(np.mean([s[k] for s in stats_acc])) for k in stats_acc[0]} if stats_acc else {}
    stats["value_loss"] = float(np.mean(vlosses)) if vlosses else float("nan")
    return new_actor, new_critic, stats


def save_checkpoint(path, actor: PolicyParams, critic: ValueParams, hp: PpoHyperparams, extra=None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "k_max": actor.k_max,
        "hyperparams": asdict(hp),
        "actor": {"sizes": list(actor.sizes), "params": [p.ravel().tolist() for p in actor.params]},
        "critic": {"sizes": list(critic.sizes), "params": [p.ravel().tolist() for p in critic.params]},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def _restore(cls, blob, k_max):
    sizes = tuple(blob["sizes"])
    net = cls(sizes)
    net.k_max = k_max
    if len(blob["params"]) != len(net.params):
        raise ValueError("checkpoint layer count mismatch")
    for i, flat in enumerate(blob["params"]):
        arr = np.asarray(flat, dtype=float)
        if arr.size != net.params[i].size:
            raise ValueError(f"checkpoint shape mismatch at parameter {i}")
        net.params[i] = arr.reshape(net.params[i].shape)
    return net


def load_checkpoint(path, k_max: Optional[int] = None):
    """Returns (actor, critic, hp, extra).  Rejects version or shape mismatches."""
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    ck = int(doc["k_max"])
    if k_max is not None and ck != k_max:
        raise ValueError(f"checkpoint built for k_max={ck}, scenario wants {k_max}")
    hp = PpoHyperparams(**doc["hyperparams"])
    actor = _restore(PolicyParams, doc["actor"], ck)
    critic = _restore(ValueParams, doc["critic"], ck)
    if actor.sizes != (obs_dim(ck), *hp.hidden, ck + 1) or critic.sizes != (obs_dim(ck), *hp.hidden, 1):
        raise ValueError("checkpoint layer shapes do not match k_max / hidden sizes")
    return actor, critic, hp, doc.get("extra", {})
