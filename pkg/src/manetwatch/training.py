"""Centralised PPO training of the shared routing policy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ScenarioConfig
from .nn import Adam
from .policy import PolicyParams, PpoHyperparams, TransitionBatch, ValueParams, compute_advantages, ppo_update
from .rollout import simulate

log = logging.getLogger(__name__)


def hyperparams_from(cfg: ScenarioConfig) -> PpoHyperparams:
    p = cfg.ppo
    return PpoHyperparams(gamma=p.gamma, lam=0.0, clip=p.clip, epochs=p.epochs, minibatch=p.minibatch,
                          lr_actor=p.lr_actor, lr_critic=p.lr_critic, entropy_coef=p.entropy_coef,
                          hidden=tuple(p.hidden))


@dataclass
class TrainResult:
    actor: PolicyParams
    critic: ValueParams
    log: list = field(default_factory=list)

    def log_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def train(cfg: ScenarioConfig, hp: Optional[PpoHyperparams] = None, seed: int = 0,
          iterations: Optional[int] = None, episodes_per_iter: Optional[int] = None) -> TrainResult:
    """Rollout -> TD(0) advantages -> PPO update, repeated.

    Every node's transitions land in one pooled batch and update the same actor and
    critic.  Episodes are drawn from the nominal family with mobility, area and
    traffic randomised per ``cfg.randomize``.
    """
    if not cfg.nominal:
        raise ValueError("training scenarios must be anomaly-free")
    hp = hp or hyperparams_from(cfg)
    iterations = cfg.ppo.iterations if iterations is None else iterations
    episodes_per_iter = cfg.ppo.episodes_per_iter if episodes_per_iter is None else episodes_per_iter
    ss = np.random.SeedSequence(seed)
    init_seed, update_seed, episode_seed = ss.spawn(3)
    init_rng = np.random.default_rng(init_seed)
    k_max = cfg.routing.k_max
    actor = PolicyParams.create(k_max, hp.hidden, init_rng)
    critic = ValueParams.create(k_max, hp.hidden, init_rng)
    opts = (Adam(actor.params, hp.lr_actor), Adam(critic.params, hp.lr_critic))
    update_rng = np.random.default_rng(update_seed)
    ep_seeds = np.random.default_rng(episode_seed).integers(0, 2**31 - 1, size=(max(iterations, 0), episodes_per_iter))

    history = []
    for it in range(iterations):
        results = [simulate(cfg, int(s), actor=actor, randomize=True) for s in ep_seeds[it]]
        batch = TransitionBatch.concat([r.batch for r in results])
        if len(batch) == 0:
            continue
        adv, ret = compute_advantages(batch, critic, hp)
        actor, critic, stats = ppo_update(actor, critic, batch, hp, update_rng,
                                          optimizers=opts, advantages=adv, returns=ret)
        rec = {
            "iteration": it,
            "transitions": len(batch),
            "mean_reward": float(batch.rewards.mean()),
            "delivery_ratio": float(np.mean([r.metrics["delivery_ratio"] for r in results])),
            **stats,
        }
        history.append(rec)
        log.info("iter %d  reward %.3f  delivery %.3f  vloss %.3f", it, rec["mean_reward"],
                 rec["delivery_ratio"], rec["value_loss"])
    return TrainResult(actor, critic, history)
