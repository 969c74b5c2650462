"""Actor-critic trained on imagined latent trajectories.

Both heads read the full latent ``(h, z)``. The critic regresses lambda-return
targets bootstrapped from a slow copy of itself; the actor uses a reinforce
estimator with the online critic as baseline plus an entropy bonus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control_jepa import ImaginedTrajectory
from .substrate import Adam
from .substrate import functional as F
from .substrate import nn
from .substrate import tensor as T
from .substrate.tensor import Tensor


@dataclass(frozen=True)
class AgentConfig:
    actor_lr: float = 4e-5
    critic_lr: float = 1e-4
    lam: float = 0.95
    entropy_scale: float = 1e-3
    target_interval: int = 1500
    horizon: int = 50
    units: int = 100
    clip_norm: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.entropy_scale < 0:
            raise ValueError("entropy scale must be non-negative")
        if self.target_interval < 1:
            raise ValueError("target interval must be positive")


@dataclass
class PolicyOutput:
    logits: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray
    entropy: np.ndarray


def lambda_returns(rewards, discounts, values, lam: float) -> np.ndarray:
    """Backward recursion ``R_t = r_t + g_t((1-lam) v_{t+1} + lam R_{t+1})`` with ``R_H = v_H``.

    Time runs along axis 0; any trailing batch shape is allowed.
    """
    r, g, v = (np.asarray(x, dtype=np.float64) for x in (rewards, discounts, values))
    if not (r.shape == g.shape == v.shape):
        raise ValueError("rewards, discounts and values must share a shape")
    if len(r) == 0:
        raise ValueError("empty sequence")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    out = np.empty_like(v)
    out[-1] = v[-1]
    for t in range(len(r) - 2, -1, -1):
        out[t] = r[t] + g[t] * ((1.0 - lam) * v[t + 1] + lam * out[t + 1])
    return out


class ActorCritic(nn.Module):
    def __init__(self, latent_size: int, n_actions: int, cfg: AgentConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.n_actions = n_actions
        units = (cfg.units,) * 3
        self.actor = nn.MLP(latent_size, units, n_actions, rng)
        self.critic = nn.MLP(latent_size, units, 1, rng)
        self.target_critic = nn.MLP(latent_size, units, 1, rng)
        self.target_critic.load_state(self.critic.state())
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr, clip_norm=cfg.clip_norm)
        self.critic_opt = Adam(self.critic.params, cfg.critic_lr, clip_norm=cfg.clip_norm)
        self.updates = 0

    # -- inference ---------------------------------------------------------------------
    def act(self, feature, rng: np.random.Generator | None = None, mode: str = "sample") -> PolicyOutput:
        with T.no_grad():
            logits = self.actor(T.as_tensor(np.atleast_2d(feature))).data
        logp = T.log_softmax(logits).data
        probs = np.exp(logp)
        if mode == "greedy":
            action = logits.argmax(axis=-1)
        elif mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs a generator")
            action = F.sample_categorical(probs, rng).argmax(axis=-1)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        entropy = -(probs * logp).sum(axis=-1)
        return PolicyOutput(logits, action, np.take_along_axis(logp, action[:, None], -1)[:, 0], entropy)

    def policy(self, mode: str = "sample"):
        """Adapter for :meth:`ControlJepa.imagine`."""
        return lambda feature, rng: self.act(feature, rng, mode).action

    def critic_value(self, feature, target: bool = False) -> np.ndarray:
        net = self.target_critic if target else self.critic
        with T.no_grad():
            return _value(net, feature).data.copy()

    # -- losses -----------------------------------------------------------------------
    def targets(self, traj: ImaginedTrajectory) -> np.ndarray:
        """Lambda returns over the trajectory using slow-critic bootstraps."""
        v = self.critic_value(traj.features, target=True)
        return lambda_returns(traj.rewards, traj.discounts, v, self.cfg.lam)

    def critic_loss(self, traj: ImaginedTrajectory, returns: np.ndarray | None = None) -> Tensor:
        """``0.5 * sum_{t<H} (v(s_t) - sg(R_t))^2``, averaged over the batch."""
        returns = self.targets(traj) if returns is None else returns
        v = _value(self.critic, traj.features[:-1])
        diff = v - T.stop_gradient(Tensor(returns[:-1], dtype=v.dtype))
        return 0.5 * T.sum_(T.mean(diff * diff, axis=-1))

    def actor_loss(self, traj: ImaginedTrajectory, returns: np.ndarray | None = None) -> Tensor:
        """Reinforce with the online critic as baseline, minus the entropy bonus."""
        returns = self.targets(traj) if returns is None else returns
        feats = traj.features[:-1]
        logp = T.log_softmax(self.actor(T.as_tensor(feats.reshape(-1, feats.shape[-1]))), axis=-1)
        logp = logp.reshape(*feats.shape[:-1], self.n_actions)
        chosen = one_hot_like(traj.actions[:-1], self.n_actions, logp.dtype)
        log_pi = T.sum_(logp * chosen, axis=-1)
        with T.no_grad():
            baseline = _value(self.critic, feats).data
        advantage = (returns[:-1] - baseline).astype(logp.dtype)
        entropy = -T.sum_(T.exp(logp) * logp, axis=-1)
        per_step = -log_pi * advantage - self.cfg.entropy_scale * entropy
        return T.sum_(T.mean(per_step, axis=-1))

    # -- updates ---------------------------------------------------------------------
    def update(self, traj: ImaginedTrajectory) -> dict:
        returns = self.targets(traj)
        self.critic_opt.zero_grad()
        c_loss = self.critic_loss(traj, returns)
        c_loss.backward()
        self.critic_opt.step()
        self.actor_opt.zero_grad()
        a_loss = self.actor_loss(traj, returns)
        a_loss.backward()
        self.actor_opt.step()
        self.updates += 1
        self.slow_target_sync(self.updates)
        with T.no_grad():
            logits = self.actor(T.as_tensor(traj.features[0])).data
        logp = T.log_softmax(logits).data
        return {"critic_loss": float(c_loss.data), "actor_loss": float(a_loss.data),
                "entropy": float(-(np.exp(logp) * logp).sum(-1).mean()),
                "value": float(returns[0].mean()), "imag_reward": float(traj.rewards.mean())}

    def slow_target_sync(self, step: int) -> bool:
        """Hard-copy the online critic into the slow target every ``target_interval`` steps."""
        if step > 0 and step % self.cfg.target_interval == 0:
            self.target_critic.load_state(self.critic.state())
            return True
        return False


def _value(net: nn.MLP, feature) -> Tensor:
    x = T.as_tensor(np.asarray(feature))
    lead = x.shape[:-1]
    return net(x.reshape(-1, x.shape[-1])).reshape(*lead)


def one_hot_like(actions, n: int, dtype) -> np.ndarray:
    actions = np.asarray(actions)
    out = np.zeros(actions.shape + (n,), dtype=dtype)
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out
