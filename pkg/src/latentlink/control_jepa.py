"""Latent control dynamics: image encoder, recurrent state-space model and heads.

The model state is ``(h, z)``: a deterministic recurrent vector ``h`` and a
stochastic one-hot matrix ``z`` of ``groups`` categoricals with ``classes``
classes each. Frames only enter through the posterior; the prior and the
heads see ``(h, z)`` alone, so imagination never touches pixels.

Sequence conventions (per time step ``t`` of a stored episode):

* ``frames[t]`` is the observation after the transition into step ``t``;
* ``actions[t]`` is the action that led *into* ``frames[t]`` (-1 at reset);
* ``rewards[t]`` and ``terminals[t]`` belong to that same transition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .substrate import functional as F
from .substrate import nn
from .substrate import tensor as T
from .substrate.tensor import Tensor


@dataclass(frozen=True)
class ControlJepaConfig:
    frame_size: int = 84
    n_actions: int = 5
    feature_size: int = 400
    hidden_size: int = 300
    groups: int = 32
    classes: int = 32
    kl_scale: float = 0.5
    kl_balance: float = 0.8
    lr: float = 2e-4
    batch_size: int = 32
    horizon: int = 50
    clip_norm: float = 100.0
    head_units: int = 100
    gamma: float = 0.99
    weight_decay: float = 0.0
    reward_scale: float = 1000.0

    def __post_init__(self):
        if not 0.0 <= self.kl_balance <= 1.0:
            raise ValueError("kl_balance must lie in [0, 1]")
        if self.kl_scale < 0:
            raise ValueError("kl_scale must be non-negative")
        if self.groups < 2 or self.classes < 2:
            raise ValueError("need at least 2 groups and 2 classes")
        if encoder_output_side(self.frame_size) < 1:
            raise ValueError(f"frame size {self.frame_size} too small for the encoder")

    @property
    def stoch_size(self) -> int:
        return self.groups * self.classes

    @property
    def latent_size(self) -> int:
        return self.hidden_size + self.stoch_size


def encoder_output_side(frame_size: int) -> int:
    side = frame_size
    for k, s in ((8, 4), (4, 2), (2, 2)):
        side = (side - k) // s + 1
    return side


@dataclass
class LatentControlState:
    h: np.ndarray          # (B, hidden)
    z: np.ndarray          # (B, groups, classes) one-hot
    z_logits: np.ndarray   # (B, groups, classes)

    @property
    def feature(self) -> np.ndarray:
        return flat_latent(self.h, self.z)

    def __len__(self):
        return self.h.shape[0]

    def take(self, idx) -> "LatentControlState":
        return LatentControlState(self.h[idx], self.z[idx], self.z_logits[idx])


@dataclass
class HeadOutputs:
    reward: np.ndarray
    discount: np.ndarray   # continuation probability in [0, 1]


def flat_latent(h, z):
    """Concatenate ``h`` and the flattened ``z`` along the last axis (arrays or tensors)."""
    if isinstance(h, Tensor) or isinstance(z, Tensor):
        z = T.as_tensor(z)
        return T.concat([T.as_tensor(h), z.reshape(*z.shape[:-2], -1)], axis=-1)
    z = np.asarray(z)
    return np.concatenate([h, z.reshape(*z.shape[:-2], -1)], axis=-1)


def one_hot(actions, n: int, dtype=None) -> np.ndarray:
    """One-hot rows for integer actions; negative entries (no action) become all-zero rows."""
    actions = np.asarray(actions)
    out = np.zeros(actions.shape + (n,), dtype=dtype or T.get_default_dtype())
    valid = actions >= 0
    out[valid, actions[valid]] = 1.0
    return out


class ImageEncoder(nn.Module):
    """Three strided convolutions then two dense layers, all with layer norm and ELU."""

    def __init__(self, cfg: ControlJepaConfig, rng: np.random.Generator):
        self.frame_size = cfg.frame_size
        self.convs = [nn.Conv2d(1, 16, 8, 4, rng), nn.Conv2d(16, 32, 4, 2, rng), nn.Conv2d(32, 64, 2, 2, rng)]
        self.conv_norms = [nn.LayerNorm(16), nn.LayerNorm(32), nn.LayerNorm(64)]
        side = encoder_output_side(cfg.frame_size)
        self.head = nn.MLP(64 * side * side, (1024, 256, cfg.feature_size), None, rng)
        self.calls = 0

    def __call__(self, frames) -> Tensor:
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        if frames.shape[-2:] != (self.frame_size, self.frame_size):
            raise ValueError(f"expected {self.frame_size}x{self.frame_size} frames, got {frames.shape[-2:]}")
        self.calls += 1
        lead = frames.shape[:-2]
        x = Tensor(frames.reshape(-1, 1, self.frame_size, self.frame_size) - 0.5)
        for conv, norm in zip(self.convs, self.conv_norms):
            # channel-wise layer norm at every spatial position
            x = conv(x).transpose(0, 2, 3, 1)
            x = T.elu(norm(x)).transpose(0, 3, 1, 2)
        x = self.head(x.reshape(x.shape[0], -1))
        return x.reshape(*lead, x.shape[-1])


class ControlJepa(nn.Module):
    def __init__(self, cfg: ControlJepaConfig, rng: np.random.Generator):
        self.cfg = cfg
        m = cfg.feature_size
        self.encoder = ImageEncoder(cfg, rng)
        self.gru_in = nn.MLP(cfg.stoch_size + cfg.n_actions, (m,), None, rng)
        self.gru = nn.GRUCell(m, cfg.hidden_size, rng)
        self.post_hidden = nn.Dense(cfg.feature_size + cfg.hidden_size, m, rng)
        self.post_norm = nn.BatchNorm(m)
        self.post_out = nn.Dense(m, cfg.stoch_size, rng)
        self.prior_net = nn.MLP(cfg.hidden_size, (m,), cfg.stoch_size, rng)
        units = (cfg.head_units,) * 3
        self.reward_head = nn.MLP(cfg.latent_size, units, 1, rng)
        self.discount_head = nn.MLP(cfg.latent_size, units, 1, rng)

    # -- building blocks ------------------------------------------------------------
    def encode_image(self, frames) -> Tensor:
        return self.encoder(frames)

    def recurrent_step(self, h_prev, z_prev, a_prev) -> Tensor:
        cfg = self.cfg
        h_prev, z_prev, a_prev = T.as_tensor(h_prev), T.as_tensor(z_prev), T.as_tensor(a_prev)
        if h_prev.shape[-1] != cfg.hidden_size or z_prev.shape[-2:] != (cfg.groups, cfg.classes) \
                or a_prev.shape[-1] != cfg.n_actions:
            raise ValueError("recurrent_step input shapes do not match the configuration")
        x = T.concat([z_prev.reshape(z_prev.shape[0], -1), a_prev], axis=-1)
        return self.gru(self.gru_in(x), h_prev)

    def _logits(self, flat: Tensor) -> Tensor:
        return flat.reshape(flat.shape[0], self.cfg.groups, self.cfg.classes)

    def posterior(self, h, x) -> Tensor:
        hid = self.post_hidden(T.concat([T.as_tensor(x), T.as_tensor(h)], axis=-1))
        return self._logits(self.post_out(T.elu(self.post_norm(hid))))

    def prior(self, h) -> Tensor:
        h = T.as_tensor(h)
        flat = self.prior_net(h.reshape(-1, h.shape[-1]))
        return flat.reshape(*h.shape[:-1], self.cfg.groups, self.cfg.classes)

    def head_logits(self, feat) -> tuple[Tensor, Tensor]:
        """Reward mean and continuation logit for latent features of any leading shape."""
        feat = T.as_tensor(feat)
        flat = feat.reshape(-1, feat.shape[-1])
        lead = feat.shape[:-1]
        return self.reward_head(flat).reshape(*lead), self.discount_head(flat).reshape(*lead)

    def predict_heads(self, h, z) -> HeadOutputs:
        with T.no_grad():
            r, d = self.head_logits(flat_latent(T.as_tensor(h), T.as_tensor(z)))
        return HeadOutputs(r.data.copy(), T.sigmoid(d).data.copy())

    def initial_state(self, batch: int, rng: np.random.Generator) -> LatentControlState:
        """``h = 0`` and ``z`` sampled from the prior at ``h = 0``."""
        h = np.zeros((batch, self.cfg.hidden_size), dtype=T.get_default_dtype())
        with T.no_grad():
            logits = self.prior(h).data
        return LatentControlState(h, F.sample_categorical(T.softmax(logits).data, rng), logits)

    # -- sequences ----------------------------------------------------------------------
    def observe_sequence(self, frames, actions, start: LatentControlState,
                         rng: np.random.Generator) -> list:
        """Filter a (T, B, H, W) frame sequence into posterior latents (no gradients).

        ``actions[t]`` is the action taken just before ``frames[t]``.
        """
        frames = np.asarray(frames)
        actions = np.asarray(actions)
        if len(frames) != len(actions):
            raise ValueError("frames and actions must have equal length")
        out = []
        if len(frames) == 0:
            return out
        state = start
        with T.no_grad():
            feats = self.encode_image(frames).data
            for t in range(len(frames)):
                a = one_hot(actions[t], self.cfg.n_actions)
                h = self.recurrent_step(state.h, state.z, a).data
                logits = self.posterior(h, feats[t]).data
                z = F.sample_categorical(T.softmax(logits).data, rng)
                state = LatentControlState(h, z, logits)
                out.append(state)
        return out

    def imagine_step(self, state: LatentControlState, actions, rng) -> LatentControlState:
        with T.no_grad():
            h = self.recurrent_step(state.h, state.z, one_hot(actions, self.cfg.n_actions)).data
            logits = self.prior(h).data
        return LatentControlState(h, F.sample_categorical(T.softmax(logits).data, rng), logits)

    def imagine(self, start: LatentControlState, policy, horizon: int, rng: np.random.Generator):
        """Roll the prior forward under ``policy``; see :class:`ImaginedTrajectory`.

        ``policy(feature, rng)`` returns integer actions for a (B, latent) array.
        """
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        hs, zs, acts, rewards, discounts = [], [], [], [], []
        state = start
        for _ in range(horizon):
            hs.append(state.h)
            zs.append(state.z)
            a = np.asarray(policy(state.feature, rng))
            acts.append(a)
            state = self.imagine_step(state, a, rng)
            heads = self.predict_heads(state.h, state.z)
            rewards.append(heads.reward)
            discounts.append(heads.discount)
        return ImaginedTrajectory(np.stack(hs), np.stack(zs), np.stack(acts),
                                  np.stack(rewards), np.stack(discounts), state)


@dataclass
class ImaginedTrajectory:
    """Time-major imagined rollout of length H.

    Entry ``t`` holds the state ``s_t``, the action ``a_t`` chosen there, and
    the predicted reward and continuation probability of the transition
    ``s_t -> s_{t+1}``. ``last`` is the state after the final action.
    """

    h: np.ndarray
    z: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discounts: np.ndarray
    last: LatentControlState

    def __len__(self):
        return len(self.actions)

    @property
    def features(self) -> np.ndarray:
        return flat_latent(self.h, self.z)

    def successors(self) -> tuple[np.ndarray, np.ndarray]:
        """``(h, z)`` of ``s_1..s_H``: the states reached after each action."""
        return (np.concatenate([self.h[1:], self.last.h[None]]),
                np.concatenate([self.z[1:], self.last.z[None]]))

    def state_at(self, t: int) -> LatentControlState:
        return LatentControlState(self.h[t], self.z[t], np.zeros_like(self.z[t]))


@dataclass
class ExperienceBatch:
    """Aligned (B, T, ...) windows from replay."""

    frames: np.ndarray
    actions: np.ndarray      # action that led into each frame, -1 at reset
    rewards: np.ndarray
    terminals: np.ndarray
    channels: np.ndarray | None = None
    positions: np.ndarray | None = None

    def __post_init__(self):
        b, t = self.frames.shape[:2]
        for name in ("actions", "rewards", "terminals"):
            if getattr(self, name).shape != (b, t):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(b, t)}")
        if self.channels is not None and self.channels.shape[:2] != (b, t):
            raise ValueError("channels are not aligned with frames")

    @property
    def shape(self):
        return self.frames.shape[:2]


@dataclass
class WorldModelOutput:
    loss: Tensor
    kl: float
    reward_nll: float
    termination_nll: float
    h: np.ndarray                 # (B, T, hidden) posterior states, detached
    z: np.ndarray                 # (B, T, groups, classes)
    post_logits: np.ndarray


def world_model_loss(model: ControlJepa, batch: ExperienceBatch, rng: np.random.Generator,
                     straight_through: bool = True, start: LatentControlState | None = None,
                     balanced: bool = True) -> WorldModelOutput:
    """KL-balanced latent loss plus reward and termination likelihoods, averaged over (B, T).

    Reward targets are multiplied by ``cfg.reward_scale``; the reward head and
    everything trained on imagined rewards work in those scaled units.

    Windows start from ``h = 0`` and a prior sample at ``h = 0`` unless ``start`` is given.
    ``balanced=False`` swaps in the plain KL (same value, unsplit gradients) so the
    loss is an ordinary function for finite-difference checks.
    """
    cfg = model.cfg
    b, t_len = batch.shape
    feats = model.encode_image(batch.frames)                       # (B, T, feature)
    act = one_hot(batch.actions, cfg.n_actions)
    state = start if start is not None else model.initial_state(b, rng)
    h, z = T.as_tensor(state.h), T.as_tensor(state.z)
    hs, zs, posts = [], [], []
    for t in range(t_len):
        h = model.recurrent_step(h, z, act[:, t])
        logits = model.posterior(h, feats[:, t])
        z = F.straight_through_categorical(logits, rng, straight_through)
        hs.append(h)
        zs.append(z)
        posts.append(logits)
    h_seq = T.stack(hs, axis=1)
    z_seq = T.stack(zs, axis=1)
    post = T.stack(posts, axis=1)
    prior = model.prior(h_seq)
    kl = F.kl_balanced(post, prior, cfg.kl_balance) if balanced else F.kl_categorical(post, prior)
    reward_mean, disc_logit = model.head_logits(flat_latent(h_seq, z_seq))
    reward_nll = F.gaussian_nll(reward_mean, cfg.reward_scale * batch.rewards)
    labels = np.where(batch.terminals, 0.0, cfg.gamma)
    term_nll = F.bernoulli_nll(disc_logit, labels)
    total = T.mean(cfg.kl_scale * kl + reward_nll + term_nll)
    return WorldModelOutput(
        total, float(kl.data.mean()), float(reward_nll.data.mean()), float(term_nll.data.mean()),
        h_seq.data.copy(), z_seq.data.copy(), post.data.copy())
