"""Latent channel dynamics conditioned on the control latent.

An online encoder maps an interleaved channel vector to a small embedding.
A recurrent predictor guesses the next embedding from the previous one and
the control latent ``(h, z)``; its targets come from an EMA copy of the
encoder that never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control_jepa import ImaginedTrajectory, flat_latent
from .substrate import functional as F
from .substrate import nn
from .substrate.params import ParameterSet
from .substrate import tensor as T
from .substrate.tensor import Tensor

ENCODER_WIDTHS = (1024, 512, 256, 128, 64)


@dataclass(frozen=True)
class WirelessJepaConfig:
    input_width: int = 1280
    embed_size: int = 16
    predictor_size: int = 256
    head_units: int = 64
    lr: float = 5e-3
    lr_decay: float = 0.97
    batch_size: int = 100
    ema_decay: float = 0.99
    weight_decay: float = 3e-3
    horizon: int = 50
    clip_norm: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        if self.embed_size < 2:
            raise ValueError("embedding size must be at least 2")


class ChannelEncoder(nn.Module):
    def __init__(self, cfg: WirelessJepaConfig, rng: np.random.Generator):
        self.input_width = cfg.input_width
        self.net = nn.MLP(cfg.input_width, ENCODER_WIDTHS, cfg.embed_size, rng, norm="batch", act="relu")

    def __call__(self, g) -> Tensor:
        g = T.as_tensor(g)
        if g.shape[-1] != self.input_width:
            raise ValueError(f"expected channel vectors of width {self.input_width}, got {g.shape[-1]}")
        lead = g.shape[:-1]
        out = self.net(g.reshape(-1, self.input_width))
        return out.reshape(*lead, out.shape[-1])


class WirelessJepa(nn.Module):
    def __init__(self, cfg: WirelessJepaConfig, latent_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.latent_size = latent_size
        self.encoder = ChannelEncoder(cfg, rng)
        self.target = ChannelEncoder(cfg, rng)
        self.gru = nn.GRUCell(cfg.embed_size + latent_size, cfg.predictor_size, rng)
        self.head = nn.MLP(cfg.predictor_size, (cfg.head_units,), cfg.embed_size, rng, norm="none", act="relu")
        self.sync_target()

    @property
    def online_params(self):
        """Encoder, predictor and output head: everything trained by gradient."""
        ps = ParameterSet()
        for prefix, mod in (("encoder.", self.encoder), ("gru.", self.gru), ("head.", self.head)):
            for k, t in mod.named_parameters(prefix):
                ps.add(k, t)
        return ps

    def sync_target(self) -> None:
        """Copy online encoder weights and statistics into the target."""
        self.target.load_state(self.encoder.state())

    def ema_step(self) -> None:
        F.ema_update(self.target.params, self.encoder.params, self.cfg.ema_decay)
        # normalization statistics are copied rather than averaged
        for src, dst in zip(_bn_modules(self.encoder), _bn_modules(self.target)):
            dst.buffers = {k: v.copy() for k, v in src.buffers.items()}

    # -- operations -------------------------------------------------------------------
    def encode_csi(self, g) -> Tensor:
        return self.encoder(g)

    def target_encode_csi(self, g) -> Tensor:
        with T.no_grad():
            return T.stop_gradient(self.target(g))

    def predict_next(self, c_prev, q, h, z) -> tuple[Tensor, Tensor]:
        """One predictor step: ``q' = GRU([c_prev, h, z], q)`` and ``c_hat = head(q')``."""
        latent = flat_latent(T.as_tensor(h), T.as_tensor(z))
        q = self.gru(T.concat([T.as_tensor(c_prev), latent], axis=-1), T.as_tensor(q))
        return self.head(q), q

    def initial_q(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.cfg.predictor_size), dtype=T.get_default_dtype())

    def rollout_csi(self, c0, traj: ImaginedTrajectory | tuple) -> np.ndarray:
        """Autoregressive embeddings ``c_hat_1..H`` from ``c0`` and a latent trajectory.

        ``c0`` is measured at the trajectory's start state. ``traj`` is either an
        :class:`ImaginedTrajectory` (the states reached after each action are
        used) or a ``(h, z)`` pair of time-major arrays for steps 1..H.
        """
        hs, zs = traj.successors() if isinstance(traj, ImaginedTrajectory) else traj
        c = np.atleast_2d(np.asarray(c0.data if isinstance(c0, Tensor) else c0))
        q = self.initial_q(c.shape[0])
        out = []
        with T.no_grad():
            for t in range(len(hs)):
                c, q = self.predict_next(c, q, hs[t], zs[t])
                out.append(c.data.copy())
        return np.stack(out)


def _bn_modules(module):
    return [m for m in module.modules() if isinstance(m, nn.BatchNorm)]


def wireless_loss(model: WirelessJepa, channels, h, z) -> Tensor:
    """``sum_t ||c_hat_t - target(g_t)||^2`` over t = 1..T-1, averaged over the batch.

    ``channels`` is (B, T, input_width) interleaved; ``h``/``z`` are the
    control latents at the same steps. ``c_0`` comes from the online encoder
    and later predictions feed back autoregressively.
    """
    channels = np.asarray(channels)
    h, z = np.asarray(h), np.asarray(z)
    b, t_len = channels.shape[:2]
    if h.shape[:2] != (b, t_len) or z.shape[:2] != (b, t_len):
        raise ValueError("channels and control latents are not aligned")
    if t_len < 2:
        raise ValueError("need at least two steps")
    targets = model.target_encode_csi(channels[:, 1:])
    c = model.encode_csi(channels[:, 0])
    q = T.as_tensor(model.initial_q(b))
    total = None
    for t in range(1, t_len):
        c, q = model.predict_next(c, q, h[:, t], z[:, t])
        diff = c - targets[:, t - 1]
        step = T.sum_(diff * diff, axis=-1)
        total = step if total is None else total + step
    return T.mean(total)
