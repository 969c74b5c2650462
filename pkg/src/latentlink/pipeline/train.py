"""Staged training: collection, world model and agent, wireless model, power head.

Stage 1 fills replay with random-policy steps. Stage 2 keeps collecting with
the current actor and takes one world-model update plus one imagination
update of the agent every ``train_ratio`` environment steps. Stage 3 trains
the wireless model on stored channels with the world model frozen, and
stage 4 trains the power head with the wireless model frozen.
"""

from __future__ import annotations

import contextlib
import hashlib
from pathlib import Path

import numpy as np

from .. import chansim
from ..agent import ActorCritic
from ..chansim import ScattererField
from ..control_jepa import ControlJepa, LatentControlState, world_model_loss
from ..envsim import CarEnv, load_track
from ..scheduler import PowerPredictor, Stack, power_loss
from ..substrate import Adam, checkpoint
from ..substrate import tensor as T
from ..substrate.rng import Streams, derive_seed
from ..wireless_jepa import WirelessJepa, wireless_loss
from .config import RunConfig
from .metrics import MetricsSink
from .replay import ReplayBuffer

STAGES = ("prefill", "world", "wireless", "power")
CHECKPOINTS = ("wm", "agent", "wjepa", "power")
METRIC_COLUMNS = ("stage", "step", "name", "value")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def state_hash(module) -> str:
    h = hashlib.sha256()
    for name, arr in module.state().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _finite(stage: str, **values) -> None:
    for k, v in values.items():
        if not np.isfinite(v):
            raise StageError(stage, f"{k} is not finite ({v})")


@contextlib.contextmanager
def eval_mode(*modules):
    modes = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, mode in zip(modules, modes):
            m.train(mode)


def build_env(cfg: RunConfig) -> CarEnv:
    spec = cfg.env
    if cfg.run.track_file:
        spec = spec.with_track(load_track(cfg.run.track_file))
    return CarEnv(spec)


def build_field(cfg: RunConfig) -> ScattererField:
    return ScattererField.generate(derive_seed(cfg.run.seed, "field"), cfg.radio)


class RandomPolicy:
    def __init__(self, n_actions: int, rng: np.random.Generator):
        self.n_actions = n_actions
        self.rng = rng

    def reset(self) -> None:
        pass

    def __call__(self, frame, prev_action: int) -> int:
        return int(self.rng.integers(self.n_actions))


class ActorPolicy:
    """Filters each frame through the world model and samples from the actor."""

    def __init__(self, world: ControlJepa, agent: ActorCritic, rng: np.random.Generator, mode: str = "sample"):
        self.world, self.agent, self.rng, self.mode = world, agent, rng, mode
        self.state: LatentControlState | None = None

    def reset(self) -> None:
        self.state = None

    def __call__(self, frame, prev_action: int) -> int:
        with eval_mode(self.world):
            start = self.state if self.state is not None else self.world.initial_state(1, self.rng)
            self.state = self.world.observe_sequence(np.asarray(frame)[None, None], np.array([[prev_action]]),
                                                     start, self.rng)[-1]
        return int(self.agent.act(self.state.feature, self.rng, self.mode).action[0])


class Collector:
    """Steps the environment with a policy and appends every record to replay."""

    def __init__(self, env: CarEnv, field_: ScattererField, cfg: RunConfig, replay: ReplayBuffer,
                 seed: int):
        self.env, self.field, self.cfg, self.replay = env, field_, cfg, replay
        self.seed = seed
        self.episodes = 0
        self.steps = 0
        self.frame = None
        self.prev_action = -1
        self.rewards: list = []
        self.finished: list = []     # normalized returns of completed episodes

    def _channel(self):
        st = self.env.state
        return chansim.channel_at(st.position, st.step_index, self.field, self.cfg.radio).interleaved()

    def collect(self, policy, steps: int) -> int:
        for _ in range(steps):
            if self.frame is None:
                self.frame, _ = self.env.reset(derive_seed(self.seed, "episode", self.episodes))
                self.episodes += 1
                self.prev_action = -1
                self.rewards = []
                policy.reset()
                self.replay.start_episode(self.frame, self._channel(), self.env.state.position)
            action = policy(self.frame, self.prev_action)
            res = self.env.step(action)
            self.steps += 1
            self.rewards.append(res.reward)
            self.replay.add_step(res.observation, action, res.reward, res.terminal, self._channel(),
                                 self.env.state.position, done=res.terminated)
            self.prev_action = action
            self.frame = res.observation
            if res.terminated:
                self.finished.append(float(np.clip(np.sum(self.rewards), 0.0, 1.0)))
                self.frame = None
        return steps


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir, log=print):
        self.cfg = cfg.resolved()
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)
        self.log = log or (lambda *a, **k: None)
        self.dtype = np.float64 if self.cfg.run.precision == "float64" else np.float32
        self.streams = Streams(self.cfg.run.seed)
        with T.precision(self.dtype):
            self._build()
        self.cfg.save(self.out / "config.txt")

    def _build(self) -> None:
        cfg = self.cfg
        self.env = build_env(cfg)
        self.field = build_field(cfg)
        self.field.save(self.out / "field.txt")
        init = self.streams.fresh("init")
        self.world = ControlJepa(cfg.control, init)
        self.agent = ActorCritic(cfg.control.latent_size, cfg.control.n_actions, cfg.agent, init)
        self.wireless = WirelessJepa(cfg.wireless, cfg.control.latent_size, init)
        self.power = PowerPredictor(cfg.power, init)
        self.world_opt = Adam(self.world.params, cfg.control.lr, eps=1e-5, clip_norm=cfg.control.clip_norm,
                              weight_decay=cfg.control.weight_decay)
        self.replay = ReplayBuffer(cfg.run.replay_capacity)
        self.collector = Collector(self.env, self.field, cfg, self.replay, derive_seed(cfg.run.seed, "episodes"))
        self.metrics = MetricsSink(self.out / "metrics.tsv", METRIC_COLUMNS, flush_every=50)
        self.grad_steps = 0

    # -- helpers ---------------------------------------------------------------------------
    def _emit(self, stage: str, step: int, **values) -> None:
        for k, v in values.items():
            self.metrics.write(stage=stage, step=step, name=k, value=float(v))

    def _stage(self, name: str, fn, *args):
        try:
            with T.precision(self.dtype):
                return fn(*args)
        except StageError:
            raise
        except (ValueError, FloatingPointError, chansim.SingularChannel) as exc:
            raise StageError(name, str(exc)) from exc

    def save_checkpoints(self, which=CHECKPOINTS) -> dict:
        modules = {"wm": self.world, "agent": self.agent, "wjepa": self.wireless, "power": self.power}
        paths = {}
        for name in which:
            paths[name] = checkpoint.save_module(self.out / "checkpoints" / name, modules[name])
        return paths

    def load_checkpoints(self, which) -> None:
        modules = {"wm": self.world, "agent": self.agent, "wjepa": self.wireless, "power": self.power}
        for name in which:
            checkpoint.load_module(self.out / "checkpoints" / name, modules[name])

    def stack(self) -> Stack:
        return Stack(self.world, self.wireless, self.agent, self.power)

    # -- stage 1 and 2 -------------------------------------------------------------------------
    def prefill(self) -> None:
        def run():
            policy = RandomPolicy(self.cfg.env.n_actions, self.streams["prefill"])
            self.collector.collect(policy, self.cfg.run.prefill)
            self._report_episodes("prefill")
            self.log(f"[prefill] {len(self.replay)} records, {self.replay.total_episodes} episodes")
        self._stage("prefill", run)

    def _report_episodes(self, stage: str) -> None:
        for ret in self.collector.finished:
            self._emit(stage, self.collector.steps, episode_return=ret)
        self.collector.finished = []

    def world_update(self, rng) -> dict:
        cfg = self.cfg
        batch = self.replay.sample(cfg.control.batch_size, cfg.control.horizon, rng)
        self.world.train()
        out = world_model_loss(self.world, batch, rng)
        self.world_opt.zero_grad()
        out.loss.backward()
        norm = self.world_opt.step()
        stats = {"wm_loss": float(out.loss.data), "kl": out.kl, "reward_nll": out.reward_nll,
                 "termination_nll": out.termination_nll, "wm_grad_norm": norm}
        _finite("world", **stats)
        return stats, out

    def agent_update(self, out, rng) -> dict:
        cfg = self.cfg.control
        n = out.h.shape[0] * out.h.shape[1]
        starts = LatentControlState(out.h.reshape(n, -1), out.z.reshape(n, cfg.groups, cfg.classes),
                                    out.post_logits.reshape(n, cfg.groups, cfg.classes))
        traj = self.world.imagine(starts, self.agent.policy("sample"), self.cfg.agent.horizon, rng)
        stats = self.agent.update(traj)
        _finite("world", **stats)
        return stats

    def train_world(self, steps: int | None = None, update_agent: bool = True) -> None:
        """Stage 2: collect with the actor, one update per ``train_ratio`` env steps."""
        def run():
            cfg = self.cfg
            total = cfg.run.env_steps - cfg.run.prefill if steps is None else steps
            ratio = cfg.run.train_ratio
            rng_wm, rng_img = self.streams["world"], self.streams["imagine"]
            policy = ActorPolicy(self.world, self.agent, self.streams["act"]) if update_agent \
                else RandomPolicy(cfg.env.n_actions, self.streams["prefill"])
            done = 0
            while done < total:
                chunk = min(ratio, total - done)
                self.collector.collect(policy, chunk)
                done += chunk
                if chunk == ratio:
                    stats, out = self.world_update(rng_wm)
                    if update_agent:
                        stats.update(self.agent_update(out, rng_img))
                    self.grad_steps += 1
                    self._emit("world", self.grad_steps, **stats)
                    if self.grad_steps % 100 == 0:
                        self.log(f"[world] step {self.grad_steps} env {self.collector.steps} "
                                 + " ".join(f"{k}={v:.3f}" for k, v in stats.items()))
                self._report_episodes("world")
            self.metrics.flush()
        self._stage("world", run)

    def train_agent_only(self, steps: int) -> None:
        """Imagination-only agent updates from replay starts; the world model stays fixed."""
        def run():
            before = state_hash(self.world)
            rng = self.streams["agent-only"]
            cfg = self.cfg
            for i in range(steps):
                batch = self.replay.sample(cfg.control.batch_size, cfg.control.horizon, rng)
                with eval_mode(self.world), T.no_grad():
                    out = world_model_loss(self.world, batch, rng)
                self._emit("agent", i + 1, **self.agent_update(out, rng))
            if state_hash(self.world) != before:
                raise StageError("agent", "world model changed during agent-only training")
        self._stage("agent", run)

    # -- stage 3 ----------------------------------------------------------------------------
    def episode_latents(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Posterior (h, z-class indices) for every stored episode, eval mode, fixed seed."""
        rng = self.streams.fresh("latents")
        out = []
        for i in range(self.replay.total_episodes):
            arr = self.replay.episode_arrays(i)
            out.append(self.sequence_latents(arr["frames"], arr["actions"], rng))
        return out

    def sequence_latents(self, frames, actions, rng) -> tuple[np.ndarray, np.ndarray]:
        """Posterior (h, z-class indices) of one episode of uint8 frames, filtered from reset."""
        with eval_mode(self.world):
            frames = np.asarray(frames).astype(np.float64)[:, None] / 255.0
            start = self.world.initial_state(1, rng)
            states = self.world.observe_sequence(frames, np.asarray(actions)[:, None], start, rng)
        h = np.concatenate([s.h for s in states])
        z = np.concatenate([s.z for s in states]).argmax(-1).astype(np.int16)
        return h, z

    def _z_onehot(self, idx: np.ndarray) -> np.ndarray:
        return np.eye(self.cfg.control.classes, dtype=self.dtype)[idx]

    def _windows(self, latents, length: int):
        return [(e, s) for e, (h, _) in enumerate(latents) for s in range(len(h) - length + 1)]

    def _window_batch(self, latents, windows, length: int):
        g = np.stack([self.replay.episode_arrays(e)["channels"][s:s + length] for e, s in windows])
        h = np.stack([latents[e][0][s:s + length] for e, s in windows])
        z = self._z_onehot(np.stack([latents[e][1][s:s + length] for e, s in windows]))
        return g, h, z

    def train_wireless(self) -> None:
        def run():
            cfg = self.cfg.wireless
            frozen = state_hash(self.world)
            latents = self.episode_latents()
            length = cfg.horizon
            windows = self._windows(latents, length)
            if not windows:
                raise StageError("wireless", "no stored episode is long enough")
            params = self.wireless.online_params
            opt = Adam(params, cfg.lr, clip_norm=cfg.clip_norm, weight_decay=cfg.weight_decay)
            rng = self.streams["wireless"]
            per_epoch = self.cfg.run.wireless_batches_per_epoch or max(len(windows) // cfg.batch_size, 1)
            step = 0
            self.wireless.train()
            for epoch in range(self.cfg.run.wireless_epochs):
                opt.lr = cfg.lr * cfg.lr_decay ** epoch
                order = rng.permutation(len(windows))
                losses = []
                for b in range(per_epoch):
                    idx = order[(b * cfg.batch_size) % len(windows):][:cfg.batch_size]
                    if len(idx) < 2:
                        idx = order[:cfg.batch_size]
                    g, h, z = self._window_batch(latents, [windows[i] for i in idx], length)
                    loss = wireless_loss(self.wireless, g, h, z)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    self.wireless.ema_step()
                    step += 1
                    losses.append(float(loss.data))
                    _finite("wireless", wireless_loss=losses[-1])
                    self._emit("wireless", step, wireless_loss=losses[-1])
                self.log(f"[wireless] epoch {epoch} loss {np.mean(losses):.4f}")
            self.wireless.eval()
            self.metrics.flush()
            if state_hash(self.world) != frozen:
                raise StageError("wireless", "world model changed while it was frozen")
            self._latents = latents
        self._stage("wireless", run)

    # -- stage 4 -------------------------------------------------------------------------------
    def power_dataset(self, latents=None):
        """Encoder embeddings of every stored channel plus rolled-out embeddings of sampled windows,
        each paired with the required power of the true channel."""
        radio = self.cfg.radio
        latents = latents if latents is not None else getattr(self, "_latents", None) or self.episode_latents()
        chans = np.concatenate([self.replay.episode_arrays(i)["channels"] for i in range(self.replay.total_episodes)])
        with eval_mode(self.wireless), T.no_grad():
            emb = np.concatenate([self.wireless.encode_csi(chans[i:i + 4096]).data
                                  for i in range(0, len(chans), 4096)])
        targets = chansim.required_power(chansim.deinterleave(chans, radio.n_antennas, radio.subcarriers),
                                         radio.snr_threshold, radio.noise_power)
        windows = self._windows(latents, self.cfg.wireless.horizon)
        rng = self.streams.fresh("power-windows")
        pick = rng.choice(len(windows), size=min(self.cfg.run.power_rollout_windows, len(windows)), replace=False)
        g, h, z = self._window_batch(latents, [windows[i] for i in np.sort(pick)], self.cfg.wireless.horizon)
        with eval_mode(self.wireless), T.no_grad():
            c0 = self.wireless.encode_csi(g[:, 0]).data
            rolled = self.wireless.rollout_csi(c0, (h[:, 1:].swapaxes(0, 1), z[:, 1:].swapaxes(0, 1)))
        rolled = rolled.swapaxes(0, 1).reshape(-1, rolled.shape[-1])
        rolled_targets = chansim.required_power(
            chansim.deinterleave(g[:, 1:], radio.n_antennas, radio.subcarriers),
            radio.snr_threshold, radio.noise_power).reshape(-1)
        return np.concatenate([emb, rolled]), np.concatenate([targets, rolled_targets])

    def train_power(self) -> None:
        def run():
            cfg = self.cfg.power
            frozen = state_hash(self.wireless)
            x, y = self.power_dataset()
            opt = Adam(self.power.params, cfg.lr, clip_norm=cfg.clip_norm)
            rng = self.streams["power"]
            step = 0
            for epoch in range(self.cfg.run.power_epochs):
                order = rng.permutation(len(x))
                losses = []
                for b in range(0, len(order), cfg.batch_size):
                    idx = order[b:b + cfg.batch_size]
                    loss = power_loss(self.power, x[idx], y[idx])
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(float(loss.data))
                    step += 1
                _finite("power", power_loss=np.mean(losses))
                self._emit("power", step, power_loss=float(np.mean(losses)))
                self.log(f"[power] epoch {epoch} loss {np.mean(losses):.5f}")
            self.metrics.flush()
            if state_hash(self.wireless) != frozen:
                raise StageError("power", "wireless model changed while it was frozen")
        self._stage("power", run)

    # -- full run --------------------------------------------------------------------------
    def run_all(self) -> dict:
        self.prefill()
        self.train_world()
        self.save_checkpoints(("wm", "agent"))
        self.train_wireless()
        self.save_checkpoints(("wjepa",))
        self.train_power()
        paths = self.save_checkpoints(("power",))
        self.replay.save(self.out / "replay.npz")
        self.metrics.close()
        return paths

    def close(self) -> None:
        self.metrics.close()


def train(cfg: RunConfig, out_dir, log=print) -> Trainer:
    trainer = Trainer(cfg, out_dir, log)
    trainer.run_all()
    return trainer
