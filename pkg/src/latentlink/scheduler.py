"""Power prediction, minimum-power slot selection and the closed-loop protocol.

Time is divided into scheduling cycles of ``horizon`` slots. At the start of
a cycle the device's future latent states and channel embeddings are
imagined, per-slot transmit powers are predicted, and one window of
``kappa`` consecutive slots is chosen for uplink. Every other slot is driven
by imagination alone. The first cycle of an episode always transmits at
slot 0 so the channel model has a measured starting point.

Slot offsets inside a cycle are 0-based: offsets ``0 .. tau-1`` are never
chosen and the window must fit, so ``tau <= t* <= horizon - kappa``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import chansim
from .agent import ActorCritic
from .chansim import RadioSpec, ScattererField
from .control_jepa import ControlJepa, LatentControlState
from .envsim import CarEnv, normalized_return
from .substrate import nn
from .substrate import tensor as T
from .substrate.rng import stream
from .substrate.tensor import Tensor
from .wireless_jepa import WirelessJepa

METHODS = ("closed_loop", "power_agnostic", "no_prediction", "action_repeat")


# -- power predictor -------------------------------------------------------------------
@dataclass(frozen=True)
class PowerConfig:
    embed_size: int = 16
    units: int = 100
    lr: float = 1e-3
    batch_size: int = 100
    clip_norm: float = 100.0


class PowerPredictor(nn.Module):
    """Three ReLU layers and a softplus output: embedding -> watts."""

    def __init__(self, cfg: PowerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.net = nn.MLP(cfg.embed_size, (cfg.units,) * 3, 1, rng, norm="none", act="relu")

    def __call__(self, c) -> Tensor:
        c = T.as_tensor(c)
        lead = c.shape[:-1]
        return T.softplus(self.net(c.reshape(-1, c.shape[-1]))).reshape(*lead)

    def predict_power(self, c) -> np.ndarray:
        with T.no_grad():
            return self(np.asarray(c)).data.copy()


def power_loss(model: PowerPredictor, embeddings, targets) -> Tensor:
    """Mean squared error between predicted and required powers.

    Embeddings enter as constants: a Tensor is detached so no gradient reaches
    the frozen wireless model that produced it.
    """
    embeddings = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    targets = np.asarray(targets)
    if embeddings.shape[:-1] != targets.shape:
        raise ValueError("embeddings and power targets are not aligned")
    diff = model(embeddings) - targets
    return T.mean(diff * diff)


# -- slot selection -------------------------------------------------------------------
@dataclass(frozen=True)
class SchedulerConfig:
    horizon: int = 6
    kappa: int = 3
    tau: int = 1
    max_power: float = 1.0
    bits_per_frame: int = 84 * 84 * 8
    action_mode: str = "greedy"

    def __post_init__(self):
        if not 0 <= self.tau < self.horizon:
            raise ValueError("need 0 <= tau < horizon")
        if not 1 <= self.kappa <= self.horizon:
            raise ValueError("need 1 <= kappa <= horizon")
        if self.max_power <= 0:
            raise ValueError("power budget must be positive")


@dataclass
class ScheduleDecision:
    slot: int                         # 0-based offset t* inside the cycle
    predicted: np.ndarray
    feasible: np.ndarray              # per-offset eligibility (tau, window fit, budget)
    outage: bool
    planned_power: float
    actual: list = field(default_factory=list)


def select_slot(predicted, cfg: SchedulerConfig) -> ScheduleDecision:
    """Earliest minimum-power offset among eligible ones; outage fallback otherwise."""
    rho = np.asarray(predicted, dtype=np.float64)
    if len(rho) != cfg.horizon:
        raise ValueError(f"expected {cfg.horizon} predicted powers, got {len(rho)}")
    if not np.all(np.isfinite(rho)):
        raise ValueError("predicted powers must be finite")
    offsets = np.arange(cfg.horizon)
    window = (offsets >= cfg.tau) & (offsets <= cfg.horizon - cfg.kappa)
    ok = window & (rho <= cfg.max_power)
    if ok.any():
        cand = np.flatnonzero(ok)
        slot = int(cand[np.argmin(rho[cand])])
        return ScheduleDecision(slot, rho, ok, False, float(rho[slot]))
    cand = np.flatnonzero(offsets >= cfg.tau)
    slot = int(cand[np.argmin(rho[cand])])
    return ScheduleDecision(slot, rho, ok, True, float(min(rho[slot], cfg.max_power)))


def window_cost(required, start: int, kappa: int, cfg: SchedulerConfig) -> tuple[int, float]:
    """Bits and energy (sum of clipped powers) of sending ``kappa`` frames from ``start``."""
    rho = np.minimum(np.asarray(required, dtype=np.float64)[start:start + kappa], cfg.max_power)
    if len(rho) != kappa:
        raise ValueError("window runs past the end of the cycle")
    return kappa * cfg.bits_per_frame, float(rho.sum())


# -- episode metrics -------------------------------------------------------------------
@dataclass
class EpisodeMetrics:
    method: str
    horizon: int
    kappa: int
    tau: int
    seed: int
    normalized_return: float
    mean_power: float
    overhead_bits: int
    outages: int
    slots: int
    transmissions: int
    frame_reads: int
    rewards: list = field(default_factory=list, repr=False)
    powers: list = field(default_factory=list, repr=False)
    alphas: list = field(default_factory=list, repr=False)
    positions: list = field(default_factory=list, repr=False)
    log: list = field(default_factory=list, repr=False)

    @property
    def mean_power_db(self) -> float:
        return float(10 * np.log10(self.mean_power)) if self.mean_power > 0 else float("-inf")

    def record(self) -> dict:
        return {"method": self.method, "horizon": self.horizon, "kappa": self.kappa, "tau": self.tau,
                "seed": self.seed, "normalized_return": self.normalized_return,
                "mean_power_w": self.mean_power, "mean_power_db": self.mean_power_db,
                "overhead_bits": self.overhead_bits, "outages": self.outages, "slots": self.slots}


class FrameGate:
    """Hands out ground-truth frames and counts every read."""

    def __init__(self):
        self.frame = None
        self.reads = 0

    def offer(self, frame: np.ndarray) -> None:
        self.frame = frame

    def read(self) -> np.ndarray:
        self.reads += 1
        return self.frame


@dataclass
class Stack:
    """Trained models used on deployment (all in eval mode)."""

    world: ControlJepa
    wireless: WirelessJepa
    agent: ActorCritic
    power: PowerPredictor

    def __post_init__(self):
        for m in (self.world, self.wireless, self.agent, self.power):
            m.eval()
        if self.wireless.latent_size != self.world.cfg.latent_size:
            raise ValueError("wireless model and world model disagree on the latent size")
        if self.power.cfg.embed_size != self.wireless.cfg.embed_size:
            raise ValueError("power predictor and wireless model disagree on the embedding size")
        if self.agent.n_actions != self.world.cfg.n_actions:
            raise ValueError("agent and world model disagree on the action count")


class _Device:
    """Per-episode latent bookkeeping shared by all methods."""

    def __init__(self, stack: Stack, rng: np.random.Generator, action_mode: str):
        self.stack = stack
        self.rng = rng
        self.mode = action_mode
        self.state: LatentControlState | None = None
        self.prev_action = -1
        self.c = None
        self.q = None

    def start(self) -> LatentControlState:
        return self.stack.world.initial_state(1, self.rng)

    def observe(self, frame) -> None:
        start = self.state if self.state is not None else self.start()
        self.state = self.stack.world.observe_sequence(
            frame[None, None], np.array([[self.prev_action]]), start, self.rng)[-1]

    def imagine(self) -> None:
        start = self.state if self.state is not None else self.start()
        self.state = self.stack.world.imagine_step(start, np.array([self.prev_action]), self.rng)

    def anchor_channel(self, g: np.ndarray) -> None:
        with T.no_grad():
            self.c = self.stack.wireless.encode_csi(chansim.interleave(g)[None]).data
        self.q = self.stack.wireless.initial_q(1)

    def advance_channel(self) -> None:
        if self.c is None:
            return
        with T.no_grad():
            c, q = self.stack.wireless.predict_next(self.c, self.q, self.state.h, self.state.z)
        self.c, self.q = c.data, q.data

    def act(self) -> int:
        return int(self.stack.agent.act(self.state.feature, self.rng, self.mode).action[0])

    def plan_powers(self, horizon: int) -> tuple[np.ndarray, list]:
        """Imagine the next ``horizon`` slots from the current state; return powers and the plan."""
        world, wireless = self.stack.world, self.stack.wireless
        state, prev, c, q = self.state, self.prev_action, self.c, self.q
        plan = []
        with T.no_grad():
            for _ in range(horizon):
                state = world.imagine_step(state, np.array([prev]), self.rng)
                if c is not None:
                    ct, qt = wireless.predict_next(c, q, state.h, state.z)
                    c, q = ct.data, qt.data
                prev = int(self.stack.agent.act(state.feature, self.rng, self.mode).action[0])
                plan.append((state, prev, c, q))
        if self.c is None:
            return np.full(horizon, np.inf), plan
        powers = self.stack.power.predict_power(np.concatenate([p[2] for p in plan]))
        return powers, plan


def run_episode(stack: Stack, env: CarEnv, field_: ScattererField, radio: RadioSpec,
                cfg: SchedulerConfig, seed: int, method: str = "closed_loop") -> EpisodeMetrics:
    """One deployment episode under ``method`` (one of :data:`METHODS`).

    Slot ``t`` carries the frame and channel of the device state before
    action ``t``. A transmission whose required power exceeds the budget is
    sent at the budget, counted, and lost.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if cfg.max_power != radio.power_budget:
        raise ValueError("scheduler power budget differs from the radio budget")
    rng = stream(seed, "deploy", method)
    device = _Device(stack, rng, cfg.action_mode)
    gate = FrameGate()
    frame, _ = env.reset(seed)
    gate.offer(frame)
    hs = cfg.horizon
    kappa = {"no_prediction": hs, "action_repeat": 1}.get(method, cfg.kappa)
    rewards, powers, alphas, positions, log = [], [], [], [], []
    outages = 0
    t = 0
    plan: list = []
    on_plan = False
    tx_slots: set = set()
    repeat_action = 0
    while not env.done:
        offset = t % hs
        if offset == 0:
            start = 0
            plan = []
            if t > 0 and method == "power_agnostic":
                start = hs - kappa
                plan = device.plan_powers(hs)[1]
            elif t > 0 and method == "closed_loop":
                predicted, plan = device.plan_powers(hs)
                if np.all(np.isinf(predicted)):
                    predicted = np.full(hs, cfg.max_power)
                decision = select_slot(predicted, cfg)
                start = decision.slot
                log.append({"slot": t, "offset": start, "outage": decision.outage,
                            "predicted": predicted.tolist()})
            on_plan = bool(plan)
            tx_slots = {t + start + k for k in range(kappa)}

        pos = env.state.position.copy()
        positions.append(pos)
        transmit = t in tx_slots
        power, received = 0.0, False
        if transmit:
            g = chansim.channel_at(pos, t, field_, radio).g
            need = chansim.required_power(g, radio.snr_threshold, radio.noise_power)
            if need > cfg.max_power:
                power = cfg.max_power
                outages += 1
            else:
                power, received = need, True
        powers.append(power)
        alphas.append(int(transmit))

        if method == "action_repeat":
            if offset == 0:
                # each anchor filters its single frame from a fresh latent
                device.state = None
                if received:
                    device.observe(gate.read())
                else:
                    device.state = device.start()
                repeat_action = device.act()
            action = repeat_action
        else:
            if received:
                device.observe(gate.read())
                device.anchor_channel(g)
                on_plan = False
            elif on_plan:
                device.state, _, device.c, device.q = plan[offset]
            else:
                device.imagine()
                device.advance_channel()
            action = plan[offset][1] if on_plan else device.act()
        device.prev_action = action
        res = env.step(action)
        gate.offer(res.observation)
        rewards.append(res.reward)
        t += 1

    slots = len(rewards)
    sent = int(sum(alphas))
    return EpisodeMetrics(method, hs, kappa, cfg.tau, seed, normalized_return(rewards),
                          float(np.sum(powers) / slots), sent * cfg.bits_per_frame, outages, slots,
                          sent, gate.reads, rewards, powers, alphas, positions, log)


def closed_loop_episode(stack, env, field_, radio, cfg, seed) -> EpisodeMetrics:
    return run_episode(stack, env, field_, radio, cfg, seed, "closed_loop")


def baseline_no_prediction(stack, env, field_, radio, cfg, seed) -> EpisodeMetrics:
    return run_episode(stack, env, field_, radio, cfg, seed, "no_prediction")


def baseline_power_agnostic(stack, env, field_, radio, cfg, seed) -> EpisodeMetrics:
    return run_episode(stack, env, field_, radio, cfg, seed, "power_agnostic")


def baseline_action_repeat(stack, env, field_, radio, cfg, seed) -> EpisodeMetrics:
    return run_episode(stack, env, field_, radio, cfg, seed, "action_repeat")
