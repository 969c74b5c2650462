"""Run configuration: module configs plus orchestration settings.

The text format is one ``section.key = value`` per line; values are Python
literals. Keys that are derived from other sections (frame size of the
encoder, channel input width, bits per frame, ...) are recomputed after
loading so the sections always agree.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..agent import AgentConfig
from ..chansim import RadioSpec, smoke_radio
from ..control_jepa import ControlJepaConfig
from ..envsim import EnvSpec
from ..scheduler import METHODS, PowerConfig, SchedulerConfig
from ..wireless_jepa import WirelessJepaConfig

HEADER = "# latentlink run configuration"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    env_steps: int = 2_000_000
    prefill: int = 50_000
    train_ratio: int = 20
    replay_capacity: int = 1_000_000
    precision: str = "float64"
    wireless_epochs: int = 20
    wireless_batches_per_epoch: int = 0      # 0: one pass over all windows
    power_epochs: int = 20
    power_rollout_windows: int = 2000
    agent_steps: int = 1000                  # imagination-only updates for train-agent
    eval_seeds: int = 20
    eval_horizons: tuple = (2, 4, 6, 8, 10, 12, 14)
    eval_methods: tuple = METHODS
    track_file: str = ""

    def __post_init__(self):
        if self.train_ratio < 1:
            raise ValueError("train_ratio must be positive")
        if not 0 <= self.prefill <= self.env_steps:
            raise ValueError("prefill must lie in [0, env_steps]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.replay_capacity < 1:
            raise ValueError("replay capacity must be positive")


SECTIONS = ("env", "radio", "control", "wireless", "agent", "power", "scheduler", "run")


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    radio: RadioSpec = field(default_factory=RadioSpec)
    control: ControlJepaConfig = field(default_factory=ControlJepaConfig)
    wireless: WirelessJepaConfig = field(default_factory=WirelessJepaConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    power: PowerConfig = field(default_factory=PowerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def resolved(self) -> "RunConfig":
        """Recompute cross-section fields from their owning section."""
        env = self.env
        control = replace(self.control, frame_size=env.frame_size, n_actions=env.n_actions, gamma=env.gamma)
        wireless = replace(self.wireless, input_width=self.radio.input_width, horizon=control.horizon)
        agent = replace(self.agent, horizon=control.horizon)
        power = replace(self.power, embed_size=wireless.embed_size)
        scheduler = replace(self.scheduler, max_power=self.radio.power_budget,
                            bits_per_frame=env.frame_size * env.frame_size * 8)
        return replace(self, control=control, wireless=wireless, agent=agent, power=power, scheduler=scheduler)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        grouped: dict = {}
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ValueError(f"unknown configuration key {key!r}")
            sub = getattr(self, section)
            if name not in {f.name for f in fields(sub)} or name == "track":
                raise ValueError(f"unknown configuration key {key!r}")
            grouped.setdefault(section, {})[name] = value
        out = self
        for section, values in grouped.items():
            out = replace(out, **{section: replace(getattr(out, section), **values)})
        return out.resolved()

    def items(self):
        for section in SECTIONS:
            sub = getattr(self, section)
            for f in fields(sub):
                if f.name == "track":
                    continue
                yield f"{section}.{f.name}", getattr(sub, f.name)

    def dumps(self) -> str:
        return "\n".join([HEADER] + [f"{k} = {v!r}" for k, v in self.items()]) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected 'section.key = value'")
        value = value.strip()
        try:
            out[key.strip()] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key.strip()] = value
    return out


def smoke_preset() -> RunConfig:
    """Small desk-scale run: 32x32 frames, horizon 10, 8 antennas and 4 subcarriers."""
    return RunConfig(
        env=EnvSpec(frame_size=32, max_steps=120),
        radio=smoke_radio(),
        control=ControlJepaConfig(horizon=10, batch_size=16, lr=6e-4),
        wireless=WirelessJepaConfig(lr=1e-3, batch_size=100),
        agent=AgentConfig(actor_lr=2e-4, critic_lr=5e-4, target_interval=100),
        power=PowerConfig(),
        scheduler=SchedulerConfig(horizon=6, kappa=3, tau=1),
        run=RunSettings(env_steps=50_000, prefill=5_000, wireless_epochs=4, wireless_batches_per_epoch=150,
                        power_epochs=30, power_rollout_windows=600, agent_steps=200, eval_seeds=20,
                        eval_horizons=(2, 6, 10)),
    ).resolved()


def paper_preset() -> RunConfig:
    return RunConfig().resolved()


PRESETS = {"paper": paper_preset, "smoke": smoke_preset}


def load_config(path=None, preset: str = "paper", seed: int | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text()))
    if seed is not None:
        cfg = cfg.with_overrides({"run.seed": int(seed)})
    return cfg


def as_dict(cfg: RunConfig) -> dict:
    return dict(cfg.items())


__all__ = ["RunConfig", "RunSettings", "PRESETS", "load_config", "parse_config_text",
           "smoke_preset", "paper_preset", "as_dict"]
