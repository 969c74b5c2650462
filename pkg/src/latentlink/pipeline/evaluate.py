"""Deployment sweeps and policy evaluation on trained checkpoints."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from ..envsim import CarEnv, normalized_return
from ..scheduler import Stack, run_episode
from ..substrate import tensor as T
from ..substrate.rng import derive_seed, stream
from .config import RunConfig
from .metrics import MetricsSink
from .replay import ReplayBuffer
from .train import ActorPolicy, Collector, RandomPolicy, Trainer, eval_mode

RESULT_COLUMNS = ("method", "horizon", "kappa", "tau", "seed", "normalized_return", "mean_power_w",
                  "mean_power_db", "overhead_bits", "outages", "slots")
SUMMARY_COLUMNS = ("method", "horizon", "n", "return_mean", "return_std", "power_mean_w", "power_std_w",
                   "overhead_mean_bits", "overhead_std_bits", "outages_mean")


def eval_seeds(cfg: RunConfig, count: int | None = None) -> list[int]:
    """Episode seeds for evaluation, disjoint from the training stream."""
    n = cfg.run.eval_seeds if count is None else count
    return [derive_seed(cfg.run.seed, "eval", i) for i in range(n)]


def policy_returns(env: CarEnv, policy, seeds) -> list[float]:
    """Normalized return of ``policy`` with full observation on every step."""
    out = []
    for seed in seeds:
        frame, _ = env.reset(seed)
        policy.reset()
        prev, rewards = -1, []
        while not env.done:
            action = policy(frame, prev)
            res = env.step(action)
            rewards.append(res.reward)
            frame, prev = res.observation, action
        out.append(normalized_return(rewards))
    return out


def agent_returns(trainer: Trainer, seeds, mode: str = "sample") -> list[float]:
    with T.precision(trainer.dtype):
        policy = ActorPolicy(trainer.world, trainer.agent, stream(trainer.cfg.run.seed, "eval-policy"), mode)
        return policy_returns(trainer.env, policy, seeds)


def random_returns(trainer: Trainer, seeds) -> list[float]:
    policy = RandomPolicy(trainer.cfg.env.n_actions, stream(trainer.cfg.run.seed, "eval-random"))
    return policy_returns(trainer.env, policy, seeds)


def heldout_replay(trainer: Trainer, episodes: int, mode: str = "sample") -> ReplayBuffer:
    """Fresh episodes driven by the trained agent on seeds never used in training."""
    cfg = trainer.cfg
    replay = ReplayBuffer()
    collector = Collector(trainer.env, trainer.field, cfg, replay, derive_seed(cfg.run.seed, "heldout"))
    with T.precision(trainer.dtype):
        policy = ActorPolicy(trainer.world, trainer.agent, stream(cfg.run.seed, "heldout-policy"), mode)
        while len(collector.finished) < episodes:
            collector.collect(policy, 1)
    return replay


def rollout_errors(trainer: Trainer, replay: ReplayBuffer, steps: int = 5, seed: int = 0) -> np.ndarray:
    """Squared embedding error after ``steps`` predicted slots, one random window per episode.

    Returns an ``(episodes, 2)`` array: column 0 is the latent-conditioned
    rollout, column 1 the persistence guess ``c_hat = c_0``. Both are scored
    against the encoder's embedding of the true channel. Episodes shorter than
    the window are skipped.
    """
    rng = np.random.default_rng(seed)
    rows = []
    with T.precision(trainer.dtype), eval_mode(trainer.wireless), T.no_grad():
        for i in range(replay.total_episodes):
            arr = replay.episode_arrays(i)
            if len(arr["actions"]) <= steps:
                continue
            h, z = trainer.sequence_latents(arr["frames"], arr["actions"], stream(seed, "heldout-latents", i))
            s = int(rng.integers(0, len(h) - steps))
            c = trainer.wireless.encode_csi(arr["channels"][[s, s + steps]]).data
            zs = np.eye(trainer.cfg.control.classes)[z[s + 1:s + steps + 1]]
            pred = trainer.wireless.rollout_csi(c[:1], (h[s + 1:s + steps + 1, None], zs[:, None]))[-1, 0]
            rows.append((np.sum((pred - c[1]) ** 2), np.sum((c[0] - c[1]) ** 2)))
    return np.array(rows)


def paired_methods(trainer: Trainer, methods, seeds, horizon: int, kappa: int, tau: int | None = None) -> dict:
    """Run each method on the same episode seeds; returns method -> list of episode metrics."""
    cfg = trainer.cfg
    tau = cfg.scheduler.tau if tau is None else tau
    scfg = replace(cfg.scheduler, horizon=horizon, kappa=kappa, tau=min(tau, horizon - kappa))
    stack = Stack(trainer.world, trainer.wireless, trainer.agent, trainer.power)
    with T.precision(trainer.dtype):
        return {m: [run_episode(stack, trainer.env, trainer.field, cfg.radio, scfg, s, m) for s in seeds]
                for m in methods}


def load_trained(cfg: RunConfig, out_dir, log=None) -> Trainer:
    """Rebuild a trainer and load all four checkpoints (and replay, when saved)."""
    trainer = Trainer(cfg, out_dir, log=log)
    trainer.load_checkpoints(("wm", "agent", "wjepa", "power"))
    replay = Path(out_dir) / "replay.npz"
    if replay.exists():
        from .replay import ReplayBuffer
        trainer.replay = ReplayBuffer.load(replay)
    return trainer


def sweep(trainer: Trainer, results_path, methods=None, horizons=None, seeds=None) -> list[dict]:
    """Run every (method, horizon, seed) cell and append one record per episode."""
    cfg = trainer.cfg
    methods = tuple(methods or cfg.run.eval_methods)
    horizons = tuple(horizons or cfg.run.eval_horizons)
    seeds = list(seeds if seeds is not None else eval_seeds(cfg))
    stack = Stack(trainer.world, trainer.wireless, trainer.agent, trainer.power)
    rows = []
    with T.precision(trainer.dtype), MetricsSink(results_path, RESULT_COLUMNS) as sink:
        for method in methods:
            for hs in horizons:
                scfg = replace(cfg.scheduler, horizon=hs, kappa=min(cfg.scheduler.kappa, hs),
                               tau=min(cfg.scheduler.tau, hs - 1))
                for seed in seeds:
                    rec = run_episode(stack, trainer.env, trainer.field, cfg.radio, scfg, seed, method).record()
                    sink.write(**rec)
                    rows.append(rec)
    return rows


def summarize(rows, path) -> list[dict]:
    cells: dict = {}
    for r in rows:
        cells.setdefault((r["method"], r["horizon"]), []).append(r)
    out = []
    with MetricsSink(path, SUMMARY_COLUMNS) as sink:
        for (method, hs), rs in cells.items():
            ret = np.array([r["normalized_return"] for r in rs])
            pw = np.array([r["mean_power_w"] for r in rs])
            ov = np.array([r["overhead_bits"] for r in rs], dtype=np.float64)
            rec = {"method": method, "horizon": hs, "n": len(rs), "return_mean": float(ret.mean()),
                   "return_std": float(ret.std()), "power_mean_w": float(pw.mean()),
                   "power_std_w": float(pw.std()), "overhead_mean_bits": float(ov.mean()),
                   "overhead_std_bits": float(ov.std()),
                   "outages_mean": float(np.mean([r["outages"] for r in rs]))}
            sink.write(**rec)
            out.append(rec)
    return out


def evaluate(cfg: RunConfig, out_dir, log=print) -> list[dict]:
    trainer = load_trained(cfg, out_dir)
    out = Path(out_dir)
    for name in ("results.tsv", "summary.tsv"):
        if (out / name).exists():
            (out / name).unlink()
    rows = sweep(trainer, out / "results.tsv")
    summary = summarize(rows, out / "summary.tsv")
    if log:
        for s in summary:
            log(f"{s['method']:>15s} H_s={s['horizon']:2d} return={s['return_mean']:.3f} "
                f"power={s['power_mean_w']:.4f} W overhead={s['overhead_mean_bits']:.0f} bits")
    trainer.close()
    return rows
