"""Command line entry point: staged training, deployment rollouts and sweeps.

The only environment variable read is ``LATENTLINK_THREADS``, which caps the
BLAS thread pool (it must be applied before numpy is imported).
"""

from __future__ import annotations

import argparse
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_threads() -> None:
    n = os.environ.get("LATENTLINK_THREADS")
    if n:
        for var in THREAD_VARS:
            os.environ[var] = n


_apply_threads()

import numpy as np  # noqa: E402

from .pipeline import config as config_mod  # noqa: E402
from .pipeline.evaluate import evaluate, load_trained  # noqa: E402
from .pipeline.replay import ReplayBuffer  # noqa: E402
from .pipeline.train import StageError, Trainer, eval_mode  # noqa: E402
from .scheduler import METHODS, run_episode  # noqa: E402
from .substrate import tensor as T  # noqa: E402


def _config(args):
    return config_mod.load_config(args.config, args.preset, args.seed)


def _trainer(args, checkpoints=(), replay=True) -> Trainer:
    path = os.path.join(args.out, "replay.npz")
    if replay and not os.path.exists(path):
        raise SystemExit(f"{path} not found; run train-wm first")
    trainer = Trainer(_config(args), args.out)
    try:
        trainer.load_checkpoints(checkpoints)
    except FileNotFoundError as exc:
        raise SystemExit(f"missing checkpoint ({exc.filename}); run the earlier stages first") from exc
    if replay:
        trainer.replay = ReplayBuffer.load(path)
    return trainer


def cmd_train(args) -> int:
    trainer = Trainer(_config(args), args.out)
    trainer.run_all()
    print(f"checkpoints written to {os.path.join(args.out, 'checkpoints')}")
    return 0


def cmd_train_wm(args) -> int:
    trainer = Trainer(_config(args), args.out)
    trainer.prefill()
    trainer.train_world()
    trainer.save_checkpoints(("wm", "agent"))
    trainer.replay.save(os.path.join(args.out, "replay.npz"))
    trainer.close()
    return 0


def cmd_train_agent(args) -> int:
    trainer = _trainer(args, ("wm", "agent"))
    trainer.train_agent_only(trainer.cfg.run.agent_steps)
    trainer.save_checkpoints(("agent",))
    trainer.close()
    return 0


def cmd_train_wjepa(args) -> int:
    trainer = _trainer(args, ("wm",))
    trainer.train_wireless()
    trainer.save_checkpoints(("wjepa",))
    trainer.close()
    return 0


def cmd_train_power(args) -> int:
    trainer = _trainer(args, ("wm", "wjepa"))
    trainer.train_power()
    trainer.save_checkpoints(("power",))
    trainer.close()
    return 0


def cmd_rollout(args) -> int:
    trainer = load_trained(_config(args), args.out, log=None)
    cfg = trainer.cfg
    seed = args.episode_seed if args.episode_seed is not None else cfg.run.seed
    with T.precision(trainer.dtype):
        m = run_episode(trainer.stack(), trainer.env, trainer.field, cfg.radio, cfg.scheduler, seed, args.method)
    decisions = {d["slot"]: d for d in m.log}
    print("slot\tx\ty\talpha\tpower_w\treward\tnote")
    for t in range(m.slots):
        note = ""
        if t in decisions:
            d = decisions[t]
            note = f"plan offset={d['offset']} outage={d['outage']} predicted=" + \
                   ",".join(f"{p:.4f}" for p in d["predicted"])
        x, y = m.positions[t][:2]
        print(f"{t}\t{x:.2f}\t{y:.2f}\t{m.alphas[t]}\t{m.powers[t]:.5f}\t{m.rewards[t]:.5f}\t{note}")
    print(f"# method={m.method} return={m.normalized_return:.4f} mean_power_w={m.mean_power:.5f} "
          f"overhead_bits={m.overhead_bits} outages={m.outages} frame_reads={m.frame_reads}")
    trainer.close()
    return 0


def cmd_evaluate(args) -> int:
    evaluate(_config(args), args.out)
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    results = run_suite(args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_dump_embeddings(args) -> int:
    """Per-slot CSI embeddings of one stored episode from the encoder, the EMA
    target and the latent-conditioned predictor rolled out from slot 0."""
    trainer = _trainer(args, ("wm", "wjepa"))
    episode = args.episode
    if not 0 <= episode < trainer.replay.total_episodes:
        raise SystemExit(f"episode {episode} not in replay (have {trainer.replay.total_episodes})")
    arr = trainer.replay.episode_arrays(episode)
    out_path = args.file or os.path.join(args.out, f"embeddings_ep{episode}.tsv")
    with T.precision(trainer.dtype), eval_mode(trainer.world), eval_mode(trainer.wireless), T.no_grad():
        rng = np.random.default_rng(0)
        frames = arr["frames"].astype(trainer.dtype)[:, None] / 255.0
        states = trainer.world.observe_sequence(frames, arr["actions"][:, None],
                                                trainer.world.initial_state(1, rng), rng)
        h = np.stack([s.h for s in states])
        z = np.stack([s.z for s in states])
        g = arr["channels"]
        rows = {"encoder": trainer.wireless.encode_csi(g).data,
                "ema-target": trainer.wireless.target_encode_csi(g).data}
        rolled = trainer.wireless.rollout_csi(rows["encoder"][:1], (h[1:], z[1:]))[:, 0]
        rows["predicted"] = np.concatenate([rows["encoder"][:1], rolled])
    embed = rows["encoder"].shape[1]
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["slot", "x", "y"] + [f"c_{i + 1}" for i in range(embed)] + ["source"]) + "\n")
        for source, emb in rows.items():
            for t in range(len(emb)):
                x, y = arr["positions"][t][:2]
                vals = "\t".join(f"{v:.6g}" for v in emb[t])
                fh.write(f"{t}\t{x:.3f}\t{y:.3f}\t{vals}\t{source}\n")
    print(f"wrote {out_path}")
    trainer.close()
    return 0


COMMANDS = {
    "train": (cmd_train, "run every training stage"),
    "train-wm": (cmd_train_wm, "prefill and train the world model with the agent"),
    "train-agent": (cmd_train_agent, "imagination-only agent updates on a fixed world model"),
    "train-wjepa": (cmd_train_wjepa, "train the CSI model on the frozen world model"),
    "train-power": (cmd_train_power, "train the power predictor on frozen CSI embeddings"),
    "rollout": (cmd_rollout, "one deployment episode with a per-slot trace"),
    "evaluate": (cmd_evaluate, "sweep methods and horizons over evaluation seeds"),
    "grad-check": (cmd_grad_check, "finite-difference checks of every loss"),
    "dump-embeddings": (cmd_dump_embeddings, "export per-slot CSI embeddings of a stored episode"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentlink", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value overrides, e.g. run.env_steps = 20000")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=sorted(config_mod.PRESETS), default="paper")
        p.add_argument("--out", default="runs/latest")
        if name == "rollout":
            p.add_argument("--method", choices=METHODS, default="closed_loop")
            p.add_argument("--episode-seed", type=int, default=None)
        if name == "dump-embeddings":
            p.add_argument("--episode", type=int, default=0)
            p.add_argument("--file", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command][0](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
