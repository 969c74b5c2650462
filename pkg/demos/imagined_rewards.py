"""Ask a trained world model what each action is worth from the start line.

The reset frame is filtered into a latent state, then each action is held
for ten imagined steps and the predicted rewards are summed. A useful world
model ranks accelerating above braking long before the agent is good.

    python demos/imagined_rewards.py runs/smoke
"""

import sys

import numpy as np

from latentlink import substrate as S
from latentlink.envsim import ACTION_NAMES
from latentlink.pipeline import load_config
from latentlink.pipeline.evaluate import load_trained
from latentlink.pipeline.train import eval_mode

out = sys.argv[1] if len(sys.argv) > 1 else "runs/smoke"
trainer = load_trained(load_config(None, "smoke", 7), out)
world, scale = trainer.world, trainer.cfg.control.reward_scale
rng = np.random.default_rng(0)
frame, _ = trainer.env.reset(0)

with S.precision(np.float64), eval_mode(world):
    start = world.observe_sequence(frame[None, None], np.array([[-1]]), world.initial_state(1, rng), rng)[-1]
    for action, name in enumerate(ACTION_NAMES):
        traj = world.imagine(start, lambda feat, _rng, a=action: np.full(len(feat), a), 10, rng)
        reward = traj.rewards[:, 0] / scale
        alive = np.cumprod(traj.discounts[:, 0])
        print(f"{name:10s} imagined progress {reward.sum():.4f}  cumulative discount {alive[-1]:.2f}")
trainer.close()
