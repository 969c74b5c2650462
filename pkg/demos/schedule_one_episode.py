"""Compare the scheduling methods on one episode of a trained smoke run.

Train first (about 25 minutes on one core):

    latentlink train --preset smoke --seed 7 --out runs/smoke
    python demos/schedule_one_episode.py runs/smoke

For the closed-loop method every planning decision is listed: the predicted
power for each offset in the cycle and the offset that was picked.
"""

import sys

import numpy as np

from latentlink.pipeline import load_config
from latentlink.pipeline.evaluate import eval_seeds, load_trained, paired_methods

out = sys.argv[1] if len(sys.argv) > 1 else "runs/smoke"
trainer = load_trained(load_config(None, "smoke", 7), out)
seed = eval_seeds(trainer.cfg, 1)[0]
runs = paired_methods(trainer, ("closed_loop", "power_agnostic", "no_prediction", "action_repeat"), [seed],
                      horizon=6, kappa=3)

closed = runs["closed_loop"][0]
print("closed-loop plans (offset, predicted power per offset in W)")
for d in closed.log[:10]:
    preds = " ".join(f"{p:.3f}" for p in d["predicted"])
    print(f"  slot {d['slot']:3d}: offset {d['offset']}  [{preds}]" + ("  OUTAGE" if d["outage"] else ""))

print("\nmethod           return  power(W)  power(dB)  overhead(kbit)")
for name, (m,) in runs.items():
    print(f"{name:15s} {m.normalized_return:7.3f} {m.mean_power:9.4f} {m.mean_power_db:10.2f}"
          f" {m.overhead_bits / 1e3:14.1f}")
agn = runs["power_agnostic"][0].mean_power
print(f"\nclosed loop vs power agnostic: {10 * np.log10(agn / closed.mean_power):.2f} dB")
trainer.close()
