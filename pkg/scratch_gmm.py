import time
import numpy as np
from symflow import flow as fl, symmetry as sym, targets as tg, trainer as tr

rng = np.random.default_rng(0)
target = tg.GmmTarget(8, 12.0)
model = fl.build_flow(2, 6, 4, 40, "relu", rng)
sampler = tr.Sampler(model, target, mode="sesamo",
                     modulations=[sym.RotationModulation(8)],
                     penalty=sym.Penalty(sym.sector_lambda_pair(8)))
cfg = tr.TrainConfig(batch_size=1000, max_steps=4000, seed=0, checkpoint_every=0)

t0 = time.perf_counter()
run = tr.train(sampler, cfg)
t1 = time.perf_counter()
ess = run.metric_series("ess")
loss = run.metric_series("loss")
viol = run.metric_series("penalty_violation_rate")
for s in range(0, 4000, 250):
    print(f"step {s:5d} loss {loss[s]:10.3f} ess {ess[s]:.4f} viol {viol[s]:.4f}")
print(f"final batch ess {ess[-1]:.4f}  wall {t1-t0:.1f}s  ({(t1-t0)/len(ess)*1000:.1f} ms/step)")
rep = tr.evaluate(sampler, n_samples=100_000, seed=99)
print("eval:", rep)
