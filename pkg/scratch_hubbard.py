import time
import numpy as np
from symflow import flow as fl, symmetry as sym, targets as tg, trainer as tr

for beta in (1.0, 2.5, 4.0):
    target = tg.HubbardTarget(u_coupling=4.0, beta=beta, kappa_hop=1.0)
    rng = np.random.default_rng(1)
    model = fl.build_flow(2, 6, 4, 40, "relu", rng, prior_mean=0.0, prior_var=18.0)
    mods = [sym.SignFlipModulation(broken=False, name="mod_exact"),
            sym.SignFlipModulation(broken=True, component=1, name="mod_broken")]
    pen = sym.Penalty([sym.component_lambda(0, +1.0), sym.component_lambda(1, -1.0)])
    sampler = tr.Sampler(model, target, mode="sesamo", modulations=mods, penalty=pen)
    cfg = tr.TrainConfig(batch_size=1000, max_steps=6000, seed=1, checkpoint_every=0,
                         stop_ess=0.997, stop_patience=50)
    t0 = time.perf_counter()
    run = tr.train(sampler, cfg)
    wall = time.perf_counter() - t0
    rep = tr.evaluate(sampler, n_samples=100_000, seed=77)
    oracle = target.quadrature_breaking_ratio()
    print(f"beta={beta}: steps={len(run.metrics)} wall={wall:.0f}s "
          f"ess={rep['ess']:.4f} r_model={rep['r_model']:+.4f} "
          f"r_emp={rep['r_empirical']:+.4f} oracle={oracle:+.4f} "
          f"viol={rep['penalty_violation_rate']:.4f} b={rep['b']:+.4f}")
