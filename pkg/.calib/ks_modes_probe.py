import json
import numpy as np
import msshadow as ms

out = {}
for seed in (5, 9, 17):
    sysk = ms.KuramotoSivashinsky(n=127, length=128.0, c=0.8)
    rng = np.random.default_rng(seed)
    u0 = rng.uniform(0, 1, 127)
    us = ms.advance(sysk, u0, -1000.0, 0.0, 0.02)
    traj = ms.integrate(sysk, us, 0.0, 100.0, 0.02, stride=500)
    led = ms.CostLedger()
    b = ms.assemble_rhs(traj, led)
    pc = ms.build_preconditioner(traj, led, 15, 2, rng=np.random.default_rng(1))
    obj = ms.SpatialMean(sysk)
    row = {}
    for mode in ('pre', 'post'):
        cfg = ms.SolveConfig(tol=1e-5, max_iter=2000, gamma=0.09, mode=mode,
                             preconditioner=pc)
        w, rep = ms.cg_solve(lambda z: ms.schur_apply(traj, led, z), b, cfg)
        v = ms.recover_checkpoints(traj, led, w)
        row[mode] = (ms.evaluate_sensitivity(traj, obj, v), rep.iterations)
    cfg = ms.SolveConfig(tol=1e-6, max_iter=20000, gamma=0.0, mode='none',
                         preconditioner=pc)
    w, rep = ms.cg_solve(lambda z: ms.schur_apply(traj, led, z), b, cfg)
    v = ms.recover_checkpoints(traj, led, w)
    row['exact'] = (ms.evaluate_sensitivity(traj, obj, v), rep.iterations)
    out[seed] = row
    print(seed, row, flush=True)

with open('/root/pkg/.calib/ks_modes.json', 'w') as fh:
    json.dump(out, fh, indent=1)
