import sys, time
import numpy as np
from pcbf.scenarios import make_rover
from pcbf.scenarios.base import make_controller
from pcbf.sim import run, SimConfig, trace_stats

seeds = [int(s) for s in sys.argv[1:]] or [0]
for seed in seeds:
    sc = make_rover(seed=seed)
    ctrl = make_controller(sc)
    t0 = time.perf_counter()
    trace = run(sc, ctrl, SimConfig(t_final=60.0))
    wall = time.perf_counter() - t0
    st = trace_stats(trace)
    min_cl = min(r.clearance for r in trace)
    umax = max(float(np.max(np.abs(r.u))) for r in trace)
    dist = sum(np.hypot(*(b.x[:2] - a.x[:2])) for a, b in zip(trace, trace[1:]))
    print(f"seed {seed:2d}: min_h={st['min_phi']:+.3e} min_rho={st['min_rho']:+.3e} "
          f"min_cl={min_cl:+.3e} umax={umax:.6f} dist={dist:.1f} "
          f"guard_hits={ctrl.guard_hits} wall={wall:.1f}s")
