"""Pendulum evasion with the shipped region certificates.

Plans region 1 -> region 2 -> region 1 past a timed obstacle on theta,
rolls the plan out from a point on the first funnel's boundary and writes
an SVG of the funnels.

    python3 demos/pendulum_evasion.py [out_dir]
"""
import math
import sys
from pathlib import Path

import numpy as np

from funnelkit import cli, sim
from funnelkit.plan import load_plan_file

ROOT = Path(__file__).resolve().parents[1]


def main(out_dir="runs/demo"):
    out = Path(out_dir)
    code = cli.main(["plan", "--config", str(ROOT / "scenarios" / "pendulum_evasion.ini"), "--out-dir", str(out)])
    if code != 0:
        return code
    pl, obstacles = load_plan_file(out / "pendulum_evasion.plan")
    cert = pl.segments[0].instance.cert
    em = cert.error_model()
    P = cert.P_at(0.0)
    e0 = np.linalg.solve(np.linalg.cholesky(P).T, [math.cos(1.0), math.sin(1.0)])
    outs = sim.rollout_plan(pl, em.plant, e0)
    ob = obstacles[0]
    for seg, r in zip(pl.segments, outs):
        on = (r.t >= ob.active[0]) & (r.t <= ob.active[1])
        low = r.x[on, 0].min() if on.any() else float("nan")
        print(f"{seg.cert_id:8s} t = [{r.t[0]:.2f}, {r.t[-1]:.2f}]  max V = {r.V.max():.4f}  "
              f"min theta while the obstacle is active = {low:.3f}")
    return cli.main(["plot", str(out / "pendulum_evasion.plan"), "--out-dir", str(out)])


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
