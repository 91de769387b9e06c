"""Funnel generator for a double integrator, end to end in a few seconds.

Synthesizes a certificate over a small admissible region, audits it, runs a
Monte Carlo invariance check and prints the feedback law.

    python3 demos/double_integrator.py
"""
import numpy as np

from funnelkit import fungen, sim, synth


def main():
    em = fungen.build_model("double_integrator", {"input_bound": 10.0})
    names = em.ref.state + em.ref.inputs
    # reference position, speed and input may each move 0.3 away from zero
    region = fungen.AdmissibleRegion.constant(names, [0, 0, 0], [-0.3] * 3, [0.3] * 3, [-1] * 3, [1] * 3, 1.0)
    setup = fungen.FunnelSetup(em, region, model=("double_integrator", {"input_bound": 10.0}))
    res = synth.alternate(setup, synth.lqr_seed(setup))
    print(f"alternation: {res.reason}; gamma = {res.gamma:.4g}")
    cert = synth.make_certificate(setup, res)
    a = fungen.audit(cert, 20_000)
    print(f"audit: {'pass' if a.ok else 'FAIL'}; worst dV/dt on the boundary {a.worst_decrease:.3g}")
    print("V(e) =", cert.V[0])
    print("u = u_r +", cert.U[0][0])
    print("level-set half-widths:", np.round(fungen.levelset_box(cert), 4))
    rep = sim.mc_invariance(cert, trials=200, seed=0)
    print(f"monte carlo: {rep.violations} violations in {rep.trials} trials (worst V - beta {rep.worst_margin:.2e})")


if __name__ == "__main__":
    main()
