"""Command line entry points: synth, verify, plan, plot.

Exit codes: 0 success, 1 error (bad input, malformed files), 2 infeasible
or failed (no certificate, verification failed, no plan).
"""
from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import fungen, plan as planmod, sim, synth
from .fungen import AdmissibleRegion, Certificate, CertificateError, Degrees, FunnelSetup, TimeGrid

log = logging.getLogger("funnelkit")

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config helpers


class Config:
    """configparser wrapper whose errors name the section, key and line."""

    def __init__(self, path: Path):
        self.path = Path(path)
        try:
            self.text = self.path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read: {exc.strerror}") from exc
        self.cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        self.cp.optionxform = str
        try:
            self.cp.read_string(self.text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc

    def line_of(self, section: str, key: str | None = None) -> int | None:
        in_sec = False
        for i, ln in enumerate(self.text.splitlines(), 1):
            s = ln.strip()
            if s.startswith("[") and s.endswith("]"):
                in_sec = s[1:-1].strip() == section
                if in_sec and key is None:
                    return i
                continue
            if in_sec and key is not None and s.split("=", 1)[0].strip() == key:
                return i
        return None

    def error(self, section: str, key: str | None, msg: str) -> ConfigError:
        line = self.line_of(section, key)
        where = f"{self.path}:{line}" if line else str(self.path)
        name = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{where}: {name}: {msg}")

    def has(self, section: str, key: str | None = None) -> bool:
        if key is None:
            return self.cp.has_section(section)
        return self.cp.has_option(section, key)

    def get(self, section: str, key: str, default=None, required: bool = False) -> str | None:
        if not self.cp.has_section(section):
            if required:
                raise self.error(section, None, "missing section")
            return default
        if key not in self.cp[section]:
            if required:
                raise self.error(section, key, "missing key")
            return default
        return self.cp[section][key]

    def number(self, section, key, default=None, required=False, kind=float):
        v = self.get(section, key, None, required)
        if v is None:
            return default
        try:
            return kind(v)
        except ValueError:
            raise self.error(section, key, f"expected a number, got {v!r}") from None

    def flag(self, section, key, default=False) -> bool:
        v = self.get(section, key)
        if v is None:
            return default
        if v.strip().lower() in ("1", "yes", "true", "on"):
            return True
        if v.strip().lower() in ("0", "no", "false", "off"):
            return False
        raise self.error(section, key, f"expected yes/no, got {v!r}")

    def rows(self, section, key, width: int, required=True) -> np.ndarray | None:
        v = self.get(section, key, None, required)
        if v is None:
            return None
        try:
            out = [[float(x) for x in ln.replace(",", " ").split()] for ln in v.replace(";", "\n").splitlines()
                   if ln.strip()]
        except ValueError:
            raise self.error(section, key, "expected numbers (inf allowed)") from None
        if not out or any(len(r) != width for r in out):
            raise self.error(section, key, f"expected rows of {width} numbers")
        return np.array(out)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else (self.path.parent / q)


# ---------------------------------------------------------------------------
# synth


def _model_params(cfg: Config) -> tuple[str, dict]:
    name = cfg.get("model", "name", required=True)
    params = {}
    for k, v in cfg.cp["model"].items():
        if k == "name":
            continue
        try:
            params[k] = float(v)
        except ValueError:
            raise cfg.error("model", k, f"expected a number, got {v!r}") from None
    try:
        fungen.build_model(name, params)
    except (ValueError, TypeError) as exc:
        raise cfg.error("model", "name", str(exc)) from None
    return name, params


def load_synth_config(path) -> dict:
    """Parse and validate a synthesis config (no solver runs)."""
    cfg = Config(path)
    name, params = _model_params(cfg)
    em = fungen.build_model(name, params)
    ref_names = em.ref.state + em.ref.inputs
    names = tuple((cfg.get("region", "names") or " ".join(ref_names)).split())
    if names != ref_names:
        raise cfg.error("region", "names", f"must be {' '.join(ref_names)}")
    nr = len(names)
    times_s = cfg.get("region", "times")
    times = tuple(float(t) for t in times_s.split()) if times_s else (0.0,)
    arrs = {}
    for key in ("nominal", "expand_lo", "expand_hi", "max_lo", "max_hi"):
        a = cfg.rows("region", key, nr)
        if a.shape[0] == 1 and len(times) > 1:
            a = np.repeat(a, len(times), axis=0)
        if a.shape[0] != len(times):
            raise cfg.error("region", key, f"expected {len(times)} rows (one per time)")
        arrs[key] = a
    try:
        region = AdmissibleRegion(names, times, arrs["nominal"], arrs["expand_lo"], arrs["expand_hi"],
                                  arrs["max_lo"], arrs["max_hi"])
    except ValueError as exc:
        raise cfg.error("region", None, str(exc)) from None
    stationary = cfg.flag("grid", "stationary", default=len(times) == 1)
    if stationary:
        grid = TimeGrid((0.0, 1.0))
    else:
        T = cfg.number("grid", "T", required=True)
        n = cfg.number("grid", "intervals", required=True, kind=int)
        if T <= 0 or n < 1:
            raise cfg.error("grid", "T", "need T > 0 and intervals >= 1")
        grid = TimeGrid.uniform(T, n)
    vdeg = cfg.number("degrees", "V", 2, kind=int)
    if vdeg % 2 == 1:
        raise cfg.error("degrees", "V", f"V degree must be even (got {vdeg})")
    if vdeg != 2:
        raise cfg.error("degrees", "V", f"only quadratic V (degree 2) is supported (got {vdeg})")
    dd = {}
    if cfg.has("degrees"):
        for k, v in cfg.cp["degrees"].items():
            if k == "V":
                continue
            if k not in Degrees.__dataclass_fields__:
                raise cfg.error("degrees", k, "unknown key")
            dd[k] = v
    try:
        degrees = Degrees.from_dict(dd)
    except ValueError as exc:
        raise cfg.error("degrees", None, str(exc)) from None
    for k in ("ctrl_e", "ctrl_r", "ctrl_total", "lam", "sigma", "s_in"):
        if getattr(degrees, k) < 0:
            raise cfg.error("degrees", k, "must be >= 0")
    for k in ("sigma", "s_in"):
        if getattr(degrees, k) % 2:
            raise cfg.error("degrees", k, "SOS multiplier degree must be even")
    mode = cfg.get("search", "mode", "line")
    if mode not in ("line", "fixed"):
        raise cfg.error("search", "mode", "expected 'line' or 'fixed'")
    seed_spec = cfg.get("search", "seed", "lqr")
    seed_path = None
    if seed_spec != "lqr":
        if not seed_spec.startswith("certificate:"):
            raise cfg.error("search", "seed", "expected 'lqr' or 'certificate:<path>'")
        seed_path = cfg.resolve(seed_spec.split(":", 1)[1].strip())
        if not seed_path.exists():
            raise cfg.error("search", "seed", f"no such file {seed_path}")
    opts = synth.AltOptions(max_rounds=cfg.number("search", "max_rounds", 25, kind=int),
                            eps=cfg.number("search", "eps", 1e-4),
                            freeze_v=cfg.flag("search", "freeze_v", False),
                            backend=cfg.get("search", "backend", "ipm"))
    if opts.backend not in ("ipm", "cvxopt"):
        raise cfg.error("search", "backend", "expected 'ipm' or 'cvxopt'")
    if opts.freeze_v and seed_path is None:
        raise cfg.error("search", "freeze_v", "a frozen V needs seed = certificate:<path>")
    stem = Path(path).stem
    return {
        "cfg": cfg, "model": (name, params), "em": em, "region": region, "grid": grid, "stationary": stationary,
        "degrees": degrees, "mode": mode, "p": cfg.number("search", "p", 1.0),
        "p_start": cfg.number("search", "p_start", 0.1), "p_tol": cfg.number("search", "p_tol", 0.01),
        "p_max": cfg.number("search", "p_max", 64.0), "gamma_min": cfg.number("search", "gamma_min", -10.0),
        "audit_points": cfg.number("search", "audit_points", 20000, kind=int), "seed_path": seed_path,
        "opts": opts, "certificate": cfg.get("output", "certificate", f"{stem}.cert"),
        "log": cfg.get("output", "log", f"{stem}_log.csv"),
        "targets": {k: float(v) for k, v in cfg.cp["targets"].items()} if cfg.has("targets") else {},
    }


def _make_setup_factory(c: dict):
    def make(p):
        return FunnelSetup(c["em"], c["region"].with_p(p), c["grid"], c["degrees"], c["gamma_min"],
                           c["stationary"], c["model"])
    return make


def _seed_factory(c: dict):
    if c["seed_path"] is None:
        return synth.lqr_seed
    V = Certificate.load(c["seed_path"]).V

    def seed(setup):
        if len(V) == setup.n_knots:
            return [v.lift(setup.Ze) if v.varset != setup.Ze else v for v in V]
        return [V[0]] * setup.n_knots
    return seed


def cmd_synth(args) -> int:
    c = load_synth_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    make = _make_setup_factory(c)
    seed = _seed_factory(c)
    t0 = time.perf_counter()
    rows: list = []
    if c["mode"] == "fixed":
        st = make(c["p"])
        res = synth.alternate(st, seed(st), c["opts"], rows, tag=f"p={c['p']:g}")
        synth.write_log(rows, out / c["log"])
        print(f"fixed region p={c['p']:g}: {res.reason}; best gamma {res.gamma:.6g}")
        if not res.success:
            print("no certificate: gamma did not reach < 0", file=sys.stderr)
            return EXIT_FAIL
        cert = synth.make_certificate(st, res, {"p": c["p"], "reason": res.reason})
        a = fungen.audit(cert, c["audit_points"], seed=args.seed)
        if not a.ok:
            print(f"certificate rejected by the sampling audit: {a}", file=sys.stderr)
            return EXIT_FAIL
    else:
        try:
            er = synth.expand_region(make, seed, c["opts"], p_tol=c["p_tol"], p_start=c["p_start"],
                                     p_max=c["p_max"], audit_points=c["audit_points"], seed_rng=args.seed)
        except synth.SynthesisError as exc:
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_FAIL
        rows = er.log_rows
        synth.write_log(rows, out / c["log"])
        cert = er.certificate
        print(f"line search: p* = {er.p:.6g} after {len(er.history)} attempts")
    cert.info["runtime_s"] = f"{time.perf_counter() - t0:.2f}"
    cert.save(out / c["certificate"])
    lo, hi = cert.region.box_at(0.0)
    for n, a, b in zip(cert.region.names, lo, hi):
        print(f"  {n}: [{a:.6g}, {b:.6g}]")
    print(f"  gamma = {cert.gamma:.6g}; level-set half-widths {np.round(fungen.levelset_box(cert), 6).tolist()}")
    print(f"wrote {out / c['certificate']} and {out / c['log']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    try:
        cert = Certificate.load(args.certificate)
    except OSError as exc:
        print(f"error: cannot read {args.certificate}: {exc.strerror}", file=sys.stderr)
        return EXIT_ERROR
    except CertificateError as exc:
        print(f"error: {args.certificate}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    a = fungen.audit(cert, args.audit_points, seed=args.seed)
    print(f"sampling audit: {'pass' if a.ok else 'FAIL'} (max dV/dt on boundary {a.worst_decrease:.3e}, "
          f"gamma {cert.gamma:.3e}; input margin {a.worst_input:.3e}; containment {a.worst_containment:.3e})")
    ok = a.ok
    if args.trials > 0:
        t0 = time.perf_counter()
        rep = sim.mc_invariance(cert, args.trials, seed=args.seed, threads=args.threads)
        dt = time.perf_counter() - t0
        print(f"monte carlo: {rep.trials} trials, {rep.violations} violations ({rep.gross} gross), "
              f"worst margin {rep.worst_margin:.3e}, {dt:.1f}s")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / (Path(args.certificate).stem + "_mc.csv")
        rep.write_csv(path)
        print(f"wrote {path}")
        ok = ok and rep.ok
    else:
        print("monte carlo skipped (trials = 0): sampling audit only")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    cfg = Config(args.config)
    try:
        sc = planmod.load_scenario(cfg.text)
    except (KeyError, ValueError, configparser.Error) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    certs = {}
    paths = {}
    for cid, p in sc.certificates.items():
        path = cfg.resolve(p)
        try:
            certs[cid] = Certificate.load(path)
        except OSError:
            raise cfg.error("certificates", cid, f"no such certificate file {path}") from None
        except CertificateError as exc:
            raise cfg.error("certificates", cid, str(exc)) from None
        paths[cid] = str(path.resolve())
    t0 = time.perf_counter()
    try:
        if sc.kind == "waypoints":
            if sc.goal is None or sc.t_goal is None:
                raise cfg.error("scenario", "goal", "waypoint plans need goal and t_goal")
            pl = planmod.plan_waypoints(sc.start, sc.goal, sc.waypoints, certs, sc.obstacles, t_goal=sc.t_goal,
                                        intervals_per_sec=int(sc.options.get("intervals_per_sec", 10)),
                                        order=sc.order)
        elif sc.kind == "rrt":
            if sc.goal_region is None:
                raise cfg.error("goal_region", None, "rrt plans need a goal region")
            cid = sc.options.get("certificate", next(iter(certs)))
            budget_iter = int(sc.budget.get("max_iter", 2000))
            wall = float(sc.budget.get("wall_time", 60))
            seed = args.seed
            pl = planmod.plan_rrt(sc.start, sc.goal_region, certs[cid], sc.obstacles, sc.workspace,
                                  max_iter=budget_iter, wall_time=wall, seed=seed,
                                  horizon=float(sc.options.get("horizon", 1.0)),
                                  intervals=int(sc.options.get("intervals", 5)), cert_id=cid)
        else:
            raise cfg.error("scenario", "kind", "expected 'waypoints' or 'rrt'")
    except planmod.PlanningFailure as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        for k, v in exc.stats.items():
            if k == "attempts":
                for a in v:
                    print(f"  waypoint {a[0]} with {a[1]}: {a[2]}", file=sys.stderr)
            else:
                print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_FAIL
    problems = pl.verify(sc.obstacles, sc.start)
    if problems:
        for p in problems:
            print(f"plan check failed: {p}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.config).stem
    pl.stats["planning_time_s"] = round(time.perf_counter() - t0, 3)
    text = pl.dumps(paths, sc.obstacles)
    (out / f"{stem}.plan").write_text(text)
    pl.write_csv(out / f"{stem}_plan.csv")
    print(f"plan: {len(pl.segments)} segments {' -> '.join(pl.cert_sequence) or '(empty)'}; "
          f"switch times {[round(t, 4) for t in pl.switch_times]}")
    print(f"wrote {out / (stem + '.plan')} and {out / (stem + '_plan.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(args.artifact)
    try:
        text = path.read_text()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    svg = out / (path.stem + ".svg")
    matplotlib.rcParams["svg.hashsalt"] = "funnelkit"
    meta = {"Date": None}
    if text.lstrip().startswith("[plan]"):
        pl, obstacles = planmod.load_plan_file(path)
        fig = plot_plan(pl, obstacles, plt)
    else:
        try:
            cert = Certificate.loads(text)
        except CertificateError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return EXIT_ERROR
        fig = plot_certificate(cert, plt)
    fig.savefig(svg, format="svg", metadata=meta)
    plt.close(fig)
    print(f"wrote {svg}")
    return EXIT_OK


def plot_plan(pl, obstacles, plt):
    em = pl.segments[0].instance.em if pl.segments else None
    fig, ax = plt.subplots(figsize=(7, 5))
    if em is None:
        ax.set_title("empty plan")
        return fig
    names = em.plant.state
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    ids = sorted(set(pl.cert_sequence))
    if em.plant.name == "pendulum":
        i = names.index("th")
        for s in pl.segments:
            ts, xs, us = s.instance.ref.dense(em.ref, 4)
            box = np.array([planmod.funnel_state_box(s.instance, t, x) for t, x in zip(ts, xs)])
            c = colors[ids.index(s.cert_id) % len(colors)]
            ax.fill_between(ts, box[:, 0, i], box[:, 1, i], color=c, alpha=0.3, label=s.cert_id)
            ax.plot(ts, xs[:, i], color=c)
        T = pl.segments[-1].t_end
        for ob in obstacles:
            if ob.box is None or "th" not in ob.box:
                continue
            lo, hi = ob.box["th"]
            a, b = max(ob.active[0], 0.0), min(ob.active[1], T)
            ylo, yhi = ax.get_ylim()
            ax.fill_between([a, b], max(lo, ylo - 1), min(hi, yhi + 1), color="k", alpha=0.25, label=ob.name)
        ax.set_xlabel("t [s]")
        ax.set_ylabel("theta [rad]")
    else:
        ix, iy = names.index("x"), names.index("y")
        from matplotlib.patches import Circle, Rectangle
        for s in pl.segments:
            ts, xs, us = s.instance.ref.dense(em.ref, 2)
            c = colors[ids.index(s.cert_id) % len(colors)]
            for t, x in zip(ts, xs):
                lo, hi = planmod.funnel_state_box(s.instance, t, x)
                ax.add_patch(Rectangle((lo[ix], lo[iy]), hi[ix] - lo[ix], hi[iy] - lo[iy], fill=False,
                                       edgecolor=c, alpha=0.3, linewidth=0.6))
            ax.plot(xs[:, ix], xs[:, iy], color=c)
        for ob in obstacles:
            if ob.box is not None and "x" in ob.box and "y" in ob.box:
                (a, b), (c_, d) = ob.box["x"], ob.box["y"]
                ax.add_patch(Rectangle((a, c_), b - a, d - c_, color="k", alpha=0.4))
            elif ob.disc_coords == ("x", "y"):
                ax.add_patch(Circle(ob.center, ob.radius, color="k", alpha=0.4))
        ax.set_aspect("equal")
        ax.autoscale_view()
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    handles, labels = ax.get_legend_handles_labels()
    uniq = dict(zip(labels, handles))
    ax.legend(uniq.values(), uniq.keys(), loc="best")
    ax.set_title(f"{len(pl.segments)} funnel segments")
    return fig


def plot_certificate(cert: Certificate, plt):
    em = cert.error_model()
    P = cert.P_at(0.0)
    fig, ax = plt.subplots(figsize=(5, 5))
    pairs = [(0, 1)] if len(em.errors) <= 2 else [(i, i + 1) for i in range(0, len(em.errors) - 1, 2)]
    th = np.linspace(0, 2 * math.pi, 400)
    for (i, j) in pairs:
        # projection of the ellipsoid onto the (i, j) plane
        S = np.linalg.inv(P)[np.ix_([i, j], [i, j])] * cert.beta
        L = np.linalg.cholesky(S)
        pts = L @ np.vstack([np.cos(th), np.sin(th)])
        ax.plot(pts[0], pts[1], label=f"{em.errors[i]} vs {em.errors[j]}")
        wi, wj = em.tracking_box[em.errors[i]], em.tracking_box[em.errors[j]]
        ax.plot([-wi, wi, wi, -wi, -wi], [-wj, -wj, wj, wj, -wj], linestyle="--", linewidth=0.8)
    ax.set_aspect("equal")
    ax.legend(loc="best")
    ax.set_title(f"{cert.model} level set (p = {cert.region.p:.3g})")
    return fig


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="funnelkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config: bool):
        if config:
            p.add_argument("--config", required=True, help="config or scenario file")
        p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=1, help="cap on worker processes")
        p.add_argument("--out-dir", default=".", help="output directory")

    p = sub.add_parser("synth", help="synthesize a funnel generator certificate")
    common(p, True)
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("verify", help="audit a certificate and run the Monte Carlo check")
    p.add_argument("certificate")
    p.add_argument("--trials", type=int, default=1000, help="Monte Carlo trials; 0 = sampling audit only")
    p.add_argument("--audit-points", type=int, default=100_000)
    common(p, False)
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("plan", help="plan with funnels from a scenario file")
    common(p, True)
    p.set_defaults(func=cmd_plan)
    p = sub.add_parser("plot", help="SVG of a plan or a certificate")
    p.add_argument("artifact")
    common(p, False)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except CertificateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
