"""Small block-structured semidefinite programs.

Standard form::

    minimize    sum_b <C_b, X_b> + f^T s
    subject to  sum_b <A_jb, X_b> + sum_k B_jk s_k = b_j,   j = 1..m
                X_b PSD,  s free

The in-repo backend is a primal-dual interior-point method on the
homogeneous self-dual embedding (HKM search direction, Mehrotra
predictor-corrector). Solutions report one of ``optimal``, ``feasible``,
``infeasible``, ``unbounded`` or ``max_iter``. Other conic solvers can be
plugged in with :func:`register_backend`.

Constraint coefficients are stored per block as ``(i, j, v)`` triplets with
``i <= j`` meaning ``v * X[i, j]`` appears in the linear functional (for an
off-diagonal entry this is the *combined* weight of ``X[i, j]`` and
``X[j, i]``).

Text dump format (one item per line, ``#`` comments allowed)::

    sdp 1
    block <name> <dim>            (repeated)
    free <name>                   (repeated)
    rhs <j> <b_j>                 (one per constraint, defines m)
    a <j> <block> <i> <k> <v>     (block coefficient; i <= k)
    af <j> <free> <v>             (free-scalar coefficient)
    c <block> <i> <k> <v>         (objective, same convention)
    cf <free> <v>
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

MAX_BLOCK_DIM = 200
MAX_CONSTRAINTS = 20000
PSD_FLOOR = 1e-7  # eigenvalue slack allowed after polishing, same order as feas_tol


@dataclass
class Tolerances:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-7
    max_iter: int = 200
    infeas_tol: float = 1e-6


class SdpProblem:
    """Builder for a block SDP; see module docstring for conventions."""

    def __init__(self):
        self.blocks: dict[str, int] = {}
        self.free: dict[str, int] = {}
        self.rhs: list[float] = []
        self._a: list[tuple[int, str, int, int, float]] = []
        self._af: list[tuple[int, str, float]] = []
        self._c: dict[tuple[str, int, int], float] = {}
        self._cf: dict[str, float] = {}

    # -- building -----------------------------------------------------------
    def add_block(self, name: str, dim: int) -> str:
        if name in self.blocks or name in self.free:
            raise ValueError(f"duplicate variable name {name!r}")
        if dim < 1:
            raise ValueError("block dimension must be >= 1")
        self.blocks[name] = int(dim)
        return name

    def add_free(self, name: str) -> str:
        if name in self.blocks or name in self.free:
            raise ValueError(f"duplicate variable name {name!r}")
        self.free[name] = len(self.free)
        return name

    @property
    def n_constraints(self) -> int:
        return len(self.rhs)

    def add_constraint(self, block_terms=None, free_terms=None, rhs: float = 0.0) -> int:
        """Append ``sum <A, X> + sum B s = rhs``; returns the row index.

        ``block_terms`` maps block name to an iterable of ``(i, j, v)``;
        ``free_terms`` maps free-scalar names to coefficients.
        """
        j = len(self.rhs)
        self.rhs.append(float(rhs))
        for bname, trip in (block_terms or {}).items():
            n = self.blocks[bname]
            for i, k, v in trip:
                if i > k:
                    i, k = k, i
                if not (0 <= i < n and 0 <= k < n):
                    raise IndexError(f"entry ({i},{k}) outside block {bname!r} of dim {n}")
                if v != 0.0:
                    self._a.append((j, bname, i, k, float(v)))
        for fname, v in (free_terms or {}).items():
            if fname not in self.free:
                raise KeyError(f"unknown free scalar {fname!r}")
            if v != 0.0:
                self._af.append((j, fname, float(v)))
        return j

    def add_objective(self, block_terms=None, free_terms=None) -> None:
        for bname, trip in (block_terms or {}).items():
            for i, k, v in trip:
                if i > k:
                    i, k = k, i
                key = (bname, i, k)
                self._c[key] = self._c.get(key, 0.0) + float(v)
        for fname, v in (free_terms or {}).items():
            if fname not in self.free:
                raise KeyError(f"unknown free scalar {fname!r}")
            self._cf[fname] = self._cf.get(fname, 0.0) + float(v)

    @property
    def has_objective(self) -> bool:
        return any(v != 0 for v in self._c.values()) or any(v != 0 for v in self._cf.values())

    def scaled(self, lam: float) -> "SdpProblem":
        """Copy with ``b`` and the objective multiplied by ``lam``."""
        out = SdpProblem()
        out.blocks = dict(self.blocks)
        out.free = dict(self.free)
        out.rhs = [lam * b for b in self.rhs]
        out._a = list(self._a)
        out._af = list(self._af)
        out._c = {k: lam * v for k, v in self._c.items()}
        out._cf = {k: lam * v for k, v in self._cf.items()}
        return out

    # -- evaluation helpers -------------------------------------------------
    def residual(self, blocks: dict[str, np.ndarray], scalars: dict[str, float]) -> np.ndarray:
        """``A(X) + B s - b`` for a candidate point."""
        r = -np.asarray(self.rhs, dtype=float)
        for j, bname, i, k, v in self._a:
            r[j] += v * blocks[bname][i, k]
        for j, fname, v in self._af:
            r[j] += v * scalars[fname]
        return r

    def objective_value(self, blocks, scalars) -> float:
        val = 0.0
        for (bname, i, k), v in self._c.items():
            val += v * blocks[bname][i, k]
        for fname, v in self._cf.items():
            val += v * scalars[fname]
        return val

    # -- text format --------------------------------------------------------
    def dumps(self) -> str:
        lines = ["sdp 1"]
        lines += [f"block {n} {d}" for n, d in self.blocks.items()]
        lines += [f"free {n}" for n in self.free]
        lines += [f"rhs {j} {b!r}" for j, b in enumerate(self.rhs)]
        lines += [f"a {j} {bn} {i} {k} {v!r}" for j, bn, i, k, v in self._a]
        lines += [f"af {j} {fn} {v!r}" for j, fn, v in self._af]
        lines += [f"c {bn} {i} {k} {v!r}" for (bn, i, k), v in self._c.items()]
        lines += [f"cf {fn} {v!r}" for fn, v in self._cf.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SdpProblem":
        p = cls()
        rhs: dict[int, float] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            ln = raw.split("#", 1)[0].strip()
            if not ln:
                continue
            f = ln.split()
            try:
                tag = f[0]
                if tag == "sdp":
                    continue
                elif tag == "block":
                    p.add_block(f[1], int(f[2]))
                elif tag == "free":
                    p.add_free(f[1])
                elif tag == "rhs":
                    rhs[int(f[1])] = float(f[2])
                elif tag == "a":
                    p._a.append((int(f[1]), f[2], int(f[3]), int(f[4]), float(f[5])))
                elif tag == "af":
                    p._af.append((int(f[1]), f[2], float(f[3])))
                elif tag == "c":
                    p._c[(f[1], int(f[2]), int(f[3]))] = float(f[4])
                elif tag == "cf":
                    p._cf[f[1]] = float(f[2])
                else:
                    raise ValueError(f"unknown tag {tag!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        m = max(rhs, default=-1) + 1
        p.rhs = [rhs.get(j, 0.0) for j in range(m)]
        return p


@dataclass
class SdpSolution:
    status: str
    blocks: dict[str, np.ndarray] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)
    y: np.ndarray | None = None
    primal_objective: float = math.nan
    dual_objective: float = math.nan
    primal_residual: float = math.nan
    iterations: int = 0
    solve_time: float = 0.0
    certificate: np.ndarray | None = None  # Farkas ray when infeasible

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")

    @property
    def objective(self) -> float:
        return self.primal_objective


# ---------------------------------------------------------------------------
# backends

_BACKENDS: dict[str, Callable[[SdpProblem, Tolerances], SdpSolution]] = {}


def register_backend(name: str, fn: Callable[[SdpProblem, Tolerances], SdpSolution]) -> None:
    _BACKENDS[name] = fn


def solve(problem: SdpProblem, tolerances: Tolerances | None = None, backend: str = "ipm", **overrides) -> SdpSolution:
    tol = tolerances or Tolerances()
    if overrides:
        tol = Tolerances(**{**tol.__dict__, **overrides})
    if backend not in _BACKENDS:
        raise KeyError(f"unknown SDP backend {backend!r}; have {sorted(_BACKENDS)}")
    t0 = time.perf_counter()
    sol = _BACKENDS[backend](problem, tol)
    sol.solve_time = time.perf_counter() - t0
    return sol


class _Data:
    """Dense/sparse matrices of a problem, rows normalized."""

    def __init__(self, p: SdpProblem):
        if any(d > MAX_BLOCK_DIM for d in p.blocks.values()):
            raise ValueError(f"block larger than {MAX_BLOCK_DIM}")
        if p.n_constraints > MAX_CONSTRAINTS:
            raise ValueError(f"more than {MAX_CONSTRAINTS} constraints")
        self.names = list(p.blocks)
        self.dims = [p.blocks[n] for n in self.names]
        self.m = m = p.n_constraints
        self.nf = len(p.free)
        bidx = {n: k for k, n in enumerate(self.names)}
        rows = [[] for _ in self.names]
        cols = [[] for _ in self.names]
        vals = [[] for _ in self.names]
        for j, bn, i, k, v in p._a:
            b = bidx[bn]
            n = self.dims[b]
            if i == k:
                rows[b].append(j); cols[b].append(i * n + i); vals[b].append(v)
            else:
                rows[b] += [j, j]; cols[b] += [i * n + k, k * n + i]; vals[b] += [v / 2, v / 2]
        self.A = []
        for b, n in enumerate(self.dims):
            self.A.append(sp.csr_matrix((vals[b], (rows[b], cols[b])), shape=(m, n * n)))
        Bm = np.zeros((m, self.nf))
        for j, fn, v in p._af:
            Bm[j, p.free[fn]] += v
        self.B = Bm
        self.b = np.asarray(p.rhs, dtype=float)
        self.C = [np.zeros((n, n)) for n in self.dims]
        for (bn, i, k), v in p._c.items():
            b = bidx[bn]
            if i == k:
                self.C[b][i, i] += v
            else:
                self.C[b][i, k] += v / 2
                self.C[b][k, i] += v / 2
        self.f = np.zeros(self.nf)
        for fn, v in p._cf.items():
            self.f[p.free[fn]] += v
        # row normalization
        norms = np.sqrt(sum(np.asarray(A.multiply(A).sum(axis=1)).ravel() for A in self.A) + (Bm ** 2).sum(axis=1)) \
            if m else np.zeros(0)
        self.empty_rows = np.flatnonzero(norms == 0)
        norms[norms == 0] = 1.0
        self.row_scale = 1.0 / norms
        D = sp.diags(self.row_scale)
        self.A = [sp.csr_matrix(D @ A) for A in self.A]
        self.B = self.row_scale[:, None] * self.B
        self.b = self.row_scale * self.b
        # per-block row subsets to keep Schur assembly local
        self.block_rows = []
        self.A_sub = []
        self.A_dense = []
        for b, A in enumerate(self.A):
            r = np.unique(A.nonzero()[0])
            self.block_rows.append(r)
            sub = A[r]
            self.A_sub.append(sub)
            n = self.dims[b]
            self.A_dense.append(sub.toarray().reshape(len(r), n, n) if len(r) * n * n <= 4e7 else None)
        self.AT_csc = [A.T.tocsc() for A in self.A]

    def apply_A(self, X: list[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.m)
        for A, x in zip(self.A, X):
            out += A @ x.ravel()
        return out

    def apply_AT(self, y: np.ndarray) -> list[np.ndarray]:
        return [(AT @ y).reshape(n, n) for AT, n in zip(self.AT_csc, self.dims)]


def _sym(M):
    return (M + M.T) / 2


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return 0.0
    Li = sla.solve_triangular(L, np.eye(len(X)), lower=True)
    w = np.linalg.eigvalsh(_sym(Li @ dX @ Li.T))
    lo = w[0]
    return math.inf if lo >= 0 else -1.0 / lo


def _ipm(problem: SdpProblem, tol: Tolerances) -> SdpSolution:
    d = _Data(problem)
    m, nf = d.m, d.nf
    for j in d.empty_rows:
        if abs(problem.rhs[j]) > tol.feas_tol:
            ray = np.zeros(m)
            ray[j] = math.copysign(1.0, problem.rhs[j])
            return SdpSolution("infeasible", certificate=ray)
    nblk = len(d.dims)
    X = [np.eye(n) for n in d.dims]
    Z = [np.eye(n) for n in d.dims]
    y = np.zeros(m)
    s = np.zeros(nf)
    tau, kappa = 1.0, 1.0
    N = sum(d.dims) + 1
    bnorm = 1.0 + np.linalg.norm(d.b)
    cnorm = 1.0 + math.sqrt(sum(np.sum(C * C) for C in d.C) + d.f @ d.f)

    def inner(U, V):
        return sum(float(np.sum(u * v)) for u, v in zip(U, V))

    status = "max_iter"
    it = 0
    reg = 1e-13
    for it in range(1, tol.max_iter + 1):
        ATy = d.apply_AT(y)
        r_p = d.apply_A(X) + d.B @ s - d.b * tau
        r_d = [ATy[k] + Z[k] - d.C[k] * tau for k in range(nblk)]
        r_f = d.B.T @ y - d.f * tau
        cx = inner(d.C, X) + d.f @ s
        by = d.b @ y
        r_g = cx - by + kappa
        mu = (inner(X, Z) + tau * kappa) / N

        # convergence tests
        pres = np.linalg.norm(r_p) / tau / bnorm
        dres = math.sqrt(sum(np.sum(r * r) for r in r_d) + r_f @ r_f) / tau / cnorm
        pobj, dobj = cx / tau, by / tau
        gap = abs(pobj - dobj) / max(1.0, abs(pobj))
        log.debug("ipm %3d pres %.2e dres %.2e gap %.2e mu %.2e tau %.2e kappa %.2e", it, pres, dres, gap, mu, tau, kappa)
        if pres <= tol.feas_tol and dres <= tol.feas_tol and gap <= tol.gap_tol:
            abs_res = np.max(np.abs(r_p / d.row_scale), initial=0.0) / tau
            if abs_res > tol.feas_tol:
                log.debug("ipm: absolute residual %.2e, polishing", abs_res)
                fixed = _polish(d, X, s, tau, tol.feas_tol)
                if fixed is not None:
                    pobj_f = (inner(d.C, fixed[0]) + d.f @ fixed[1]) / tau
                    if abs(pobj_f - dobj) <= tol.gap_tol * max(1.0, abs(pobj_f)):
                        X, s = fixed
                        abs_res = 0.0
            if abs_res <= tol.feas_tol:
                status = "optimal" if problem.has_objective else "feasible"
                break
        # infeasibility: Farkas ray y with b^T y > 0 and -A^T y PSD
        if by > 0:
            ray_res = math.sqrt(sum(np.sum((ATy[k] + Z[k]) ** 2) for k in range(nblk)) + (d.B.T @ y) @ (d.B.T @ y)) / by
            if ray_res <= tol.infeas_tol and tau / max(kappa, 1e-300) < 1e-3:
                if _verify_farkas(d, y / by, tol.infeas_tol):
                    status = "infeasible"
                    break
        if cx < 0:
            ray_res = np.linalg.norm(d.apply_A(X) + d.B @ s) / -cx
            if ray_res <= tol.infeas_tol and tau / max(kappa, 1e-300) < 1e-3:
                status = "unbounded"
                break

        # Schur complement M = A H A^T with H(W) = sym(X W Z^-1)
        Zi = [np.linalg.inv(Zk) for Zk in Z]
        Zi = [_sym(z) for z in Zi]
        M = np.zeros((m, m))
        for k in range(nblk):
            rows = d.block_rows[k]
            if len(rows) == 0:
                continue
            n = d.dims[k]
            Ad = d.A_dense[k]
            if Ad is not None:
                T = X[k][None, :, :] @ Ad @ Zi[k][None, :, :]
                Mk = d.A_sub[k] @ T.reshape(len(rows), n * n).T
            else:
                Mk = np.zeros((len(rows), len(rows)))
                for jj in range(len(rows)):
                    Aj = d.A_sub[k][jj].toarray().reshape(n, n)
                    Mk[:, jj] = d.A_sub[k] @ (X[k] @ Aj @ Zi[k]).ravel()
            M[np.ix_(rows, rows)] += _sym(Mk)
        M[np.diag_indices_from(M)] += reg * max(1.0, np.trace(M) / max(m, 1))

        try:
            kkt = _KKT(M, d.B)
        except np.linalg.LinAlgError:
            log.debug("ipm: singular Schur complement at iteration %d", it)
            break

        def H(W, k):
            return _sym(X[k] @ W @ Zi[k])

        Hc = [H(d.C[k], k) for k in range(nblk)]
        g1 = d.apply_A(Hc) + d.b

        def direction(eta, Rc, r_tau):
            Hrd = [H(r_d[k], k) for k in range(nblk)]
            h1 = -eta * r_p - d.apply_A(Rc) - eta * d.apply_A(Hrd)
            h2 = -eta * r_f
            uy, us = kkt.solve(h1, h2)
            vy, vs = kkt.solve(g1, d.f)
            ATuy, ATvy = d.apply_AT(uy), d.apply_AT(vy)
            Xu = [Rc[k] + eta * Hrd[k] + H(ATuy[k], k) for k in range(nblk)]
            Xv = [H(ATvy[k], k) - Hc[k] for k in range(nblk)]
            den = inner(d.C, Xv) + d.f @ vs - d.b @ vy - kappa / tau
            num = -eta * r_g - inner(d.C, Xu) - d.f @ us + d.b @ uy - r_tau / tau
            dtau = num / den
            dkap = (r_tau - kappa * dtau) / tau
            dy = uy + vy * dtau
            ds = us + vs * dtau
            dX = [Xu[k] + Xv[k] * dtau for k in range(nblk)]
            ATdy = d.apply_AT(dy)
            dZ = [_sym(-eta * r_d[k] - ATdy[k] + d.C[k] * dtau) for k in range(nblk)]
            return dX, dZ, dy, ds, dtau, dkap

        def step_len(dX, dZ, dtau, dkap):
            a = math.inf
            for k in range(nblk):
                a = min(a, _max_step(X[k], dX[k]), _max_step(Z[k], dZ[k]))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        try:
            # predictor
            Rc_aff = [_sym(-X[k]) for k in range(nblk)]
            dXa, dZa, dya, dsa, dta, dka = direction(1.0, Rc_aff, -tau * kappa)
            a_aff = min(1.0, step_len(dXa, dZa, dta, dka))
            mu_aff = (inner([X[k] + a_aff * dXa[k] for k in range(nblk)],
                            [Z[k] + a_aff * dZa[k] for k in range(nblk)])
                      + (tau + a_aff * dta) * (kappa + a_aff * dka)) / N
            sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
            # corrector (second-order HKM term)
            Rc = [_sym(sigma * mu * Zi[k] - X[k] - dXa[k] @ dZa[k] @ Zi[k]) for k in range(nblk)]
            r_tau = sigma * mu - tau * kappa - dta * dka
            dX, dZ, dy, ds, dtau, dkap = direction(1.0 - sigma, Rc, r_tau)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            log.debug("ipm: linear algebra failure at iteration %d", it)
            break
        alpha = min(1.0, 0.98 * step_len(dX, dZ, dtau, dkap))
        if not np.isfinite(alpha) or alpha <= 1e-12:
            break
        X = [_sym(X[k] + alpha * dX[k]) for k in range(nblk)]
        Z = [_sym(Z[k] + alpha * dZ[k]) for k in range(nblk)]
        y = y + alpha * dy
        s = s + alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkap
        # keep the embedding well scaled
        scale = max(tau, kappa)
        if scale > 1e6 or scale < 1e-6:
            X = [x / scale for x in X]; Z = [z / scale for z in Z]
            y, s, tau, kappa = y / scale, s / scale, tau / scale, kappa / scale

    sol = SdpSolution(status=status, iterations=it)
    names_free = list(problem.free)
    if status in ("optimal", "feasible", "max_iter"):
        sol.blocks = {n: X[k] / tau for k, n in enumerate(d.names)}
        sol.scalars = {n: float(s[i] / tau) for i, n in enumerate(names_free)}
        sol.y = d.row_scale * y / tau
        sol.primal_objective = problem.objective_value(sol.blocks, sol.scalars)
        sol.dual_objective = float(np.dot(problem.rhs, sol.y)) if m else 0.0
        sol.primal_residual = float(np.max(np.abs(problem.residual(sol.blocks, sol.scalars)), initial=0.0))
    elif status == "infeasible":
        by = d.b @ y
        sol.certificate = d.row_scale * y / by
    elif status == "unbounded":
        sol.blocks = {n: X[k] for k, n in enumerate(d.names)}
        sol.scalars = {n: float(s[i]) for i, n in enumerate(names_free)}
    return sol


def _polish(d: _Data, X, s, tau, feas_tol: float, rounds: int = 20):
    """Minimal-norm correction onto the equalities in the original row scale.

    The objective is pinned at its current value by one extra row, so the
    correction does not reopen the duality gap. Alternates the affine correction with eigenvalue clipping of each block
    until the point is feasible to ``feas_tol`` and PSD up to ``PSD_FLOOR``.
    Returns the corrected ``(X, s)`` (still homogenized by ``tau``) or None.
    """
    Dinv = sp.diags(1.0 / d.row_scale)
    K = sp.hstack([Dinv @ A for A in d.A] + [sp.csr_matrix(d.B / d.row_scale[:, None])]).tocsr()
    rhs = d.b / d.row_scale
    z = np.concatenate([x.ravel() / tau for x in X] + [s / tau])
    c = np.concatenate([Ck.ravel() for Ck in d.C] + [d.f])
    if (cn := np.linalg.norm(c)) > 0:
        K = sp.vstack([K, sp.csr_matrix(c / cn)]).tocsr()
        rhs = np.append(rhs, c @ z / cn)
    for it in range(rounds):
        dz = spla.lsqr(K, rhs - K @ z, atol=1e-15, btol=1e-15, iter_lim=10 * K.shape[1])[0]
        z = z + dz
        res = np.max(np.abs(K @ z - rhs), initial=0.0)
        if res > feas_tol:
            log.debug("polish: residual %.2e", res)
            return None
        blocks, off, worst = [], 0, np.inf
        for n in d.dims:
            w, Q = np.linalg.eigh(_sym(z[off:off + n * n].reshape(n, n)))
            blocks.append((off, n, w, Q))
            worst = min(worst, w[0])
            off += n * n
        if worst >= -PSD_FLOOR:
            out = [_sym(z[o:o + n * n].reshape(n, n)) * tau for o, n, _, _ in blocks]
            return out, z[off:] * tau
        log.debug("polish %d: eig %.2e, clipping", it, worst)
        for o, n, w, Q in blocks:
            if w[0] < 0:
                z[o:o + n * n] = ((Q * np.maximum(w, 0.0)) @ Q.T).ravel()
    return None


def _verify_farkas(d: _Data, y: np.ndarray, tol: float) -> bool:
    """Independent check of a primal infeasibility ray (b^T y = 1)."""
    ATy = d.apply_AT(y)
    scale = 1.0 + np.linalg.norm(y)
    for S, n in zip(ATy, d.dims):
        if np.linalg.eigvalsh(_sym(S))[-1] > tol * scale:
            return False
    if nf := d.nf:
        if np.max(np.abs(d.B.T @ y)) > tol * scale:
            return False
    return True


class _KKT:
    """Solves [[M, B], [B^T, 0]] [u; v] = [h1; h2]."""

    def __init__(self, M, B):
        self.B = B
        self.nf = B.shape[1]
        self.rho = 0.0
        try:
            self.cho = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            # rows touching only free variables leave M singular; M + rho B B^T
            # gives the same solution when B^T u = h2 holds
            scale = max(1.0, np.trace(M) / max(len(M), 1))
            M2 = M
            if self.nf:
                BB = B @ B.T
                self.rho = scale / max(np.trace(BB) / max(len(M), 1), 1e-300)
                M2 = M + self.rho * BB
            self.cho = None
            for bump in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
                try:
                    self.cho = sla.cho_factor(M2 + bump * scale * np.eye(len(M)), lower=True, check_finite=False)
                    break
                except np.linalg.LinAlgError:
                    continue
            if self.cho is None:
                raise np.linalg.LinAlgError("Schur complement is numerically singular")
        if self.nf:
            self.MiB = sla.cho_solve(self.cho, B, check_finite=False)
            S = B.T @ self.MiB
            S = _sym(S)
            S[np.diag_indices_from(S)] += 1e-14 * max(1.0, np.trace(S) / self.nf)
            self.S_lu = sla.lu_factor(S, check_finite=False)

    def solve(self, h1, h2):
        if self.rho:
            h1 = h1 + self.rho * (self.B @ h2)
        Mih = sla.cho_solve(self.cho, h1, check_finite=False)
        if not self.nf:
            return Mih, np.zeros(0)
        v = sla.lu_solve(self.S_lu, self.B.T @ Mih - h2, check_finite=False)
        u = Mih - self.MiB @ v
        return u, v


register_backend("ipm", _ipm)


def _cvxopt_backend(problem: SdpProblem, tol: Tolerances) -> SdpSolution:
    """Adapter for cvxopt's conelp (free scalars split into +/- parts)."""
    import cvxopt
    from cvxopt import solvers

    names = list(problem.blocks)
    dims = [problem.blocks[n] for n in names]
    off = {}
    nx = 0
    for n, dm in zip(names, dims):
        off[n] = nx
        nx += dm * (dm + 1) // 2
    nfree = len(problem.free)
    nvar = nx + nfree
    # variable vector: svec-less upper-triangle entries of each block, then free scalars
    def idx(n, i, k):
        dm = problem.blocks[n]
        if i > k:
            i, k = k, i
        return off[n] + i * dm - i * (i - 1) // 2 + (k - i)

    m = problem.n_constraints
    Aeq = np.zeros((m, nvar))
    for j, bn, i, k, v in problem._a:
        Aeq[j, idx(bn, i, k)] += v
    for j, fn, v in problem._af:
        Aeq[j, nx + problem.free[fn]] += v
    c = np.zeros(nvar)
    for (bn, i, k), v in problem._c.items():
        c[idx(bn, i, k)] += v
    for fn, v in problem._cf.items():
        c[nx + problem.free[fn]] += v
    rows = []
    for n, dm in zip(names, dims):
        G = np.zeros((dm * dm, nvar))
        for i in range(dm):
            for k in range(dm):
                G[i + k * dm, idx(n, i, k)] = -1.0
        rows.append(G)
    G = np.vstack(rows) if rows else np.zeros((0, nvar))
    h = np.zeros(G.shape[0])
    solvers.options.update(dict(show_progress=False, abstol=tol.gap_tol, reltol=tol.gap_tol,
                                feastol=tol.feas_tol, maxiters=tol.max_iter))
    # drop dependent rows for cvxopt's rank requirement
    q, r, piv = sla.qr(Aeq.T, pivoting=True, mode="economic")
    rank = int(np.sum(np.abs(np.diag(r)) > 1e-10 * max(1.0, abs(r[0, 0]) if r.size else 1.0))) if r.size else 0
    keep = np.sort(piv[:rank])
    res = solvers.conelp(cvxopt.matrix(c), cvxopt.matrix(G), cvxopt.matrix(h),
                         dims={"l": 0, "q": [], "s": dims},
                         A=cvxopt.matrix(Aeq[keep]), b=cvxopt.matrix(np.asarray(problem.rhs)[keep]))
    st = res["status"]
    if st == "primal infeasible":
        return SdpSolution("infeasible")
    if st == "dual infeasible":
        return SdpSolution("unbounded")
    x = np.array(res["x"]).ravel()
    blocks = {}
    for n, dm in zip(names, dims):
        Xb = np.zeros((dm, dm))
        for i in range(dm):
            for k in range(i, dm):
                Xb[i, k] = Xb[k, i] = x[idx(n, i, k)]
        blocks[n] = Xb
    scalars = {fn: float(x[nx + q_]) for fn, q_ in problem.free.items()}
    status = ("optimal" if problem.has_objective else "feasible") if st == "optimal" else "max_iter"
    return SdpSolution(status, blocks, scalars,
                       primal_objective=problem.objective_value(blocks, scalars),
                       primal_residual=float(np.max(np.abs(problem.residual(blocks, scalars)), initial=0.0)))


register_backend("cvxopt", _cvxopt_backend)
