import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funnelkit.sdp import SdpProblem, Tolerances, solve


def planted(rng, n, m, with_objective=True):
    """Random problem with a known interior feasible point X0 = M M^T + I."""
    M = rng.normal(size=(n, n))
    X0 = M @ M.T + np.eye(n)
    p = SdpProblem()
    p.add_block("X", n)
    As = []
    for _ in range(m):
        A = rng.normal(size=(n, n))
        A = A + A.T
        As.append(A)
        trip = [(i, k, A[i, k] * (1 if i == k else 2)) for i in range(n) for k in range(i, n)]
        p.add_constraint({"X": trip}, rhs=float(np.sum(A * X0)))
    C = None
    if with_objective:
        # C = G G^T keeps the objective bounded below on the PSD cone
        G = rng.normal(size=(n, n))
        C = G @ G.T
        p.add_objective({"X": [(i, k, C[i, k] * (1 if i == k else 2)) for i in range(n) for k in range(i, n)]})
    return p, As, C


def test_scalar_minimum():
    p = SdpProblem()
    p.add_block("X", 1)
    p.add_constraint({"X": [(0, 0, 1)]}, rhs=1)
    p.add_objective({"X": [(0, 0, 1)]})
    s = solve(p)
    assert s.status == "optimal"
    assert abs(s.primal_objective - 1) <= 1e-6


def test_scalar_infeasible_with_certificate():
    p = SdpProblem()
    p.add_block("X", 1)
    p.add_constraint({"X": [(0, 0, 1)]}, rhs=-1)
    s = solve(p)
    assert s.status == "infeasible"
    # Farkas ray: A^T y negative semidefinite and b^T y > 0
    y = np.asarray(s.certificate)
    assert 1.0 * y[0] <= 1e-9 and -1.0 * y[0] > 0


def test_min_trace_offdiagonal():
    p = SdpProblem()
    p.add_block("X", 2)
    p.add_constraint({"X": [(0, 1, 1)]}, rhs=1)
    p.add_objective({"X": [(0, 0, 1), (1, 1, 1)]})
    s = solve(p)
    assert s.status == "optimal"
    assert abs(s.primal_objective - 2) <= 1e-6
    assert np.allclose(s.blocks["X"], [[1, 1], [1, 1]], atol=1e-6)


def test_unbounded_is_status_not_crash():
    p = SdpProblem()
    p.add_block("X", 1)
    p.add_free("t")
    p.add_constraint({"X": [(0, 0, 1)]}, rhs=1)
    p.add_objective(free_terms={"t": 1})
    s = solve(p)
    assert s.status in ("unbounded", "max_iter")
    assert not s.ok


def test_free_scalar():
    p = SdpProblem()
    p.add_block("X", 1)
    p.add_free("t")
    p.add_constraint({"X": [(0, 0, -1)]}, {"t": 1}, 0)
    p.add_constraint({"X": [(0, 0, 1)]}, rhs=3)
    p.add_objective(free_terms={"t": 1})
    s = solve(p)
    assert s.ok and abs(s.scalars["t"] - 3) <= 1e-6


def test_planted_feasible_instances():
    rng = np.random.default_rng(0)
    for trial in range(100):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(1, n * (n + 1) // 2))
        p, _, _ = planted(rng, n, m, with_objective=False)
        s = solve(p)
        assert s.ok, (trial, s.status)
        X = s.blocks["X"]
        assert np.linalg.eigvalsh(X).min() >= -1e-7
        assert np.abs(p.residual(s.blocks, s.scalars)).max() <= 1e-6


def test_against_cvxpy_oracle():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, m = 4, 5
        p, As, C = planted(rng, n, m)
        s = solve(p)
        assert s.status == "optimal"
        X = cp.Variable((n, n), symmetric=True)
        cons = [X >> 0] + [cp.trace(A @ X) == b for A, b in zip(As, p.rhs)]
        prob = cp.Problem(cp.Minimize(cp.trace(C @ X)), cons)
        prob.solve(solver=cp.CLARABEL)
        assert abs(s.primal_objective - prob.value) <= 1e-5 * (1 + abs(prob.value))


def _scaled_copy(p, b_factor, c_factor):
    q = SdpProblem.loads(p.dumps())
    q.rhs = [b_factor * b for b in q.rhs]
    q._c = {k: c_factor * v for k, v in q._c.items()}
    return q


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
@settings(max_examples=20, deadline=None)
def test_scaling_property(seed, lam):
    # the optimum is homogeneous of degree one in b and in C separately
    rng = np.random.default_rng(seed)
    p, _, _ = planted(rng, 3, 3)
    tol = Tolerances()
    a = solve(p, tol).primal_objective
    for fb, fc, factor in ((lam, 1.0, lam), (1.0, lam, lam), (lam, lam, lam * lam)):
        s = solve(_scaled_copy(p, fb, fc), tol)
        assert s.status == "optimal"
        assert abs(s.primal_objective - factor * a) <= 10 * tol.gap_tol * max(1.0, abs(factor * a))
    assert np.isclose(solve(p.scaled(lam), tol).primal_objective, lam * lam * a, rtol=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_duality_gap_and_psd(seed):
    rng = np.random.default_rng(seed)
    p, _, _ = planted(rng, 3, 4)
    s = solve(p)
    assert s.status == "optimal"
    tol = Tolerances()
    assert abs(s.primal_objective - s.dual_objective) <= tol.gap_tol * max(1.0, abs(s.primal_objective))
    assert np.linalg.eigvalsh(s.blocks["X"]).min() >= -1e-7


def test_text_round_trip():
    rng = np.random.default_rng(1)
    p, _, _ = planted(rng, 3, 2)
    q = SdpProblem.loads(p.dumps())
    assert q.dumps() == p.dumps()
    assert abs(solve(q).primal_objective - solve(p).primal_objective) <= 1e-9


def test_loads_reports_line():
    with pytest.raises(ValueError, match="line 2"):
        SdpProblem.loads("sdp 1\nblock X\n")


def test_dimension_errors():
    p = SdpProblem()
    p.add_block("X", 2)
    with pytest.raises(IndexError):
        p.add_constraint({"X": [(0, 2, 1.0)]}, rhs=0)
    with pytest.raises(ValueError):
        p.add_block("X", 1)
