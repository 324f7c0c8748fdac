import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ReducedQP
from twogrid_afem.assembly import assemble
from twogrid_afem.kkt import ActiveSetState, KktSingularError, KktToleranceError, kkt_matrix, solve_kkt
from twogrid_afem.mesh import build_initial, lshape

from conftest import smooth_f, smooth_ud

BOUNDS = ((-1.0, -1.0), (1.0, 1.0))


def zero(x, y):
    return (0 * x, 0 * y)


def dense_reference(sys, active, rho, bounds, y_d):
    """Full unpinned system with identity rows for fixed dofs, solved by least squares.

    Zero-mean rows fix the pressure constants; returns full-length fields.
    """
    A2, M2, D = sys.A2.toarray(), sys.M2.toarray(), sys.D.toarray()
    I, Q = sys.vel_dofs, sys.ctrl_dofs
    nI, nq, k = len(I), len(Q), sys.n_p
    ya, yb = (np.asarray(b, float) for b in bounds)
    nc = sys.n_contact
    comp = np.arange(2 * nc) // nc
    fixed = active.lower | active.upper
    fpos = sys.contact_pos[fixed]
    fval = np.where(active.lower, ya[comp], yb[comp])[fixed]
    nF = len(fpos)
    E = np.zeros((nq, nF))
    E[fpos, np.arange(nF)] = 1.0
    L = rho * A2 + M2
    Z = np.zeros
    blocks = [
        [A2[np.ix_(I, I)], A2[np.ix_(I, Q)], -D[I], Z((nI, nI)), Z((nI, k)), Z((nI, nF))],
        [D[I].T, D[Q].T, Z((k, k)), Z((k, nI)), Z((k, k)), Z((k, nF))],
        [-M2[np.ix_(I, I)], -M2[np.ix_(I, Q)], Z((nI, k)), A2[np.ix_(I, I)], D[I], Z((nI, nF))],
        [Z((k, nI)), Z((k, nq)), Z((k, k)), D[I].T, Z((k, k)), Z((k, nF))],
        [M2[np.ix_(Q, I)], L[np.ix_(Q, Q)], Z((nq, k)), -A2[np.ix_(Q, I)], -D[Q], E],
        [Z((nF, nI)), E.T, Z((nF, k)), Z((nF, nI)), Z((nF, k)), Z((nF, nF))],
    ]
    K = np.block(blocks)
    rhs = np.concatenate(
        [sys.F1[I], np.zeros(k), -sys.F2[I], np.zeros(k), sys.F2[Q] + rho * A2[np.ix_(Q, Q)] @ y_d, fval]
    )
    area = sys.coarse_area
    rows = [np.concatenate([Z(nI + nq), area, Z(nI + k + nF)])]
    const_r = np.concatenate([Z(nI + nq + k + nI), np.ones(k), Z(nF)])
    if np.abs(K @ const_r).max() < 1e-12:
        # a constant r is only free when no free control dof carries flux
        rows.append(np.concatenate([Z(nI + nq + k + nI), area, Z(nF)]))
    K = np.vstack([K] + rows)
    rhs = np.concatenate([rhs, np.zeros(len(rows))])
    x = np.linalg.lstsq(K, rhs, rcond=None)[0]
    o = np.cumsum([0, nI, nq, k, nI, k, nF])
    w = np.zeros(2 * sys.nv)
    w[I] = x[o[0] : o[1]]
    y = np.zeros(2 * sys.nv)
    y[Q] = x[o[1] : o[2]]
    phi = np.zeros(2 * sys.nv)
    phi[I] = x[o[3] : o[4]]
    mu = np.zeros(nq)
    mu[fpos] = x[o[5] : o[6]]
    return w, y, x[o[2] : o[3]], phi, x[o[4] : o[5]], mu


def random_active(rng, n_pairs):
    pat = rng.integers(-1, 2, n_pairs)
    return ActiveSetState(pat < 0, pat > 0)


def test_zero_data_zero_solution(square_mesh):
    s = assemble(square_mesh, zero, zero)
    sol = solve_kkt(s, ActiveSetState.empty(2 * s.n_contact), 0.1, BOUNDS, np.zeros(2 * s.n_q))
    for v in (sol.w, sol.y, sol.p, sol.phi, sol.r, sol.mu):
        assert np.abs(v).max() == 0.0


def test_all_active_closed_contact_boundary():
    s = assemble(build_initial(lshape(), 0.5), zero, zero)
    n = 2 * s.n_contact
    state = ActiveSetState(np.zeros(n, bool), np.ones(n, bool))
    sol = solve_kkt(s, state, 0.1, ((-2.0, -2.0), (1.0, 1.0)), np.zeros(2 * s.n_q))
    nv = s.nv
    c = s.contact
    assert np.all(sol.y[c] == 1.0) and np.all(sol.y[c + nv] == 1.0)
    assert sol.report.residual_norm <= 1e-10
    area = s.coarse_area
    assert abs(area @ sol.r) <= 1e-12 * area.sum() * max(1.0, np.abs(sol.r).max())


def test_all_active_with_net_flux_is_singular(square_sys):
    s = square_sys
    n = 2 * s.n_contact
    state = ActiveSetState(np.zeros(n, bool), np.ones(n, bool))
    with pytest.raises(KktSingularError) as info:
        solve_kkt(s, state, 0.1, BOUNDS, np.zeros(2 * s.n_q))
    assert info.value.mode == "constant adjoint pressure"


@pytest.mark.parametrize("seed", range(6))
def test_matches_dense_solve(square2, seed):
    rng = np.random.default_rng(seed)
    s = assemble(square2, smooth_f, smooth_ud)
    y_d = rng.normal(size=2 * s.n_q)
    state = random_active(rng, 2 * s.n_contact)
    rho = 10.0 ** rng.uniform(-3, 0)
    try:
        sol = solve_kkt(s, state, rho, BOUNDS, y_d)
    except KktSingularError:
        pytest.skip("pattern fixes every flux-carrying dof with a net flux")
    assert sol.report.residual_norm <= 1e-10
    ref = dense_reference(s, state, rho, BOUNDS, y_d)
    for got, want in zip((sol.w, sol.y, sol.p, sol.phi, sol.r, sol.mu), ref):
        assert np.max(np.abs(got - want)) <= 1e-8 * max(1.0, np.abs(want).max())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_block_residuals_and_structure(square_sys, seed):
    s = square_sys
    rng = np.random.default_rng(seed)
    state = random_active(rng, 2 * s.n_contact)
    y_d = rng.normal(size=2 * s.n_q)
    sol = solve_kkt(s, state, 0.01, BOUNDS, y_d)
    assert all(v <= 1e-10 for v in sol.report.block_residuals.values())
    fixed = np.zeros(2 * s.n_q, bool)
    fixed[s.contact_pos[state.lower | state.upper]] = True
    assert np.all(sol.mu[~fixed] == 0.0)
    yc = sol.y[s.ctrl_dofs][s.contact_pos]
    nc = s.n_contact
    comp = np.arange(2 * nc) // nc
    lo, hi = np.array(BOUNDS[0])[comp], np.array(BOUNDS[1])[comp]
    assert np.array_equal(yc[state.lower], lo[state.lower])
    assert np.array_equal(yc[state.upper], hi[state.upper])
    area = s.coarse_area
    assert abs(area @ sol.p) <= 1e-12 * area.sum() * max(1.0, np.abs(sol.p).max())
    # velocities vanish on the Dirichlet boundary
    d = s.mesh.dirichlet_vertices
    for v in (sol.w, sol.y, sol.phi):
        assert np.all(v[d] == 0.0) and np.all(v[d + s.nv] == 0.0)
    # u = w + y is discretely divergence free, and so is phi
    assert np.abs(s.D.T @ (sol.w + sol.y)).max() <= 1e-10
    assert np.abs(s.D.T @ sol.phi).max() <= 1e-10


@pytest.mark.parametrize("rho", [1e-2, 1.0])
def test_unconstrained_matches_reduced_qp(square_sys, rho):
    s = square_sys
    y_d = s.to_control(s.interpolate(lambda x, y: (np.cos(x + y), x - y)))
    sol = solve_kkt(s, ActiveSetState.empty(2 * s.n_contact), rho, BOUNDS, y_d)
    y_ref, _ = ReducedQP(s, rho, y_d).solve()
    assert np.max(np.abs(sol.y[s.ctrl_dofs] - y_ref)) <= 1e-9 * max(1.0, np.abs(y_ref).max())


def test_tolerance_failure_reports_residual(square_sys):
    s = square_sys
    with pytest.raises(KktToleranceError) as info:
        solve_kkt(s, ActiveSetState.empty(2 * s.n_contact), 0.01, BOUNDS, np.ones(2 * s.n_q), tol=0.0)
    assert info.value.residual > 0.0


def test_input_validation(square_sys):
    s = square_sys
    state = ActiveSetState.empty(2 * s.n_contact)
    with pytest.raises(ValueError):
        solve_kkt(s, state, 0.0, BOUNDS, np.zeros(2 * s.n_q))
    with pytest.raises(ValueError):
        solve_kkt(s, state, 0.1, BOUNDS, np.zeros(3))
    with pytest.raises(ValueError):
        solve_kkt(s, ActiveSetState.empty(3), 0.1, BOUNDS, np.zeros(2 * s.n_q))
    with pytest.raises(ValueError):
        ActiveSetState([True], [True])


def test_matrix_square_and_nonsingular(square2):
    s = assemble(square2, smooth_f, smooth_ud)
    K = kkt_matrix(s, ActiveSetState.empty(2 * s.n_contact), 0.1, BOUNDS)
    assert K.shape[0] == K.shape[1]
    assert np.linalg.matrix_rank(K.toarray()) == K.shape[0]


def test_active_set_helpers():
    st_ = ActiveSetState([True, False, False], [False, False, True])
    assert st_.n_lower == 1 and st_.n_upper == 1
    assert st_.inactive.tolist() == [False, True, False]
    assert st_.pairs(np.array([7, 9, 11]), "upper") == {(11, 0)}
    assert st_.same_sets(ActiveSetState([True, False, False], [False, False, True]))
