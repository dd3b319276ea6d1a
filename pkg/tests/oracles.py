"""Independent reference implementations used to cross-check the package.

Everything here deliberately avoids the code paths under test: the QP
reference enumerates active sets over a dense KKT factorization, and the
model-based controller derives its prediction matrices directly from the
plant matrices.
"""

from __future__ import annotations

from itertools import product

import numpy as np


def solve_qp_reference(problem, feas_tol=1e-7):
    """Global optimum of a small box-constrained convex QP by enumeration.

    Every assignment of {free, at-lower, at-upper} to the inequality rows
    yields an equality-constrained QP solved through its dense KKT system;
    the feasible candidate with the smallest objective is the optimum.
    Requires at most ~6 inequality rows.

    Returns:
        (z_star, objective)
    """
    P, q = problem.P, problem.q
    Aeq, beq = problem.Aeq, problem.beq
    G, lo, hi = problem.Gineq, problem.lower, problem.upper
    d = P.shape[0]
    c = G.shape[0]
    if c > 6:
        raise ValueError("enumeration oracle limited to 6 inequality rows")

    choices = []
    for i in range(c):
        opts = [("free", None)]
        if np.isfinite(lo[i]):
            opts.append(("low", lo[i]))
        if np.isfinite(hi[i]):
            opts.append(("high", hi[i]))
        choices.append(opts)

    best_z, best_obj = None, np.inf
    for combo in product(*choices) if c else [()]:
        act_rows = [G[i] for i, (kind, _) in enumerate(combo) if kind != "free"]
        act_vals = [val for (kind, val) in combo if kind != "free"]
        A_act = np.vstack([Aeq] + [np.atleast_2d(r) for r in act_rows]) if (
            Aeq.shape[0] or act_rows
        ) else np.zeros((0, d))
        b_act = np.concatenate([beq, np.array(act_vals)])
        e = A_act.shape[0]
        K = np.block([[P, A_act.T], [A_act, np.zeros((e, e))]])
        rhs = np.concatenate([-q, b_act])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        if np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-8 * max(
            1.0, np.max(np.abs(rhs), initial=0.0)
        ):
            continue  # inconsistent KKT for this active set
        z = sol[:d]
        if Aeq.shape[0] and np.max(np.abs(Aeq @ z - beq)) > feas_tol:
            continue
        if c:
            Gz = G @ z
            if np.any(Gz < lo - feas_tol) or np.any(Gz > hi + feas_tol):
                continue
        obj = 0.5 * z @ P @ z + q @ z
        if obj < best_obj - 1e-12:
            best_obj = obj
            best_z = z
    if best_z is None:
        raise RuntimeError("enumeration oracle found no feasible candidate")
    return best_z, float(best_obj)


def simulate_lti(A, B, C, x0, u_seq):
    """Outputs y_k = C x_k for the given input sequence; returns (ys, x_end)."""
    x = np.asarray(x0, dtype=float).copy()
    ys = []
    for u in np.atleast_2d(u_seq):
        ys.append(C @ x)
        x = A @ x + B @ u
    return np.array(ys), x


def closed_form_state(A, B, x0, u_seq, w_seq=None):
    """x_k from the explicit convolution sum (independent of step recursion)."""
    n = A.shape[0]
    k = len(u_seq)
    Ak = np.linalg.matrix_power(A, k)
    x = Ak @ x0
    for j in range(k):
        term = B @ u_seq[j]
        if w_seq is not None:
            term = term + w_seq[j]
        x = x + np.linalg.matrix_power(A, k - 1 - j) @ term
    return x


def estimate_state_from_window(A, B, C, u_ini, y_ini):
    """Recover the state after the window from past inputs/outputs.

    Solves the stacked observability system for the window's initial state,
    then rolls it forward through the recorded inputs.  Needs the window to
    be at least as long as the observability index.
    """
    n = A.shape[0]
    T_ini = len(u_ini)
    p = C.shape[0]
    m = u_ini.shape[1]
    O = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(T_ini)])
    forced = np.zeros(T_ini * p)
    for k in range(T_ini):
        for j in range(k):
            forced[k * p : (k + 1) * p] += (
                C @ np.linalg.matrix_power(A, k - 1 - j) @ B @ u_ini[j]
            )
    x0, *_ = np.linalg.lstsq(O, y_ini.ravel() - forced, rcond=None)
    x = x0
    for j in range(T_ini):
        x = A @ x + B @ u_ini[j]
    return x


def mpc_first_input(A, B, C, u_ini, y_ini, ref, Q, R):
    """First input of unconstrained condensed model-based MPC.

    Builds prediction matrices directly from (A, B, C): the state is
    estimated from the window, outputs over the horizon are
    ``y = Phi x_t + Gamma u``, and the strictly convex tracking problem is
    solved in closed form.
    """
    n = A.shape[0]
    m = B.shape[1]
    p = C.shape[0]
    ref = np.atleast_2d(ref)
    N = ref.shape[0]
    x_t = estimate_state_from_window(A, B, C, u_ini, y_ini)

    Phi = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(N)])
    Gamma = np.zeros((N * p, N * m))
    for k in range(N):
        for j in range(k):
            Gamma[k * p : (k + 1) * p, j * m : (j + 1) * m] = (
                C @ np.linalg.matrix_power(A, k - 1 - j) @ B
            )
    Qbar = np.kron(np.eye(N), Q * np.eye(p) if np.isscalar(Q) else Q)
    Rbar = np.kron(np.eye(N), R * np.eye(m) if np.isscalar(R) else R)
    H = Gamma.T @ Qbar @ Gamma + Rbar
    rhs = Gamma.T @ Qbar @ (ref.ravel() - Phi @ x_t)
    u = np.linalg.solve(H, rhs)
    return u[:m], u.reshape(N, m)
