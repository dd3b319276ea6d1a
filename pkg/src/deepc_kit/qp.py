"""Convex quadratic programming via ADMM operator splitting.

Solves problems of the form::

    minimize    1/2 z' P z + q' z
    subject to  Aeq z = beq
                lower <= Gineq z <= upper

with P symmetric positive semidefinite.  Internally both constraint kinds
are stacked into ``l <= A z <= u`` (equality rows have ``l = u``) and the
splitting iteration alternates a regularized KKT solve with a projection
onto the bound box, using over-relaxation and periodic step-size (rho)
adaptation.  Ruiz equilibration tames badly scaled cost weights.

The per-iteration loop is the package's hottest kernel and ships in two
builds selected by ``DEEPC_KIT_NUMBA`` (see :mod:`deepc_kit._accel`): a
numba ``@njit`` build with hand-rolled triangular solves and a vectorized
numpy/scipy build.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from ._accel import HAS_NUMBA, jit, numba_enabled

__all__ = [
    "QuadraticProgram",
    "QpSolution",
    "SolverSettings",
    "solve_qp",
    "dump_problem",
    "load_problem",
]

_STATUS_SOLVED = 1
_STATUS_MAX_ITER = 0
_STATUS_INFEASIBLE = -1

_STATUS_NAMES = {
    _STATUS_SOLVED: "solved",
    _STATUS_MAX_ITER: "max_iterations",
    _STATUS_INFEASIBLE: "infeasible",
}

# Equilibration guards (entries with norms below the regularizer are left
# unscaled; per-pass scale factors are clipped to the min/max band).
_SCALING_REG = 1e-8
_MIN_SCALING = 1e-4
_MAX_SCALING = 1e4


def _as_matrix(x, rows, cols, name):
    arr = np.asarray(x, dtype=float).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class QuadraticProgram:
    """Canonical convex QP consumed by :func:`solve_qp`.

    Attributes:
        P: ``(d, d)`` symmetric PSD cost matrix.
        q: ``(d,)`` linear cost vector.
        Aeq: ``(e, d)`` equality constraint matrix (may have zero rows).
        beq: ``(e,)`` equality right-hand side.
        Gineq: ``(c, d)`` inequality matrix (may have zero rows).
        lower: ``(c,)`` lower bounds, entries may be ``-inf``.
        upper: ``(c,)`` upper bounds, entries may be ``+inf``.
    """

    P: np.ndarray
    q: np.ndarray
    Aeq: np.ndarray
    beq: np.ndarray
    Gineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        d = P.shape[0]
        scale = max(1.0, float(np.max(np.abs(P))) if P.size else 1.0)
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("P must be symmetric within 1e-12")
        q = np.asarray(self.q, dtype=float).reshape(d)
        Aeq = _as_matrix(self.Aeq, -1, d, "Aeq") if np.size(self.Aeq) else np.zeros((0, d))
        beq = np.asarray(self.beq, dtype=float).reshape(Aeq.shape[0])
        Gineq = (
            _as_matrix(self.Gineq, -1, d, "Gineq") if np.size(self.Gineq) else np.zeros((0, d))
        )
        c = Gineq.shape[0]
        lower = np.asarray(self.lower, dtype=float).reshape(c)
        upper = np.asarray(self.upper, dtype=float).reshape(c)
        if np.any(lower > upper):
            raise ValueError("lower must not exceed upper")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(beq))):
            raise ValueError("q and beq must be finite")
        for name, val in (
            ("P", P),
            ("q", q),
            ("Aeq", Aeq),
            ("beq", beq),
            ("Gineq", Gineq),
            ("lower", lower),
            ("upper", upper),
        ):
            object.__setattr__(self, name, val)

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass(frozen=True)
class QpSolution:
    """Result of a solve.

    ``status`` is one of ``"solved"``, ``"max_iterations"``, or
    ``"infeasible"``.  ``y_dual`` holds the stacked constraint multipliers
    (equalities first) and can seed the next warm start.
    """

    z_star: np.ndarray
    objective: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    y_dual: np.ndarray

    @property
    def solved(self) -> bool:
        return self.status == "solved"


@dataclass(frozen=True)
class SolverSettings:
    """ADMM settings; the defaults are the ones every caller should want.

    ``alpha`` (over-relaxation), ``adapt_every`` (rho adaptation period),
    and the stall-based infeasibility gate are algorithm constants exposed
    mainly for experimentation; identical settings and inputs give
    bit-identical iterate sequences.
    """

    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    alpha: float = 1.6
    sigma: float = 1e-6
    rho0: float = 0.1
    adapt_every: int = 25
    stall_limit: int = 500
    eps_prim_inf: float = 1e-4
    scaling: bool = True
    scaling_iters: int = 10

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("eps_abs and eps_rel must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


def _equilibrate(P, q, A, settings):
    """Modified Ruiz equilibration; returns scaled data plus D, E, c."""
    n = P.shape[0]
    mc = A.shape[0]
    d = np.ones(n)
    e = np.ones(mc)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    if not settings.scaling:
        return Ps, qs, As, d, e, c
    for _ in range(settings.scaling_iters):
        col_norm_P = np.max(np.abs(Ps), axis=0) if n else np.zeros(0)
        col_norm_A = np.max(np.abs(As), axis=0) if mc else np.zeros(n)
        norms_d = np.maximum(col_norm_P, col_norm_A)
        delta_d = np.where(norms_d > _SCALING_REG, 1.0 / np.sqrt(norms_d), 1.0)
        delta_d = np.clip(delta_d, _MIN_SCALING, _MAX_SCALING)
        if mc:
            norms_e = np.max(np.abs(As), axis=1)
            delta_e = np.where(norms_e > _SCALING_REG, 1.0 / np.sqrt(norms_e), 1.0)
            delta_e = np.clip(delta_e, _MIN_SCALING, _MAX_SCALING)
        else:
            delta_e = e
        Ps = delta_d[:, None] * Ps * delta_d[None, :]
        qs = delta_d * qs
        if mc:
            As = delta_e[:, None] * As * delta_d[None, :]
        d *= delta_d
        e *= delta_e
        cost_norm = max(
            float(np.mean(np.max(np.abs(Ps), axis=0))) if n else 0.0,
            float(np.max(np.abs(qs), initial=0.0)),
        )
        if cost_norm > _SCALING_REG:
            gamma = np.clip(1.0 / cost_norm, _MIN_SCALING, _MAX_SCALING)
            Ps *= gamma
            qs *= gamma
            c *= gamma
    return Ps, qs, As, d, e, c


def _admm_numpy(
    P, q, A, l, u, rho, sigma, alpha, eps_abs, eps_rel, max_iter,
    adapt_every, stall_limit, eps_prim_inf, dinv, einv, cinv, x0, y0,
):
    """Vectorized numpy/scipy build of the splitting loop.

    All matrix data arrives already equilibrated; ``dinv``, ``einv`` and
    ``cinv`` undo the scaling inside the termination checks so tolerances
    apply to the original problem.
    """
    n = P.shape[0]
    mc = A.shape[0]
    At = A.T.copy()
    x = x0.copy()
    y = y0.copy()
    z = np.clip(A @ x, l, u)
    rho = rho.copy()

    def factor(rho_vec):
        M = P + sigma * np.eye(n) + At @ (rho_vec[:, None] * A)
        return scipy.linalg.cho_factor(M, lower=True, check_finite=False)

    chol = factor(rho)
    status = _STATUS_MAX_ITER
    iters = max_iter
    pr = np.inf
    dr = np.inf
    best_ratio = np.inf
    stall = 0
    for k in range(1, max_iter + 1):
        rhs = sigma * x - q + At @ (rho * z - y)
        xt = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
        zt = A @ xt
        x = alpha * xt + (1.0 - alpha) * x
        w = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(w + y / rho, l, u)
        dy = rho * (w - z_new)
        y = y + dy
        z = z_new

        Ax = A @ x
        Px = P @ x
        Aty = At @ y
        res_p = Ax - z
        res_d = Px + q + Aty
        pr = np.max(np.abs(einv * res_p), initial=0.0)
        pr_scale = max(
            np.max(np.abs(einv * Ax), initial=0.0),
            np.max(np.abs(einv * z), initial=0.0),
        )
        dr = cinv * np.max(np.abs(dinv * res_d), initial=0.0)
        dr_scale = cinv * max(
            np.max(np.abs(dinv * Px), initial=0.0),
            np.max(np.abs(dinv * Aty), initial=0.0),
            np.max(np.abs(dinv * q), initial=0.0),
        )
        eps_pr = eps_abs + eps_rel * pr_scale
        eps_dr = eps_abs + eps_rel * dr_scale
        if pr <= eps_pr and dr <= eps_dr:
            status = _STATUS_SOLVED
            iters = k
            break

        ratio = max(pr / eps_pr, dr / eps_dr)
        if ratio < best_ratio * (1.0 - 1e-6):
            best_ratio = ratio
            stall = 0
        else:
            stall += 1
        if stall >= stall_limit and mc:
            dy_u = (dy / einv) * cinv
            nrm = np.max(np.abs(dy_u), initial=0.0)
            if nrm > 0.0:
                At_dy = cinv * dinv * (At @ dy)
                pos = np.maximum(dy_u, 0.0)
                neg = np.minimum(dy_u, 0.0)
                u_unscaled = u * einv
                l_unscaled = l * einv
                support = 0.0
                ok = np.max(np.abs(At_dy)) <= eps_prim_inf * nrm
                for i in range(mc):
                    if np.isinf(u_unscaled[i]):
                        if pos[i] > eps_prim_inf * nrm:
                            ok = False
                            break
                    else:
                        support += u_unscaled[i] * pos[i]
                    if np.isinf(l_unscaled[i]):
                        if -neg[i] > eps_prim_inf * nrm:
                            ok = False
                            break
                    else:
                        support += l_unscaled[i] * neg[i]
                if ok and support <= -eps_prim_inf * nrm:
                    status = _STATUS_INFEASIBLE
                    iters = k
                    break

        if k % adapt_every == 0 and mc:
            # balance distance-to-convergence of the two residuals; the
            # tolerance denominators are bounded below by eps_abs
            scale = np.sqrt((pr / eps_pr) / max(dr / eps_dr, 1e-12))
            if scale > 5.0 or scale < 0.2:
                rho = np.clip(rho * scale, 1e-6, 1e6)
                chol = factor(rho)
    return x, y, status, iters, float(pr), float(dr)


def _admm_core_jit_source(
    P, q, A, l, u, rho, sigma, alpha, eps_abs, eps_rel, max_iter,
    adapt_every, stall_limit, eps_prim_inf, dinv, einv, cinv, x0, y0,
):
    n = P.shape[0]
    mc = A.shape[0]
    At = np.ascontiguousarray(A.T)
    x = x0.copy()
    y = y0.copy()
    z = np.minimum(np.maximum(np.dot(A, x), l), u)
    rho = rho.copy()

    M = P + np.dot(At * rho, A)
    for i in range(n):
        M[i, i] += sigma
    L = np.linalg.cholesky(M)

    status = 0
    iters = max_iter
    pr = np.inf
    dr = np.inf
    best_ratio = np.inf
    stall = 0
    for k in range(1, max_iter + 1):
        rhs = sigma * x - q + np.dot(At, rho * z - y)
        # forward/back substitution on the cached Cholesky factor
        xt = rhs.copy()
        for i in range(n):
            s = xt[i]
            for j in range(i):
                s -= L[i, j] * xt[j]
            xt[i] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = xt[i]
            for j in range(i + 1, n):
                s -= L[j, i] * xt[j]
            xt[i] = s / L[i, i]

        zt = np.dot(A, xt)
        x = alpha * xt + (1.0 - alpha) * x
        w = alpha * zt + (1.0 - alpha) * z
        z_new = np.minimum(np.maximum(w + y / rho, l), u)
        dy = rho * (w - z_new)
        y = y + dy
        z = z_new

        Ax = np.dot(A, x)
        Px = np.dot(P, x)
        Aty = np.dot(At, y)
        pr = 0.0
        pr_scale = 0.0
        for i in range(mc):
            pr = max(pr, abs(einv[i] * (Ax[i] - z[i])))
            pr_scale = max(pr_scale, abs(einv[i] * Ax[i]), abs(einv[i] * z[i]))
        dr = 0.0
        dr_scale = 0.0
        for i in range(n):
            dr = max(dr, abs(dinv[i] * (Px[i] + q[i] + Aty[i])))
            dr_scale = max(
                dr_scale, abs(dinv[i] * Px[i]), abs(dinv[i] * Aty[i]), abs(dinv[i] * q[i])
            )
        dr *= cinv
        dr_scale *= cinv
        eps_pr = eps_abs + eps_rel * pr_scale
        eps_dr = eps_abs + eps_rel * dr_scale
        if pr <= eps_pr and dr <= eps_dr:
            status = 1
            iters = k
            break

        ratio = max(pr / eps_pr, dr / eps_dr)
        if ratio < best_ratio * (1.0 - 1e-6):
            best_ratio = ratio
            stall = 0
        else:
            stall += 1
        if stall >= stall_limit and mc > 0:
            nrm = 0.0
            for i in range(mc):
                nrm = max(nrm, abs(dy[i] / einv[i] * cinv))
            if nrm > 0.0:
                At_dy = np.dot(At, dy)
                ok = True
                for i in range(n):
                    if abs(cinv * dinv[i] * At_dy[i]) > eps_prim_inf * nrm:
                        ok = False
                        break
                support = 0.0
                if ok:
                    for i in range(mc):
                        dyu = dy[i] / einv[i] * cinv
                        if dyu > 0.0:
                            if np.isinf(u[i]):
                                if dyu > eps_prim_inf * nrm:
                                    ok = False
                                    break
                            else:
                                support += (u[i] * einv[i]) * dyu
                        elif dyu < 0.0:
                            if np.isinf(l[i]):
                                if -dyu > eps_prim_inf * nrm:
                                    ok = False
                                    break
                            else:
                                support += (l[i] * einv[i]) * dyu
                if ok and support <= -eps_prim_inf * nrm:
                    status = -1
                    iters = k
                    break

        if k % adapt_every == 0 and mc > 0:
            # balance distance-to-convergence of the two residuals; the
            # tolerance denominators are bounded below by eps_abs
            scale = np.sqrt((pr / eps_pr) / max(dr / eps_dr, 1e-12))
            if scale > 5.0 or scale < 0.2:
                for i in range(mc):
                    rho[i] = min(max(rho[i] * scale, 1e-6), 1e6)
                M = P + np.dot(At * rho, A)
                for i in range(n):
                    M[i, i] += sigma
                L = np.linalg.cholesky(M)
    return x, y, status, iters, pr, dr


_admm_numba = jit(_admm_core_jit_source) if HAS_NUMBA else None

_ADMM_IMPL = _admm_numba if numba_enabled() else _admm_numpy


def _solve_unconstrained(problem: QuadraticProgram, settings: SolverSettings) -> QpSolution:
    # Least-squares handles singular-but-consistent P; an inconsistent
    # gradient equation means the problem is unbounded below, which the
    # status vocabulary reports as max_iterations on the best iterate.
    z, *_ = np.linalg.lstsq(problem.P, -problem.q, rcond=None)
    grad = problem.P @ z + problem.q
    dr = float(np.max(np.abs(grad), initial=0.0))
    scale = max(
        np.max(np.abs(problem.P @ z), initial=0.0),
        np.max(np.abs(problem.q), initial=0.0),
    )
    ok = dr <= settings.eps_abs + settings.eps_rel * scale
    return QpSolution(
        z_star=z,
        objective=problem.objective(z),
        status="solved" if ok else "max_iterations",
        iterations=1,
        primal_residual=0.0,
        dual_residual=dr,
        y_dual=np.zeros(0),
    )


def solve_qp(
    problem: QuadraticProgram,
    settings: SolverSettings | None = None,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> QpSolution:
    """Solve a :class:`QuadraticProgram`.

    Args:
        problem: The QP; its invariants are validated at construction.
        settings: Tolerances and iteration limits; defaults are fine for
            the control problems this package assembles.
        warm_start: Optional ``(z0, y0)`` primal/dual guess in original
            (unscaled) units, e.g. from the previous receding-horizon step.

    Returns:
        A :class:`QpSolution`; ``status == "solved"`` guarantees the primal
        and dual residuals meet ``eps_abs + eps_rel * scale``.
    """
    settings = settings or SolverSettings()
    n = problem.dim
    e_rows = problem.Aeq.shape[0]
    A = np.vstack((problem.Aeq, problem.Gineq))
    l = np.concatenate((problem.beq, problem.lower))
    u = np.concatenate((problem.beq, problem.upper))
    mc = A.shape[0]
    if mc == 0:
        return _solve_unconstrained(problem, settings)

    P_sym = 0.5 * (problem.P + problem.P.T)
    Ps, qs, As, d_scale, e_scale, c_scale = _equilibrate(
        P_sym, problem.q, A, settings
    )
    ls = e_scale * l
    us = e_scale * u

    rho = np.full(mc, settings.rho0)
    rho[(u - l) <= 1e-12] *= 1e3

    if warm_start is not None:
        z0, y0 = warm_start
        x_init = np.asarray(z0, dtype=float).reshape(n) / d_scale
        y_init = np.asarray(y0, dtype=float).reshape(mc) * c_scale / e_scale
    else:
        x_init = np.zeros(n)
        y_init = np.zeros(mc)

    x, y, status, iters, pr, dr = _ADMM_IMPL(
        np.ascontiguousarray(Ps),
        np.ascontiguousarray(qs),
        np.ascontiguousarray(As),
        ls,
        us,
        rho,
        settings.sigma,
        settings.alpha,
        settings.eps_abs,
        settings.eps_rel,
        settings.max_iter,
        settings.adapt_every,
        settings.stall_limit,
        settings.eps_prim_inf,
        1.0 / d_scale,
        1.0 / e_scale,
        1.0 / c_scale,
        x_init,
        y_init,
    )
    z_star = d_scale * x
    y_dual = e_scale * y / c_scale
    return QpSolution(
        z_star=z_star,
        objective=problem.objective(z_star),
        status=_STATUS_NAMES[int(status)],
        iterations=int(iters),
        primal_residual=float(pr),
        dual_residual=float(dr),
        y_dual=y_dual,
    )


def dump_problem(problem: QuadraticProgram, path) -> None:
    """Write a QP to a text file for offline inspection.

    Layout: comment lines start with ``%``; each section is a header line
    ``name rows cols`` followed by ``rows * cols`` whitespace-separated
    entries in row-major order.  Vectors are sections with ``cols == 1``.
    """
    path = Path(path)
    sections = [
        ("P", problem.P),
        ("q", problem.q[:, None]),
        ("Aeq", problem.Aeq),
        ("beq", problem.beq[:, None]),
        ("Gineq", problem.Gineq),
        ("lower", problem.lower[:, None]),
        ("upper", problem.upper[:, None]),
    ]
    with path.open("w") as fh:
        fh.write("% deepc-kit quadratic program dump\n")
        fh.write("% sections: name rows cols, then row-major entries\n")
        for name, mat in sections:
            rows, cols = mat.shape
            fh.write(f"{name} {rows} {cols}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_problem(path) -> QuadraticProgram:
    """Read a QP written by :func:`dump_problem`."""
    tokens: dict[str, np.ndarray] = {}
    lines = [
        ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("%")
    ]
    i = 0
    while i < len(lines):
        name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        vals = []
        for j in range(rows):
            vals.extend(float(v) for v in lines[i + 1 + j].split())
        tokens[name] = np.array(vals).reshape(rows, cols)
        i += 1 + rows
    return QuadraticProgram(
        P=tokens["P"],
        q=tokens["q"].ravel(),
        Aeq=tokens["Aeq"],
        beq=tokens["beq"].ravel(),
        Gineq=tokens["Gineq"],
        lower=tokens["lower"].ravel(),
        upper=tokens["upper"].ravel(),
    )
