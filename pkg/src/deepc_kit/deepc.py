"""Assembly of data-enabled predictive control QPs and result decoding.

Two formulations share one decision-variable layout ``z = (g, sigma_y)``:

* ``assemble_regularized`` -- the coefficient vector ``g`` combines columns
  of the raw past/future Hankel blocks; predicted inputs/outputs are the
  affine images ``u = Uf g`` and ``y = Yf g``, the past window enters as
  equality constraints, and a slack ``sigma_y`` (present when
  ``lambda_y > 0``) relaxes the past-output consistency rows.  With
  ``lambda_g = lambda_y = 0`` this reduces to the plain consistency form.

* ``assemble_velocity`` -- ``g`` combines columns of the cumulative-sum
  transformed increment blocks; predicted trajectories are reconstructed
  from the previous applied input and measurement,
  ``u = 1_N (x) u_prev + dUf_tilde g`` and ``y = 1_N (x) y_prev +
  dYf_tilde g``.  Both past windows enter as increments of length
  ``T_ini - 1`` (the differenced input and output histories); the slack
  attaches to the past-output increment rows only.  Constant offsets added
  to every output sample cancel in the differences, which is what makes
  the closed loop offset-free.

The cost penalizes absolute inputs ``||u||_R``, not input increments, and
the reference enters only through the tracking term.  Predicted
input/output variables are condensed away, so box constraints become
general inequalities on affine images of ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .hankel import DeltaHankelPartition, HankelPartition, ReducedBasis
from .qp import QpSolution, QuadraticProgram

__all__ = [
    "DeePCParams",
    "OnlineWindow",
    "ControlSolution",
    "InfeasibleError",
    "assemble_regularized",
    "assemble_velocity",
    "decode_solution",
]

DataMatrices = Union[HankelPartition, DeltaHankelPartition, ReducedBasis]


class InfeasibleError(RuntimeError):
    """The QP solver certified the assembled problem infeasible."""


def _expand_weight(w, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(w, dtype=float)
    if arr.ndim == 0:
        if arr <= 0:
            raise ValueError(f"{name} must be positive")
        return float(arr) * np.eye(dim)
    arr = arr.reshape(dim, dim)
    if np.max(np.abs(arr - arr.T)) > 1e-12 * max(1.0, np.max(np.abs(arr))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(arr)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return arr


def _expand_bounds(bounds, dim: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    if bounds is None:
        return np.full(dim, -np.inf), np.full(dim, np.inf)
    lo, hi = bounds
    lo = np.full(dim, -np.inf) if lo is None else np.broadcast_to(
        np.asarray(lo, dtype=float), (dim,)
    ).copy()
    hi = np.full(dim, np.inf) if hi is None else np.broadcast_to(
        np.asarray(hi, dtype=float), (dim,)
    ).copy()
    if np.any(lo > hi):
        raise ValueError(f"{name} lower bound exceeds upper bound")
    return lo, hi


@dataclass(frozen=True)
class DeePCParams:
    """Horizons, weights, regularizers, and box constraints.

    ``Q``/``R`` accept scalars (expanded to scalar times identity) or full
    SPD matrices.  ``u_bounds``/``y_bounds`` are ``(low, high)`` pairs of
    per-channel values; ``None`` or infinite entries disable a side.
    """

    T_ini: int
    N: int
    Q: object = 1.0
    R: object = 1.0
    lambda_g: float = 0.0
    lambda_y: float = 0.0
    u_bounds: object = None
    y_bounds: object = None

    def __post_init__(self):
        if self.T_ini < 2:
            raise ValueError("T_ini must be >= 2 (the velocity form differences it)")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.lambda_g < 0 or self.lambda_y < 0:
            raise ValueError("regularizers must be nonnegative")

    def weights(self, m: int, p: int) -> tuple[np.ndarray, np.ndarray]:
        return _expand_weight(self.Q, p, "Q"), _expand_weight(self.R, m, "R")

    def bounds(self, m: int, p: int):
        return (
            _expand_bounds(self.u_bounds, m, "u_bounds"),
            _expand_bounds(self.y_bounds, p, "y_bounds"),
        )


@dataclass(frozen=True)
class OnlineWindow:
    """The latest ``T_ini`` applied inputs and measured outputs.

    ``u_prev``/``y_prev`` (the anchors of the velocity-form reconstruction)
    are the last window entries by construction.
    """

    u_ini: np.ndarray
    y_ini: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u_ini, dtype=float))
        y = np.atleast_2d(np.asarray(self.y_ini, dtype=float))
        if len(u) != len(y):
            raise ValueError("u_ini and y_ini must have equal length")
        if len(u) < 2:
            raise ValueError("window must hold at least two samples")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("window contains non-finite entries")
        object.__setattr__(self, "u_ini", u)
        object.__setattr__(self, "y_ini", y)

    @property
    def T_ini(self) -> int:
        return self.u_ini.shape[0]

    @property
    def u_prev(self) -> np.ndarray:
        return self.u_ini[-1]

    @property
    def y_prev(self) -> np.ndarray:
        return self.y_ini[-1]

    @property
    def delta_u_ini(self) -> np.ndarray:
        return np.diff(self.u_ini, axis=0)

    @property
    def delta_y_ini(self) -> np.ndarray:
        return np.diff(self.y_ini, axis=0)


@dataclass(frozen=True)
class ControlSolution:
    """Decoded receding-horizon solution at one time step."""

    u_star: np.ndarray
    y_pred: np.ndarray
    g: np.ndarray
    sigma_y: np.ndarray
    objective: float
    qp_diag: QpSolution


def _check_setup(data: DataMatrices, window: OnlineWindow, ref: np.ndarray, params: DeePCParams):
    d = data.dims
    if (d.T_ini, d.N) != (params.T_ini, params.N):
        raise ValueError(
            f"data horizons {(d.T_ini, d.N)} disagree with params {(params.T_ini, params.N)}"
        )
    if window.T_ini != params.T_ini:
        raise ValueError(
            f"window holds {window.T_ini} samples, params demand {params.T_ini}"
        )
    if window.u_ini.shape[1] != d.m or window.y_ini.shape[1] != d.p:
        raise ValueError("window channel dimensions disagree with the data matrices")
    ref = np.asarray(ref, dtype=float).reshape(params.N, d.p)
    return d, ref


def _box_rows(image_rows: np.ndarray, lo_vec, hi_vec, n_sigma: int):
    """Inequality rows for finite bounds on an affine image of g."""
    keep = np.isfinite(lo_vec) | np.isfinite(hi_vec)
    if not np.any(keep):
        return None
    G = np.hstack((image_rows[keep], np.zeros((int(keep.sum()), n_sigma))))
    return G, lo_vec[keep], hi_vec[keep]


def _stack_ineq(parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0)
    G = np.vstack([p[0] for p in parts])
    lo = np.concatenate([p[1] for p in parts])
    hi = np.concatenate([p[2] for p in parts])
    return G, lo, hi


def assemble_regularized(
    partition: HankelPartition,
    window: OnlineWindow,
    ref: np.ndarray,
    params: DeePCParams,
) -> QuadraticProgram:
    """Condensed QP for regularized data-enabled predictive control.

    Decision stack ``(g, sigma_y)``; equalities pin ``Up g = u_ini`` and
    ``Yp g = y_ini + sigma_y``; the cost is
    ``||Yf g - ref||_Q^2 + ||Uf g||_R^2 + lambda_g ||g||^2 +
    lambda_y ||sigma_y||^2`` and box constraints act on ``Uf g``/``Yf g``.
    ``lambda_y == 0`` omits the slack, making past-output consistency hard.
    """
    d, ref = _check_setup(partition, window, ref, params)
    Qw, Rw = params.weights(d.m, d.p)
    (u_lo, u_hi), (y_lo, y_hi) = params.bounds(d.m, d.p)
    Qbar = np.kron(np.eye(d.N), Qw)
    Rbar = np.kron(np.eye(d.N), Rw)
    n_g = partition.columns
    n_sigma = d.T_ini * d.p if params.lambda_y > 0 else 0

    r_vec = ref.ravel()
    H_gg = (
        partition.Yf.T @ Qbar @ partition.Yf
        + partition.Uf.T @ Rbar @ partition.Uf
        + params.lambda_g * np.eye(n_g)
    )
    f_g = -2.0 * partition.Yf.T @ (Qbar @ r_vec)

    dim = n_g + n_sigma
    P = np.zeros((dim, dim))
    P[:n_g, :n_g] = 2.0 * H_gg
    q = np.zeros(dim)
    q[:n_g] = f_g
    if n_sigma:
        P[n_g:, n_g:] = 2.0 * params.lambda_y * np.eye(n_sigma)

    Aeq = np.zeros((d.T_ini * (d.m + d.p), dim))
    Aeq[: d.T_ini * d.m, :n_g] = partition.Up
    Aeq[d.T_ini * d.m :, :n_g] = partition.Yp
    if n_sigma:
        Aeq[d.T_ini * d.m :, n_g:] = -np.eye(n_sigma)
    beq = np.concatenate((window.u_ini.ravel(), window.y_ini.ravel()))

    G, lo, hi = _stack_ineq(
        [
            _box_rows(partition.Uf, np.tile(u_lo, d.N), np.tile(u_hi, d.N), n_sigma),
            _box_rows(partition.Yf, np.tile(y_lo, d.N), np.tile(y_hi, d.N), n_sigma),
        ]
    )
    if G.size:
        Gineq = G
    else:
        Gineq = np.zeros((0, dim))
    return QuadraticProgram(P=P, q=q, Aeq=Aeq, beq=beq, Gineq=Gineq, lower=lo, upper=hi)


def assemble_velocity(
    data: DeltaHankelPartition | ReducedBasis,
    window: OnlineWindow,
    ref: np.ndarray,
    params: DeePCParams,
) -> QuadraticProgram:
    """Condensed QP for velocity-form data-enabled predictive control.

    The past windows enter as cumulative sums of the differenced input and
    output histories (both of length ``T_ini - 1``); predicted absolute
    trajectories are reconstructed from the anchors ``u_prev``/``y_prev``
    before the cost and box constraints apply, so the returned QP acts on
    absolute inputs and outputs even though the data matrices are built
    from increments.
    """
    d, ref = _check_setup(data, window, ref, params)
    Qw, Rw = params.weights(d.m, d.p)
    (u_lo, u_hi), (y_lo, y_hi) = params.bounds(d.m, d.p)
    Qbar = np.kron(np.eye(d.N), Qw)
    Rbar = np.kron(np.eye(d.N), Rw)
    n_g = data.columns
    n_sigma = (d.T_ini - 1) * d.p if params.lambda_y > 0 else 0

    du_tilde_ini = np.cumsum(window.delta_u_ini, axis=0).ravel()
    dy_tilde_ini = np.cumsum(window.delta_y_ini, axis=0).ravel()
    u_anchor = np.tile(window.u_prev, d.N)
    y_anchor = np.tile(window.y_prev, d.N)

    Bpu, Bfu = data.dUp_tilde, data.dUf_tilde
    Bpy, Bfy = data.dYp_tilde, data.dYf_tilde

    r_vec = ref.ravel()
    H_gg = Bfy.T @ Qbar @ Bfy + Bfu.T @ Rbar @ Bfu + params.lambda_g * np.eye(n_g)
    f_g = 2.0 * (Bfy.T @ (Qbar @ (y_anchor - r_vec)) + Bfu.T @ (Rbar @ u_anchor))

    dim = n_g + n_sigma
    P = np.zeros((dim, dim))
    P[:n_g, :n_g] = 2.0 * H_gg
    q = np.zeros(dim)
    q[:n_g] = f_g
    if n_sigma:
        P[n_g:, n_g:] = 2.0 * params.lambda_y * np.eye(n_sigma)

    rows_u = (d.T_ini - 1) * d.m
    rows_y = (d.T_ini - 1) * d.p
    Aeq = np.zeros((rows_u + rows_y, dim))
    Aeq[:rows_u, :n_g] = Bpu
    Aeq[rows_u:, :n_g] = Bpy
    if n_sigma:
        Aeq[rows_u:, n_g:] = -np.eye(n_sigma)
    beq = np.concatenate((du_tilde_ini, dy_tilde_ini))

    G, lo, hi = _stack_ineq(
        [
            _box_rows(Bfu, np.tile(u_lo, d.N) - u_anchor, np.tile(u_hi, d.N) - u_anchor, n_sigma),
            _box_rows(Bfy, np.tile(y_lo, d.N) - y_anchor, np.tile(y_hi, d.N) - y_anchor, n_sigma),
        ]
    )
    if G.size:
        Gineq = G
    else:
        Gineq = np.zeros((0, dim))
    return QuadraticProgram(P=P, q=q, Aeq=Aeq, beq=beq, Gineq=Gineq, lower=lo, upper=hi)


def _is_velocity(data: DataMatrices) -> bool:
    if isinstance(data, HankelPartition):
        return False
    if isinstance(data, (DeltaHankelPartition, ReducedBasis)):
        return True
    raise TypeError(f"unsupported data matrices: {type(data).__name__}")


def decode_solution(
    qp_solution: QpSolution,
    data: DataMatrices,
    window: OnlineWindow,
    ref: np.ndarray,
    params: DeePCParams,
) -> ControlSolution:
    """Reconstruct input/output sequences from a solved QP.

    Velocity form rebuilds absolute trajectories from the anchors; the
    reported objective is the full tracking cost re-evaluated from the
    decoded quantities (including constant terms the condensed QP drops),
    which is why the reference window is needed here as well.

    Raises:
        InfeasibleError: If the solver certified infeasibility.
    """
    if qp_solution.status == "infeasible":
        raise InfeasibleError(
            "assembled QP is infeasible; this indicates inconsistent data "
            "matrices, window, or bounds"
        )
    d = data.dims
    ref = np.asarray(ref, dtype=float).reshape(d.N, d.p)
    n_g = data.columns
    z = qp_solution.z_star
    g = z[:n_g]
    sigma = z[n_g:] if params.lambda_y > 0 else np.zeros(0)

    if _is_velocity(data):
        u_vec = np.tile(window.u_prev, d.N) + data.dUf_tilde @ g
        y_vec = np.tile(window.y_prev, d.N) + data.dYf_tilde @ g
    else:
        u_vec = data.Uf @ g
        y_vec = data.Yf @ g
    u_star = u_vec.reshape(d.N, d.m)
    y_pred = y_vec.reshape(d.N, d.p)

    Qw, Rw = params.weights(d.m, d.p)
    err = y_vec - ref.ravel()
    track = err @ np.kron(np.eye(d.N), Qw) @ err
    effort = u_vec @ np.kron(np.eye(d.N), Rw) @ u_vec
    objective = (
        track
        + effort
        + params.lambda_g * float(g @ g)
        + params.lambda_y * float(sigma @ sigma)
    )
    return ControlSolution(
        u_star=u_star,
        y_pred=y_pred,
        g=g,
        sigma_y=sigma,
        objective=float(objective),
        qp_diag=qp_solution,
    )
