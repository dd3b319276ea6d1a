"""Hankel data machinery for data-enabled predictive control.

Builds, validates, partitions, transforms, and compresses (mosaic-)Hankel
matrices from recorded input/output trajectories.  Everything here is a pure
function of its inputs; the returned containers hold plain numpy arrays and
are safe to share across threads.

Conventions
-----------
A vector signal of length ``T`` with ``d`` channels is stored as a
``(T, d)`` array.  A block-Hankel matrix of depth ``L`` stacks windows
``signal[j .. j+L-1]`` column-wise, giving ``L*d`` rows and ``T - L + 1``
columns.  Past/future partitions split the first ``T_ini`` and last ``N``
block rows (velocity form: ``T_ini - 1`` and ``N`` at depth ``L - 1``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Trajectory",
    "DeltaTrajectory",
    "HankelPartition",
    "DeltaHankelPartition",
    "ReducedBasis",
    "diff_trajectory",
    "build_hankel",
    "check_pe",
    "build_partition",
    "build_mosaic",
    "check_collective_pe",
    "minimum_data_length",
    "cumulative_transform",
    "reduce_svd",
    "block_cumsum",
    "block_diff",
    "save_trajectory_csv",
    "load_trajectory_csv",
]

DEFAULT_RANK_TOL = 1e-9


def _as_signal(x, name: str) -> np.ndarray:
    """Coerce to a (T, d) float array; 1-D input becomes a single channel."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Trajectory:
    """A finite input/output record of one experiment.

    Attributes:
        inputs: ``(T, m)`` array of applied inputs (plant units, e.g. psi).
        outputs: ``(T, p)`` array of measured outputs (e.g. mm).
        sample_period: Sampling interval in seconds.
        label: Free-form tag (e.g. the excitation seed) carried through I/O.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    sample_period: float
    label: str = ""

    def __post_init__(self):
        u = _as_signal(self.inputs, "inputs")
        y = _as_signal(self.outputs, "outputs")
        if len(u) != len(y):
            raise ValueError(
                f"inputs and outputs must have equal length, got {len(u)} vs {len(y)}"
            )
        if len(u) < 1:
            raise ValueError("trajectory must contain at least one sample")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)

    @property
    def length(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def p(self) -> int:
        return self.outputs.shape[1]


@dataclass(frozen=True)
class DeltaTrajectory:
    """First differences of a :class:`Trajectory`; one sample shorter."""

    delta_inputs: np.ndarray
    delta_outputs: np.ndarray

    def __post_init__(self):
        du = _as_signal(self.delta_inputs, "delta_inputs")
        dy = _as_signal(self.delta_outputs, "delta_outputs")
        if len(du) != len(dy):
            raise ValueError("delta_inputs and delta_outputs must have equal length")
        if len(du) < 1:
            raise ValueError("delta trajectory must contain at least one sample")
        object.__setattr__(self, "delta_inputs", du)
        object.__setattr__(self, "delta_outputs", dy)

    @property
    def length(self) -> int:
        return self.delta_inputs.shape[0]

    @property
    def m(self) -> int:
        return self.delta_inputs.shape[1]

    @property
    def p(self) -> int:
        return self.delta_outputs.shape[1]


@dataclass(frozen=True)
class Dims:
    """Shared dimension bundle (m inputs, p outputs, horizons T_ini and N)."""

    m: int
    p: int
    T_ini: int
    N: int

    @property
    def L(self) -> int:
        return self.T_ini + self.N


@dataclass(frozen=True)
class HankelPartition:
    """Past/future blocks Up, Uf, Yp, Yf of the stacked data Hankel matrix."""

    Up: np.ndarray
    Uf: np.ndarray
    Yp: np.ndarray
    Yf: np.ndarray
    dims: Dims

    def __post_init__(self):
        d = self.dims
        expected = {
            "Up": d.T_ini * d.m,
            "Uf": d.N * d.m,
            "Yp": d.T_ini * d.p,
            "Yf": d.N * d.p,
        }
        cols = {blk.shape[1] for blk in (self.Up, self.Uf, self.Yp, self.Yf)}
        if len(cols) != 1:
            raise ValueError("partition blocks disagree on column count")
        for name, rows in expected.items():
            if getattr(self, name).shape[0] != rows:
                raise ValueError(
                    f"{name} has {getattr(self, name).shape[0]} rows, expected {rows}"
                )

    @property
    def columns(self) -> int:
        return self.Up.shape[1]


@dataclass(frozen=True)
class DeltaHankelPartition:
    """Tilde-transformed increment blocks for the velocity-form constraint.

    The four blocks are the raw increment Hankel blocks left-multiplied by
    their block-lower-triangular all-ones matrices, i.e. every column holds
    running block sums of the underlying increment windows.
    """

    dUp_tilde: np.ndarray
    dUf_tilde: np.ndarray
    dYp_tilde: np.ndarray
    dYf_tilde: np.ndarray
    dims: Dims

    def __post_init__(self):
        d = self.dims
        if d.T_ini < 2:
            raise ValueError("velocity-form partition needs T_ini >= 2")
        expected = {
            "dUp_tilde": (d.T_ini - 1) * d.m,
            "dUf_tilde": d.N * d.m,
            "dYp_tilde": (d.T_ini - 1) * d.p,
            "dYf_tilde": d.N * d.p,
        }
        cols = {
            blk.shape[1]
            for blk in (self.dUp_tilde, self.dUf_tilde, self.dYp_tilde, self.dYf_tilde)
        }
        if len(cols) != 1:
            raise ValueError("partition blocks disagree on column count")
        for name, rows in expected.items():
            if getattr(self, name).shape[0] != rows:
                raise ValueError(
                    f"{name} has {getattr(self, name).shape[0]} rows, expected {rows}"
                )

    @property
    def columns(self) -> int:
        return self.dUp_tilde.shape[1]

    def stacked(self) -> np.ndarray:
        """All four tilde blocks stacked vertically, (m+p)(L-1) rows."""
        return np.vstack(
            (self.dUp_tilde, self.dUf_tilde, self.dYp_tilde, self.dYf_tilde)
        )


@dataclass(frozen=True)
class ReducedBasis:
    """SVD-compressed stand-in for a :class:`DeltaHankelPartition`.

    ``H_tilde`` has the same (m+p)(L-1) rows as the stacked tilde mosaic but
    only ``r`` columns; it spans the leading ``r`` left singular directions
    scaled by their singular values.  Columns past the numerical rank are
    numerically zero and act as null directions for the coefficient vector.
    """

    H_tilde: np.ndarray
    singular_values: np.ndarray
    r: int
    V1: np.ndarray
    dims: Dims

    def __post_init__(self):
        if self.H_tilde.shape[1] != self.r:
            raise ValueError("H_tilde must have exactly r columns")
        s = np.asarray(self.singular_values, dtype=float)
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be nonnegative and descending")

    @property
    def columns(self) -> int:
        return self.r

    def _row_split(self):
        d = self.dims
        i1 = (d.T_ini - 1) * d.m
        i2 = i1 + d.N * d.m
        i3 = i2 + (d.T_ini - 1) * d.p
        return i1, i2, i3

    @property
    def dUp_tilde(self) -> np.ndarray:
        return self.H_tilde[: self._row_split()[0]]

    @property
    def dUf_tilde(self) -> np.ndarray:
        i1, i2, _ = self._row_split()
        return self.H_tilde[i1:i2]

    @property
    def dYp_tilde(self) -> np.ndarray:
        _, i2, i3 = self._row_split()
        return self.H_tilde[i2:i3]

    @property
    def dYf_tilde(self) -> np.ndarray:
        return self.H_tilde[self._row_split()[2] :]


@dataclass(frozen=True)
class RawDeltaBlocks:
    """Increment Hankel blocks before the cumulative-sum transform."""

    dUp: np.ndarray
    dUf: np.ndarray
    dYp: np.ndarray
    dYf: np.ndarray
    dims: Dims


def diff_trajectory(traj: Trajectory) -> DeltaTrajectory:
    """Forward differences of a trajectory, length T-1.

    Raises:
        ValueError: If the trajectory has fewer than two samples.
    """
    if traj.length < 2:
        raise ValueError(
            f"need at least 2 samples to difference, got {traj.length}"
        )
    return DeltaTrajectory(
        delta_inputs=np.diff(traj.inputs, axis=0),
        delta_outputs=np.diff(traj.outputs, axis=0),
    )


def build_hankel(signal, depth: int) -> np.ndarray:
    """Block-Hankel matrix of a vector signal.

    Args:
        signal: ``(T,)`` or ``(T, d)`` array-like.
        depth: Number of block rows ``L``; needs ``1 <= L <= T``.

    Returns:
        ``(L*d, T-L+1)`` array whose column ``j`` stacks
        ``signal[j], ..., signal[j+L-1]``.
    """
    sig = _as_signal(signal, "signal")
    length, d = sig.shape
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth > length:
        raise ValueError(
            f"depth {depth} exceeds signal length {length}"
        )
    cols = length - depth + 1
    H = np.empty((depth * d, cols))
    for j in range(depth):
        H[j * d : (j + 1) * d, :] = sig[j : j + cols].T
    return H


def _has_full_row_rank(M: np.ndarray, rank_tol: float) -> bool:
    """Rank decided by singular values above ``rank_tol`` times the largest."""
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return M.shape[0] == 0
    rank = int(np.count_nonzero(s > rank_tol * s[0]))
    return rank == M.shape[0]


def check_pe(signal, order: int, rank_tol: float = DEFAULT_RANK_TOL) -> bool:
    """Persistency of excitation: depth-``order`` Hankel has full row rank.

    The rank threshold is relative to the largest singular value, so the
    verdict is invariant to rescaling the signal.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    return _has_full_row_rank(build_hankel(signal, order), rank_tol)


def _input_signal(item) -> np.ndarray:
    if isinstance(item, Trajectory):
        return item.inputs
    if isinstance(item, DeltaTrajectory):
        return item.delta_inputs
    return _as_signal(item, "signal")


def check_collective_pe(
    trajectories: Sequence, order: int, rank_tol: float = DEFAULT_RANK_TOL
) -> bool:
    """Collective persistency of excitation across several datasets.

    Builds the depth-``order`` Hankel of each dataset's input signal,
    concatenates them horizontally (mosaic), and checks full row rank.
    Accepts :class:`Trajectory`, :class:`DeltaTrajectory`, or raw arrays.
    """
    if len(trajectories) == 0:
        raise ValueError("need at least one dataset")
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    signals = [_input_signal(t) for t in trajectories]
    widths = {s.shape[1] for s in signals}
    if len(widths) != 1:
        raise ValueError("datasets disagree on input dimension")
    mosaic = np.hstack([build_hankel(s, order) for s in signals])
    return _has_full_row_rank(mosaic, rank_tol)


def minimum_data_length(m: int, n: int, L: int, kappa: int) -> int:
    """Total sample count needed for collective excitation of order n+L-1.

    Returns ``(m + kappa) * (n + L - 1) - kappa``.
    """
    if min(m, n, L, kappa) < 1:
        raise ValueError("all arguments must be >= 1")
    return (m + kappa) * (n + L - 1) - kappa


def block_cumsum(M: np.ndarray, block: int) -> np.ndarray:
    """Running block sums down the rows: row-block i becomes sum of blocks 0..i.

    Equivalent to left-multiplying by the block-lower-triangular all-ones
    matrix with identity blocks of size ``block``.
    """
    rows, cols = M.shape
    if block < 1 or rows % block != 0:
        raise ValueError(f"row count {rows} is not a multiple of block size {block}")
    k = rows // block
    return M.reshape(k, block, cols).cumsum(axis=0).reshape(rows, cols)


def block_diff(M: np.ndarray, block: int) -> np.ndarray:
    """Inverse of :func:`block_cumsum`: first block kept, then block differences."""
    rows, cols = M.shape
    if block < 1 or rows % block != 0:
        raise ValueError(f"row count {rows} is not a multiple of block size {block}")
    k = rows // block
    stacked = M.reshape(k, block, cols)
    out = stacked.copy()
    out[1:] -= stacked[:-1]
    return out.reshape(rows, cols)


def cumulative_transform(raw: RawDeltaBlocks) -> DeltaHankelPartition:
    """Apply the block-lower-triangular all-ones transform to each block.

    Each of the four increment blocks is replaced by its running block sums,
    turning increment windows into displacement-from-window-start columns.
    The transform is square and invertible (:func:`block_diff` undoes it).
    """
    d = raw.dims
    return DeltaHankelPartition(
        dUp_tilde=block_cumsum(raw.dUp, d.m),
        dUf_tilde=block_cumsum(raw.dUf, d.m),
        dYp_tilde=block_cumsum(raw.dYp, d.p),
        dYf_tilde=block_cumsum(raw.dYf, d.p),
        dims=d,
    )


def _split_past_future(H: np.ndarray, past_blocks: int, block: int):
    cut = past_blocks * block
    return H[:cut], H[cut:]


def build_partition(
    trajectories: Trajectory | Sequence[Trajectory], T_ini: int, N: int
) -> HankelPartition:
    """Past/future Hankel blocks at depth ``L = T_ini + N`` from raw data.

    A single trajectory gives the classical partition; a list gives the
    mosaic variant (per-trajectory Hankels concatenated horizontally), which
    is what multi-experiment data collection produces.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    if T_ini < 1 or N < 1:
        raise ValueError("T_ini and N must be >= 1")
    L = T_ini + N
    m, p = trajectories[0].m, trajectories[0].p
    u_blocks, y_blocks = [], []
    for traj in trajectories:
        if (traj.m, traj.p) != (m, p):
            raise ValueError("trajectories disagree on channel dimensions")
        if traj.length < L:
            raise ValueError(
                f"trajectory of length {traj.length} too short for depth {L}"
            )
        u_blocks.append(build_hankel(traj.inputs, L))
        y_blocks.append(build_hankel(traj.outputs, L))
    Hu = np.hstack(u_blocks)
    Hy = np.hstack(y_blocks)
    Up, Uf = _split_past_future(Hu, T_ini, m)
    Yp, Yf = _split_past_future(Hy, T_ini, p)
    return HankelPartition(Up=Up, Uf=Uf, Yp=Yp, Yf=Yf, dims=Dims(m, p, T_ini, N))


def build_mosaic(
    trajectories: Sequence[DeltaTrajectory], T_ini: int, N: int
) -> DeltaHankelPartition:
    """Tilde-transformed mosaic of increment Hankels at depth ``L - 1``.

    Per dataset, a depth-(L-1) Hankel of the input increments over the
    output increments is built and split into past (T_ini - 1 block rows)
    and future (N block rows) parts; datasets are concatenated horizontally
    and the cumulative-sum transform is applied.  Row transforms commute
    with column concatenation, so per-dataset vs. post-concatenation
    transform order is immaterial.

    Total columns are the sum over datasets of ``T_i - L + 1``.
    """
    if len(trajectories) == 0:
        raise ValueError("need at least one dataset")
    if T_ini < 2:
        raise ValueError("velocity form needs T_ini >= 2")
    if N < 1:
        raise ValueError("N must be >= 1")
    L = T_ini + N
    m, p = trajectories[0].m, trajectories[0].p
    du_p, du_f, dy_p, dy_f = [], [], [], []
    for delta in trajectories:
        if (delta.m, delta.p) != (m, p):
            raise ValueError("datasets disagree on channel dimensions")
        if delta.length < L - 1:
            raise ValueError(
                f"increment dataset of length {delta.length} too short for depth {L - 1}"
            )
        Hu = build_hankel(delta.delta_inputs, L - 1)
        Hy = build_hankel(delta.delta_outputs, L - 1)
        up, uf = _split_past_future(Hu, T_ini - 1, m)
        yp, yf = _split_past_future(Hy, T_ini - 1, p)
        du_p.append(up)
        du_f.append(uf)
        dy_p.append(yp)
        dy_f.append(yf)
    raw = RawDeltaBlocks(
        dUp=np.hstack(du_p),
        dUf=np.hstack(du_f),
        dYp=np.hstack(dy_p),
        dYf=np.hstack(dy_f),
        dims=Dims(m, p, T_ini, N),
    )
    return cumulative_transform(raw)


def reduce_svd(partition: DeltaHankelPartition, r: int) -> ReducedBasis:
    """Compress the stacked tilde mosaic to ``r`` columns via SVD.

    With ``H = W @ diag(s) @ V.T`` the reduced data matrix is
    ``H_tilde = H @ V[:, :r] = W[:, :r] * s[:r]``; its column space equals
    that of ``H`` whenever ``r`` is at least the numerical rank.  Requesting
    ``r`` beyond ``min(q1, q2)`` pads with exactly-zero columns (the images
    of null-space directions), which keeps large column budgets usable when
    the row count is the binding limit.
    """
    H = partition.stacked()
    q1, q2 = H.shape
    if not (1 <= r <= q2):
        raise ValueError(f"rank r={r} out of range [1, {q2}]")
    W, s, Vt = np.linalg.svd(H, full_matrices=True)
    k = min(r, s.size)
    H_tilde = np.zeros((q1, r))
    H_tilde[:, :k] = W[:, :k] * s[:k]
    return ReducedBasis(
        H_tilde=H_tilde,
        singular_values=s,
        r=r,
        V1=Vt[:r].T,
        dims=partition.dims,
    )


def save_trajectory_csv(traj: Trajectory, path) -> None:
    """Write a trajectory as CSV with a JSON metadata sidecar.

    The CSV has header ``t,u1..um,y1..yp`` and one sample per row; the
    sidecar ``<stem>.meta.json`` records ``m``, ``p``, ``sample_period``,
    and ``label``.
    """
    path = Path(path)
    header = (
        ["t"]
        + [f"u{i + 1}" for i in range(traj.m)]
        + [f"y{i + 1}" for i in range(traj.p)]
    )
    t = np.arange(traj.length) * traj.sample_period
    body = np.hstack((t[:, None], traj.inputs, traj.outputs))
    with path.open("w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in body:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    meta = {
        "m": traj.m,
        "p": traj.p,
        "sample_period": traj.sample_period,
        "label": traj.label,
    }
    path.with_suffix(".meta.json").write_text(json.dumps(meta, sort_keys=True))


def load_trajectory_csv(path) -> Trajectory:
    """Read a trajectory written by :func:`save_trajectory_csv`."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".meta.json").read_text())
    m, p = int(meta["m"]), int(meta["p"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 1 + m + p:
        raise ValueError(
            f"{path} has {data.shape[1]} columns, metadata implies {1 + m + p}"
        )
    return Trajectory(
        inputs=data[:, 1 : 1 + m],
        outputs=data[:, 1 + m :],
        sample_period=float(meta["sample_period"]),
        label=str(meta.get("label", "")),
    )
