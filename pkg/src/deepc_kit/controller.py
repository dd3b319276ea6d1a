"""Receding-horizon execution of the data-driven controllers.

A :class:`DeePCController` owns the data matrices, the tuning, the rolling
input/output window, and the solver warm start.  Each control step
assembles the mode-appropriate QP from the window ending at the previous
sample, solves it, applies the first optimal input, and rolls the window
forward with the new (input, measurement) pair.

The measurement passed to :meth:`DeePCController.control_step` is the plant
output observed at the current step, which exists before the input is
chosen for plants without direct feedthrough; closed-loop simulation reads
it via ``plant.output()`` and advances with ``plant.advance(u)``.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deepc import (
    ControlSolution,
    DeePCParams,
    InfeasibleError,
    OnlineWindow,
    assemble_regularized,
    assemble_velocity,
    decode_solution,
)
from .hankel import DeltaHankelPartition, HankelPartition, ReducedBasis
from .qp import SolverSettings, dump_problem, solve_qp

__all__ = [
    "DeePCController",
    "StepDiagnostics",
    "ClosedLoopTrace",
    "ClosedLoopError",
    "run_closed_loop",
]


@dataclass(frozen=True)
class StepDiagnostics:
    """Per-step solver and cost bookkeeping."""

    step: int
    objective: float
    iterations: int
    status: str
    solve_time_s: float
    solution: ControlSolution


class ClosedLoopError(RuntimeError):
    """A closed-loop run failed; ``trace`` holds the steps completed so far."""

    def __init__(self, message: str, trace: "ClosedLoopTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class ClosedLoopTrace:
    """Time-stamped record of one receding-horizon run."""

    times: np.ndarray
    references: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    objectives: np.ndarray
    iterations: np.ndarray
    solve_times_s: np.ndarray
    statuses: list[str] = field(default_factory=list)
    sample_period: float = 0.1
    error: str | None = None

    def __len__(self) -> int:
        return len(self.times)

    def to_csv(self, path) -> None:
        """Write ``t,ref1..refp,u1..um,y1..yp,objective,iters,solve_ms``."""
        p = self.references.shape[1]
        m = self.inputs.shape[1]
        header = (
            ["t"]
            + [f"ref{i + 1}" for i in range(p)]
            + [f"u{i + 1}" for i in range(m)]
            + [f"y{i + 1}" for i in range(p)]
            + ["objective", "iters", "solve_ms"]
        )
        with Path(path).open("w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(len(self)):
                row = (
                    [self.times[i]]
                    + list(self.references[i])
                    + list(self.inputs[i])
                    + list(self.outputs[i])
                    + [self.objectives[i], int(self.iterations[i]), self.solve_times_s[i] * 1e3]
                )
                fh.write(
                    ",".join(
                        str(v) if isinstance(v, int) else repr(float(v)) for v in row
                    )
                    + "\n"
                )


class DeePCController:
    """Receding-horizon controller in regularized or velocity mode.

    The mode follows the data-matrix kind: a :class:`HankelPartition` runs
    the regularized formulation, a :class:`DeltaHankelPartition` or
    :class:`ReducedBasis` runs the velocity form.

    Args:
        data: Offline data matrices.
        params: Horizons, weights, regularizers, bounds.
        settings: QP solver settings (defaults are fine).
        warm_start: Reuse the previous primal/dual iterate as the next
            solve's starting point; identical optima, fewer iterations.
        sample_period: Optional period (s) of the offline data, checked
            against the plant in :func:`run_closed_loop`.
    """

    def __init__(
        self,
        data,
        params: DeePCParams,
        settings: SolverSettings | None = None,
        warm_start: bool = True,
        sample_period: float | None = None,
    ):
        if isinstance(data, HankelPartition):
            self.mode = "regularized"
        elif isinstance(data, (DeltaHankelPartition, ReducedBasis)):
            self.mode = "velocity"
        else:
            raise TypeError(f"unsupported data matrices: {type(data).__name__}")
        d = data.dims
        if (d.T_ini, d.N) != (params.T_ini, params.N):
            raise ValueError("data horizons disagree with params")
        self.data = data
        self.params = params
        self.settings = settings or SolverSettings()
        self.warm_start_enabled = warm_start
        self.sample_period = sample_period
        self.m, self.p = d.m, d.p
        self._u_hist = np.zeros((params.T_ini, d.m))
        self._y_hist = np.zeros((params.T_ini, d.p))
        self.step_index = 0
        self._warm: tuple[np.ndarray, np.ndarray] | None = None
        self._u_lo, self._u_hi = params.bounds(d.m, d.p)[0]

    @property
    def initialized(self) -> bool:
        return self.step_index >= self.params.T_ini

    @property
    def window(self) -> OnlineWindow:
        return OnlineWindow(u_ini=self._u_hist.copy(), y_ini=self._y_hist.copy())

    def _push(self, u: np.ndarray, y: np.ndarray) -> None:
        self._u_hist = np.vstack((self._u_hist[1:], u))
        self._y_hist = np.vstack((self._y_hist[1:], y))

    def initialize(self, plant) -> "DeePCController":
        """Fill the window by applying zero input for ``T_ini`` steps.

        The plant should be at its initial condition; afterwards the input
        history is all zeros, the output history holds the measured
        responses, and the step index is ``T_ini``.
        """
        zeros = np.zeros(self.m)
        for _ in range(self.params.T_ini):
            y = np.asarray(plant.step(zeros), dtype=float).reshape(self.p)
            self._push(zeros, y)
        self.step_index = self.params.T_ini
        self._warm = None
        return self

    def _assemble(self, window: OnlineWindow, ref: np.ndarray):
        if self.mode == "regularized":
            return assemble_regularized(self.data, window, ref, self.params)
        return assemble_velocity(self.data, window, ref, self.params)

    def control_step(self, measurement, ref_window):
        """Solve for the next input and roll the window forward.

        Args:
            measurement: Output observed at the current step (the response
                the applied input will be paired with).
            ref_window: Up to ``N`` upcoming reference outputs; shorter
                windows are padded by holding the last entry.

        Returns:
            ``(u, diagnostics)`` -- the input to apply now and the step's
            :class:`StepDiagnostics`.

        Raises:
            InfeasibleError: If the solver certifies the QP infeasible; the
                offending problem is dumped to a temp file for inspection.
        """
        if not self.initialized:
            raise RuntimeError("controller window not initialized; call initialize()")
        y_now = np.asarray(measurement, dtype=float).reshape(self.p)
        if not np.all(np.isfinite(y_now)):
            raise ValueError("measurement contains non-finite entries")
        ref = np.atleast_2d(np.asarray(ref_window, dtype=float))
        if ref.shape[0] > self.params.N:
            raise ValueError("reference window longer than the prediction horizon")
        if ref.shape[0] < self.params.N:
            pad = np.tile(ref[-1], (self.params.N - ref.shape[0], 1))
            ref = np.vstack((ref, pad))

        window = self.window
        problem = self._assemble(window, ref)
        start = time.perf_counter()
        qp_sol = solve_qp(
            problem,
            self.settings,
            warm_start=self._warm if self.warm_start_enabled else None,
        )
        elapsed = time.perf_counter() - start
        if qp_sol.status == "infeasible":
            fd, dump_path = tempfile.mkstemp(prefix="deepc_infeasible_", suffix=".txt")
            os.close(fd)
            dump_problem(problem, dump_path)
            raise InfeasibleError(
                f"QP infeasible at step {self.step_index}; problem dumped to {dump_path}"
            )
        solution = decode_solution(qp_sol, self.data, window, ref, self.params)
        u = np.clip(solution.u_star[0], self._u_lo, self._u_hi)

        self._push(u, y_now)
        self._warm = (qp_sol.z_star, qp_sol.y_dual)
        diag = StepDiagnostics(
            step=self.step_index,
            objective=solution.objective,
            iterations=qp_sol.iterations,
            status=qp_sol.status,
            solve_time_s=elapsed,
            solution=solution,
        )
        self.step_index += 1
        return u, diag


def run_closed_loop(
    controller: DeePCController,
    plant,
    reference_schedule,
    t_end: int,
) -> ClosedLoopTrace:
    """Drive ``plant`` with ``controller`` from initialization through ``t_end``.

    Initializes the window (zero input) if the controller is fresh, then
    loops measure -> solve -> apply, producing one trace record per control
    step (``t_end - T_ini + 1`` records).  Deterministic for a given plant
    seed.  On failure a :class:`ClosedLoopError` carrying the partial trace
    is raised.
    """
    if controller.sample_period is not None and hasattr(plant, "sample_period"):
        if abs(controller.sample_period - plant.sample_period) > 1e-12:
            raise ValueError(
                "controller data and plant disagree on sample period: "
                f"{controller.sample_period} vs {plant.sample_period}"
            )
    if not controller.initialized:
        controller.initialize(plant)
    if t_end < controller.step_index:
        raise ValueError("t_end precedes the current controller step")

    dt = plant.sample_period if hasattr(plant, "sample_period") else 1.0
    records = []

    def _build(error=None):
        if records:
            times, refs, us, ys, objs, iters, st, status = map(list, zip(*records))
        else:
            times, refs, us, ys, objs, iters, st, status = ([] for _ in range(8))
        return ClosedLoopTrace(
            times=np.array(times),
            references=np.array(refs).reshape(len(records), controller.p),
            inputs=np.array(us).reshape(len(records), controller.m),
            outputs=np.array(ys).reshape(len(records), controller.p),
            objectives=np.array(objs),
            iterations=np.array(iters, dtype=int),
            solve_times_s=np.array(st),
            statuses=list(status),
            sample_period=dt,
            error=error,
        )

    for t in range(controller.step_index, t_end + 1):
        ref_now = reference_schedule.at(t)
        ref_win = reference_schedule.window(t, controller.params.N)
        try:
            y = plant.output()
            u, diag = controller.control_step(y, ref_win)
            plant.advance(u)
        except Exception as exc:
            raise ClosedLoopError(
                f"closed loop failed at step {t}: {exc}", _build(error=repr(exc))
            ) from exc
        records.append(
            (
                t * dt,
                ref_now,
                u,
                y,
                diag.objective,
                diag.iterations,
                diag.solve_time_s,
                diag.status,
            )
        )
    return _build()
