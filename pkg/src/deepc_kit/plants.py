"""Simulated plants and signal generators for closed-loop experiments.

Two plant families share one stepping interface:

* :class:`LtiPlant` -- a discrete-time linear system with optional constant
  or scheduled state/output disturbances and measurement noise.
* :class:`SoftArmPlant` -- a nonlinear planar bending-arm surrogate: a
  damped cubic-stiffness rotational ODE driven by a pressure-like input,
  with an attachable payload acting through gravity and a constant-curvature
  tip-position output in millimetres.

The interface is ``output()`` (measure at the current state, no advance),
``advance(u)`` (integrate one sample period), and ``step(u)`` (measure then
advance).  ``output()`` caches its noise draw so repeated reads within one
step agree; the pairing ``(u_k, y_k)`` from ``step`` matches the sampled
data convention used by the Hankel machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ._accel import HAS_NUMBA, jit, numba_enabled
from .hankel import Trajectory

__all__ = [
    "SimulationError",
    "ExcitationConfig",
    "generate_excitation",
    "LtiPlant",
    "lti_step",
    "SoftArmPlant",
    "softarm_step",
    "constant_curvature_tip",
    "ReferenceSchedule",
    "collect_dataset",
    "random_lti",
]


class SimulationError(RuntimeError):
    """Raised when a plant state stops being finite."""


# ---------------------------------------------------------------------------
# excitation


@dataclass(frozen=True)
class ExcitationConfig:
    """Piecewise-constant random excitation: uniform levels held for a few steps."""

    duration: int = 601
    hold: int = 5
    low: float = 0.0
    high: float = 80.0
    seed: int = 0
    channels: int = 1


def generate_excitation(config: ExcitationConfig) -> np.ndarray:
    """Deterministic per-seed excitation sequence, shape ``(duration, channels)``."""
    if config.duration < 1:
        raise ValueError("duration must be >= 1")
    if config.hold < 1:
        raise ValueError("hold must be >= 1")
    if config.low > config.high:
        raise ValueError("low must not exceed high")
    rng = np.random.default_rng(config.seed)
    n_levels = -(-config.duration // config.hold)
    levels = rng.uniform(config.low, config.high, size=(n_levels, config.channels))
    seq = np.repeat(levels, config.hold, axis=0)[: config.duration]
    return seq


# ---------------------------------------------------------------------------
# LTI plant


def _as_disturbance(spec, dim: int) -> Callable[[int], np.ndarray]:
    zero = np.zeros(dim)
    if spec is None:
        return lambda k: zero
    if callable(spec):
        return lambda k: np.asarray(spec(k), dtype=float).reshape(dim)
    const = np.asarray(spec, dtype=float).reshape(dim)
    return lambda k: const


class LtiPlant:
    """Discrete-time LTI plant with disturbances and measurement noise.

    The measurement is ``y_k = C x_k + D u_k + w_y(k) + noise`` and the state
    update is ``x_{k+1} = A x_k + B u_k + w_x(k)``.  ``output()`` omits the
    feedthrough term and therefore requires ``D == 0``; controllers use it to
    read the sensor before choosing the input.
    """

    def __init__(
        self,
        A,
        B,
        C,
        D=None,
        x0=None,
        w_x=None,
        w_y=None,
        noise_std=0.0,
        seed: int = 0,
        sample_period: float = 0.1,
    ):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        self.B = np.asarray(B, dtype=float).reshape(n, -1)
        self.C = np.asarray(C, dtype=float).reshape(-1, n)
        m = self.B.shape[1]
        p = self.C.shape[0]
        self.D = (
            np.zeros((p, m)) if D is None else np.asarray(D, dtype=float).reshape(p, m)
        )
        self.x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n)
        self._w_x = _as_disturbance(w_x, n)
        self._w_y = _as_disturbance(w_y, p)
        self.noise_std = np.broadcast_to(np.asarray(noise_std, dtype=float), (p,)).copy()
        self.seed = seed
        self.sample_period = float(sample_period)
        self.n, self.m, self.p = n, m, p
        self.reset()

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def reset(self, noise_seed=None) -> None:
        """Restore the initial state and restart the noise stream."""
        self.x = self.x0.copy()
        self.k = 0
        self._rng = np.random.default_rng(self.seed if noise_seed is None else noise_seed)
        self._y_cache = None

    def _measured(self) -> np.ndarray:
        if self._y_cache is None:
            y = self.C @ self.x + self._w_y(self.k)
            if np.any(self.noise_std > 0):
                y = y + self._rng.normal(0.0, 1.0, self.p) * self.noise_std
            self._y_cache = y
        return self._y_cache

    def output(self) -> np.ndarray:
        """Measure without advancing; only valid for plants without feedthrough."""
        if np.any(self.D != 0):
            raise ValueError("output() requires D == 0; use step(u) instead")
        return self._measured().copy()

    def advance(self, u) -> None:
        u = np.asarray(u, dtype=float).reshape(self.m)
        if not np.all(np.isfinite(u)):
            raise ValueError("input must be finite")
        self.x = self.A @ self.x + self.B @ u + self._w_x(self.k)
        if not np.all(np.isfinite(self.x)):
            raise SimulationError(f"state diverged at step {self.k}")
        self.k += 1
        self._y_cache = None

    def step(self, u) -> np.ndarray:
        """Measure ``y_k`` (including feedthrough), then advance the state."""
        u = np.asarray(u, dtype=float).reshape(self.m)
        y = self._measured() + self.D @ u
        self.advance(u)
        return y


def lti_step(plant: LtiPlant, u) -> np.ndarray:
    """Functional alias for :meth:`LtiPlant.step`."""
    return plant.step(u)


# ---------------------------------------------------------------------------
# soft-arm surrogate


def _integrate_period_source(theta, omega, u, n_sub, h, J, k1, k3, c, b, grav, th_mount):
    for _ in range(n_sub):
        t1 = omega
        a1 = (
            -k1 * theta - k3 * theta**3 - c * omega + b * u
            + grav * math.sin(theta + th_mount)
        ) / J
        th2 = theta + 0.5 * h * t1
        om2 = omega + 0.5 * h * a1
        t2 = om2
        a2 = (
            -k1 * th2 - k3 * th2**3 - c * om2 + b * u + grav * math.sin(th2 + th_mount)
        ) / J
        th3 = theta + 0.5 * h * t2
        om3 = omega + 0.5 * h * a2
        t3 = om3
        a3 = (
            -k1 * th3 - k3 * th3**3 - c * om3 + b * u + grav * math.sin(th3 + th_mount)
        ) / J
        th4 = theta + h * t3
        om4 = omega + h * a3
        t4 = om4
        a4 = (
            -k1 * th4 - k3 * th4**3 - c * om4 + b * u + grav * math.sin(th4 + th_mount)
        ) / J
        theta = theta + (h / 6.0) * (t1 + 2.0 * t2 + 2.0 * t3 + t4)
        omega = omega + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return theta, omega


_integrate_numba = jit(_integrate_period_source) if HAS_NUMBA else None
_integrate_period = _integrate_numba if numba_enabled() else _integrate_period_source


def _tip_exact(phi: float, length: float) -> tuple[float, float]:
    return length * (1.0 - math.cos(phi)) / phi, length * math.sin(phi) / phi


def _tip_series(phi: float, length: float) -> tuple[float, float]:
    # leading terms of (1-cos)/phi and sin/phi; error O(phi^5)
    return (
        length * (phi / 2.0 - phi**3 / 24.0),
        length * (1.0 - phi * phi / 6.0 + phi**4 / 120.0),
    )


def constant_curvature_tip(phi: float, length: float) -> tuple[float, float]:
    """Tip of a circular arc of given arc length bent through angle ``phi``.

    Returns ``(x, z)`` relative to the base; the straight arm (``phi -> 0``)
    limits to ``(0, length)``.  A series expansion takes over below
    ``|phi| < 1e-6`` where the exact formula loses precision.
    """
    if abs(phi) < 1e-6:
        return _tip_series(phi, length)
    return _tip_exact(phi, length)


class SoftArmPlant:
    """Planar single-segment bending arm with an attachable tip payload.

    Dynamics: ``J theta'' = -k1 theta - k3 theta^3 - c theta' + b u
    + m_p g l_eff sin(theta + theta_mount)``, integrated with fixed-step RK4
    at ``sample_period / substeps``.  Output: constant-curvature tip position
    in mm, offset by the mount so the rest tip sits inside the task-space
    box (x in [30, 160], z in [240, 350]).

    The payload enters through the sine of the bend angle, so it is a
    quasi-constant (not exactly constant) output-space disturbance -- the
    interesting regime for offset-free control.
    """

    def __init__(
        self,
        J: float = 1.0,
        k1: float = 4.0,
        k3: float = 1.0,
        c: float = 1.2,
        b: float = 0.05,
        arm_length_mm: float = 300.0,
        gravity: float = 9.81,
        payload_g: float = 0.0,
        mount_mm: Sequence[float] = (95.0, -5.0),
        theta_mount: float = 0.3,
        curvature_gain: float = 1.0,
        sample_period: float = 0.1,
        substeps: int = 10,
        noise_std: float = 0.0,
        seed: int = 0,
        input_limits: tuple[float, float] = (0.0, 80.0),
        theta0: float = 0.0,
        omega0: float = 0.0,
    ):
        if arm_length_mm <= 0 or J <= 0:
            raise ValueError("arm length and inertia must be positive")
        if payload_g < 0:
            raise ValueError("payload must be nonnegative")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.J, self.k1, self.k3, self.c, self.b = J, k1, k3, c, b
        self.arm_length_mm = float(arm_length_mm)
        self.gravity = gravity
        self.payload_g = float(payload_g)
        self.mount_mm = np.asarray(mount_mm, dtype=float).reshape(2)
        self.theta_mount = theta_mount
        self.curvature_gain = curvature_gain
        self.sample_period = float(sample_period)
        self.substeps = int(substeps)
        self.noise_std = float(noise_std)
        self.seed = seed
        self.input_limits = (float(input_limits[0]), float(input_limits[1]))
        self.theta0, self.omega0 = float(theta0), float(omega0)
        self.m, self.p = 1, 2
        self.reset()

    @property
    def _grav_coef(self) -> float:
        # payload torque coefficient: mass [kg] * g * arm length [m]
        return (self.payload_g / 1000.0) * self.gravity * (self.arm_length_mm / 1000.0)

    def reset(self, noise_seed=None) -> None:
        self.theta = self.theta0
        self.omega = self.omega0
        self.k = 0
        self._rng = np.random.default_rng(self.seed if noise_seed is None else noise_seed)
        self._y_cache = None

    def with_payload(self, payload_g: float) -> "SoftArmPlant":
        """Fresh copy with a different payload; state and rng reset."""
        clone = SoftArmPlant(
            J=self.J,
            k1=self.k1,
            k3=self.k3,
            c=self.c,
            b=self.b,
            arm_length_mm=self.arm_length_mm,
            gravity=self.gravity,
            payload_g=payload_g,
            mount_mm=tuple(self.mount_mm),
            theta_mount=self.theta_mount,
            curvature_gain=self.curvature_gain,
            sample_period=self.sample_period,
            substeps=self.substeps,
            noise_std=self.noise_std,
            seed=self.seed,
            input_limits=self.input_limits,
            theta0=self.theta0,
            omega0=self.omega0,
        )
        return clone

    def tip_at(self, theta: float) -> np.ndarray:
        """Noise-free tip position for a given bend state."""
        x, z = constant_curvature_tip(self.curvature_gain * theta, self.arm_length_mm)
        return self.mount_mm + np.array([x, z])

    def rest_tip(self) -> np.ndarray:
        return self.tip_at(self.theta0)

    def energy(self) -> float:
        """Mechanical energy of the unforced, unloaded arm."""
        return (
            0.5 * self.J * self.omega**2
            + 0.5 * self.k1 * self.theta**2
            + 0.25 * self.k3 * self.theta**4
        )

    def output(self) -> np.ndarray:
        if self._y_cache is None:
            y = self.tip_at(self.theta)
            if self.noise_std > 0:
                y = y + self._rng.normal(0.0, self.noise_std, 2)
            self._y_cache = y
        return self._y_cache.copy()

    def advance(self, u) -> None:
        u = float(np.asarray(u, dtype=float).reshape(()))
        u = min(max(u, self.input_limits[0]), self.input_limits[1])
        h = self.sample_period / self.substeps
        self.theta, self.omega = _integrate_period(
            self.theta,
            self.omega,
            u,
            self.substeps,
            h,
            self.J,
            self.k1,
            self.k3,
            self.c,
            self.b,
            self._grav_coef,
            self.theta_mount,
        )
        if not (math.isfinite(self.theta) and math.isfinite(self.omega)):
            raise SimulationError(f"arm state diverged at step {self.k}")
        self.k += 1
        self._y_cache = None

    def step(self, u) -> np.ndarray:
        y = self.output()
        self.advance(u)
        return y


def softarm_step(plant: SoftArmPlant, u) -> np.ndarray:
    """Functional alias for :meth:`SoftArmPlant.step`; returns the tip (x, z) mm."""
    return plant.step(u)


# ---------------------------------------------------------------------------
# references and data collection


class ReferenceSchedule:
    """Piecewise-constant output reference, held beyond the last change."""

    def __init__(self, entries: Sequence[tuple[int, Sequence[float]]]):
        if not entries:
            raise ValueError("schedule needs at least one entry")
        starts = [int(s) for s, _ in entries]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("start steps must be strictly increasing")
        self.starts = np.array(starts)
        self.setpoints = np.array([np.asarray(sp, dtype=float) for _, sp in entries])

    @classmethod
    def constant(cls, setpoint) -> "ReferenceSchedule":
        return cls([(0, np.asarray(setpoint, dtype=float))])

    @property
    def p(self) -> int:
        return self.setpoints.shape[1]

    def at(self, t: int) -> np.ndarray:
        idx = int(np.searchsorted(self.starts, t, side="right")) - 1
        return self.setpoints[max(idx, 0)].copy()

    def window(self, t: int, N: int) -> np.ndarray:
        return np.array([self.at(t + i) for i in range(N)])

    def segments(self, t_start: int, t_end: int):
        """Yield (seg_start, seg_end) step ranges clipped to [t_start, t_end]."""
        bounds = [s for s in self.starts if t_start < s <= t_end]
        edges = [t_start] + bounds + [t_end + 1]
        for a, b in zip(edges, edges[1:]):
            if b > a:
                yield a, b - 1


def collect_dataset(plant, excitation: ExcitationConfig, kappa: int) -> list[Trajectory]:
    """Run ``kappa`` independent excitation experiments from plant reset.

    Each dataset uses excitation seed ``excitation.seed + i`` and a noise
    stream derived from the plant seed and the dataset index, so repeated
    calls reproduce identical data.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    datasets = []
    for i in range(kappa):
        cfg = replace(excitation, seed=excitation.seed + i, channels=plant.m)
        u_seq = generate_excitation(cfg)
        plant.reset(noise_seed=(plant.seed, 7919, i))
        ys = np.empty((cfg.duration, plant.p))
        for k_step in range(cfg.duration):
            ys[k_step] = plant.step(u_seq[k_step])
        datasets.append(
            Trajectory(
                inputs=u_seq,
                outputs=ys,
                sample_period=plant.sample_period,
                label=f"excitation_seed={cfg.seed}",
            )
        )
    return datasets


def _ctrb(A, B):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def random_lti(
    seed,
    n: int | None = None,
    m: int = 1,
    p: int = 1,
    spectral_radius: float = 0.85,
    sample_period: float = 0.1,
    max_tries: int = 200,
) -> LtiPlant:
    """Random stable, controllable, observable LTI plant for tests/benchmarks.

    The DC gain is kept well conditioned (smallest singular value of
    ``C (I - A)^-1 B`` at least 0.2 after normalization) so step references
    are comfortably reachable.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        order = int(rng.integers(1, 5)) if n is None else n
        A = rng.normal(size=(order, order))
        eigmax = np.max(np.abs(np.linalg.eigvals(A)))
        if eigmax > 0:
            A *= spectral_radius / eigmax
        B = rng.normal(size=(order, m))
        C = rng.normal(size=(p, order))
        if np.linalg.matrix_rank(_ctrb(A, B)) < order:
            continue
        if np.linalg.matrix_rank(_ctrb(A.T, C.T)) < order:
            continue
        G0 = C @ np.linalg.solve(np.eye(order) - A, B)
        sv = np.linalg.svd(G0, compute_uv=False)
        if sv[-1] < 0.2 or sv[0] > 100.0:
            continue
        return LtiPlant(A, B, C, seed=int(rng.integers(0, 2**31)), sample_period=sample_period)
    raise RuntimeError("could not generate a suitable random plant")
