import numpy as np
import pytest

import deepc_kit.qp as qp_mod
from deepc_kit.qp import (
    QuadraticProgram,
    SolverSettings,
    dump_problem,
    load_problem,
    solve_qp,
)

from oracles import solve_qp_reference


def make_qp(P, q, Aeq=(), beq=(), G=(), lo=(), hi=()):
    return QuadraticProgram(
        P=np.atleast_2d(np.asarray(P, dtype=float)),
        q=q,
        Aeq=np.asarray(Aeq, dtype=float),
        beq=beq,
        Gineq=np.asarray(G, dtype=float),
        lower=lo,
        upper=hi,
    )


def random_instance(rng, with_eq=True, n_ineq=None):
    d = int(rng.integers(2, 7))
    M = rng.normal(size=(d, d))
    P = M.T @ M + 0.1 * np.eye(d)
    q = rng.normal(size=d)
    if with_eq and rng.random() < 0.8:
        e = int(rng.integers(1, d))
        Aeq = rng.normal(size=(e, d))
        beq = rng.normal(size=e)
    else:
        Aeq, beq = np.zeros((0, d)), np.zeros(0)
    c = int(rng.integers(0, 4)) if n_ineq is None else n_ineq
    if c:
        G = rng.normal(size=(c, d))
        centers = rng.normal(size=c)
        half = rng.uniform(0.2, 2.0, size=c)
        lo = centers - half
        hi = centers + half
        # sprinkle in one-sided rows
        for i in range(c):
            r = rng.random()
            if r < 0.2:
                lo[i] = -np.inf
            elif r < 0.4:
                hi[i] = np.inf
    else:
        G, lo, hi = np.zeros((0, d)), np.zeros(0), np.zeros(0)
    return make_qp(P, q, Aeq, beq, G, lo, hi)


class TestBasicProblems:
    def test_unconstrained_scalar(self):
        # (z - 1)^2 up to its constant
        sol = solve_qp(make_qp([[2.0]], [-2.0]))
        assert sol.solved
        np.testing.assert_allclose(sol.z_star, [1.0], atol=1e-8)
        np.testing.assert_allclose(sol.objective + 1.0, 0.0, atol=1e-8)

    def test_bound_clipped_scalar(self):
        sol = solve_qp(make_qp([[2.0]], [-2.0], G=[[1.0]], lo=[0.0], hi=[0.5]))
        assert sol.solved
        np.testing.assert_allclose(sol.z_star, [0.5], atol=1e-5)

    def test_symmetric_equality_projection(self):
        sol = solve_qp(make_qp(2 * np.eye(2), [0.0, 0.0], Aeq=[[1.0, 1.0]], beq=[1.0]))
        assert sol.solved
        np.testing.assert_allclose(sol.z_star, [0.5, 0.5], atol=1e-6)

    def test_infeasible_equality_vs_box(self):
        sol = solve_qp(
            make_qp([[2.0]], [0.0], Aeq=[[1.0]], beq=[0.5], G=[[1.0]], lo=[0.0], hi=[0.2])
        )
        assert sol.status == "infeasible"

    def test_inconsistent_equalities(self):
        sol = solve_qp(
            make_qp(
                2 * np.eye(2),
                [0.0, 0.0],
                Aeq=[[1.0, 0.0], [1.0, 0.0]],
                beq=[0.0, 1.0],
            )
        )
        assert sol.status == "infeasible"


class TestOracleAgreement:
    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(42)
        settings = SolverSettings(eps_abs=1e-9, eps_rel=1e-9, max_iter=100000)
        checked = 0
        for case in range(120):
            problem = random_instance(rng)
            try:
                z_ref, obj_ref = solve_qp_reference(problem)
            except RuntimeError:
                continue  # randomly infeasible instance
            sol = solve_qp(problem, settings)
            assert sol.solved, f"case {case} not solved: {sol.status}"
            assert abs(sol.objective - obj_ref) <= 1e-6 * max(1.0, abs(obj_ref)), (
                f"case {case}: objective {sol.objective} vs oracle {obj_ref}"
            )
            np.testing.assert_allclose(
                sol.z_star, z_ref, atol=1e-5, rtol=1e-5, err_msg=f"case {case}"
            )
            checked += 1
        assert checked >= 100

    def test_solution_satisfies_kkt_tolerances(self):
        rng = np.random.default_rng(7)
        settings = SolverSettings()
        for _ in range(30):
            problem = random_instance(rng, n_ineq=2)
            sol = solve_qp(problem, settings)
            if not sol.solved:
                continue
            if problem.Aeq.shape[0]:
                eq_res = np.max(np.abs(problem.Aeq @ sol.z_star - problem.beq))
                scale = max(1.0, np.max(np.abs(problem.Aeq @ sol.z_star)))
                assert eq_res <= settings.eps_abs + settings.eps_rel * scale + 1e-9
            if problem.Gineq.shape[0]:
                Gz = problem.Gineq @ sol.z_star
                slack = max(
                    np.max(problem.lower - Gz, initial=0.0),
                    np.max(Gz - problem.upper, initial=0.0),
                )
                assert slack <= 1e-4


class TestProperties:
    def test_bound_loosening_never_raises_optimum(self):
        rng = np.random.default_rng(11)
        settings = SolverSettings(eps_abs=1e-9, eps_rel=1e-9, max_iter=100000)
        for case in range(100):
            problem = random_instance(rng, n_ineq=3)
            if problem.Gineq.shape[0] == 0:
                continue
            sol_tight = solve_qp(problem, settings)
            widened = QuadraticProgram(
                P=problem.P,
                q=problem.q,
                Aeq=problem.Aeq,
                beq=problem.beq,
                Gineq=problem.Gineq,
                lower=problem.lower - 1.0,
                upper=problem.upper + 1.0,
            )
            sol_wide = solve_qp(widened, settings)
            if sol_tight.solved and sol_wide.solved:
                assert sol_wide.objective <= sol_tight.objective + 1e-6, f"case {case}"

    def test_joint_scaling_leaves_minimizer(self):
        rng = np.random.default_rng(12)
        settings = SolverSettings(eps_abs=1e-10, eps_rel=1e-10, max_iter=100000)
        for case in range(100):
            problem = random_instance(rng)
            alpha = float(rng.uniform(0.05, 20.0))
            scaled = QuadraticProgram(
                P=alpha * problem.P,
                q=alpha * problem.q,
                Aeq=problem.Aeq,
                beq=problem.beq,
                Gineq=problem.Gineq,
                lower=problem.lower,
                upper=problem.upper,
            )
            s1 = solve_qp(problem, settings)
            s2 = solve_qp(scaled, settings)
            if s1.solved and s2.solved:
                np.testing.assert_allclose(
                    s1.z_star, s2.z_star, atol=1e-8, rtol=1e-6,
                    err_msg=f"case {case}, alpha={alpha}",
                )

    def test_deterministic_repeat(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            problem = random_instance(rng)
            a = solve_qp(problem)
            b = solve_qp(problem)
            assert a.iterations == b.iterations
            assert a.status == b.status
            np.testing.assert_array_equal(a.z_star, b.z_star)
            np.testing.assert_array_equal(a.y_dual, b.y_dual)

    def test_warm_start_preserves_optimum(self):
        rng = np.random.default_rng(14)
        settings = SolverSettings(eps_abs=1e-9, eps_rel=1e-9, max_iter=100000)
        for _ in range(20):
            problem = random_instance(rng)
            cold = solve_qp(problem, settings)
            if not cold.solved:
                continue
            warm = solve_qp(problem, settings, warm_start=(cold.z_star, cold.y_dual))
            assert warm.solved
            assert warm.iterations <= cold.iterations
            np.testing.assert_allclose(warm.z_star, cold.z_star, atol=1e-6, rtol=1e-5)


class TestValidation:
    def test_asymmetric_p_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            make_qp([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0])

    def test_crossed_bounds_rejected(self):
        with pytest.raises(ValueError, match="lower"):
            make_qp([[1.0]], [0.0], G=[[1.0]], lo=[1.0], hi=[0.0])

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SolverSettings(eps_abs=0.0)


class TestDump:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        problem = random_instance(rng, n_ineq=2)
        path = tmp_path / "problem.txt"
        dump_problem(problem, path)
        loaded = load_problem(path)
        np.testing.assert_array_equal(loaded.P, problem.P)
        np.testing.assert_array_equal(loaded.q, problem.q)
        np.testing.assert_array_equal(loaded.Aeq, problem.Aeq)
        np.testing.assert_array_equal(loaded.lower, problem.lower)
        np.testing.assert_array_equal(loaded.upper, problem.upper)
        assert path.read_text().startswith("%")
