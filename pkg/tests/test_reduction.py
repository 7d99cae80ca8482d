"""Tests for compatible reduced spaces, PCA enrichment and the greedy loop."""

import numpy as np
import pytest

from src.certification import ConstantsProvider, error_norms_sq
from src.reduction import (
    AntiderivativeRightInverse,
    MinNormRightInverse,
    build_reduced_basis,
    check_compatibility,
    constrained_pca,
    greedy_train,
    is_stagnating,
    joint_snapshots,
    kernel_only_basis,
    m_orthonormalize,
    make_right_inverse,
    pod_modes,
    project_initial,
    solve_reduced,
)
from src.time_integration import SolverSettings, Trajectory, integrate
from src.truth_fem import SourceAndBoundaryData, StateVector, assemble_load, initial_state

SETTINGS = SolverSettings(t_end=1.0, step=0.05)


@pytest.fixture
def snapshots(small_diamond, diamond_data):
    load = assemble_load(small_diamond, diamond_data)
    x0 = initial_state(small_diamond, diamond_data)
    return [integrate(small_diamond, mu, load, x0, SETTINGS) for mu in (0.1, 3.0)]


@pytest.fixture
def constants(small_diamond):
    return ConstantsProvider(small_diamond, mu_range=(0.01, 10.0))


class TestOrthonormalize:
    """Test Gram-Schmidt in a weighted inner product."""

    def test_orthonormal_columns(self, small_diamond, rng):
        basis = m_orthonormalize(rng.standard_normal((small_diamond.n_u, 5)), small_diamond.M_V)
        np.testing.assert_allclose(basis.T @ (small_diamond.M_V @ basis), np.eye(5), atol=1e-12)

    def test_dependent_columns_dropped(self, small_diamond, rng):
        vectors = rng.standard_normal((small_diamond.n_p, 2))
        vectors = np.hstack([vectors, vectors @ [[1.0], [2.0]], np.zeros((small_diamond.n_p, 1))])
        assert m_orthonormalize(vectors, small_diamond.M_Q).shape[1] == 2

    def test_against_existing(self, small_diamond, rng):
        M = small_diamond.M_Q
        first = m_orthonormalize(rng.standard_normal((small_diamond.n_p, 3)), M)
        second = m_orthonormalize(rng.standard_normal((small_diamond.n_p, 3)), M, against=first)
        np.testing.assert_allclose(first.T @ (M @ second), 0.0, atol=1e-12)


class TestRightInverse:
    """Test right-inverses of the edgewise derivative."""

    def test_min_norm(self, small_diamond, rng):
        model = small_diamond
        q_hat = rng.standard_normal((model.n_p, 3))
        v = MinNormRightInverse(model).apply(q_hat)
        np.testing.assert_allclose(model.G @ v, q_hat, atol=1e-10)
        # minimal norm means no component along the derivative's null space
        np.testing.assert_allclose(model.kernel_flux.T @ (model.M_V @ v), 0.0, atol=1e-10)

    def test_antiderivative_lift(self, small_diamond, rng):
        model = small_diamond
        q = rng.standard_normal(model.n_p)
        v = AntiderivativeRightInverse(model).lift(q)
        np.testing.assert_allclose(model.derivative(v), q, atol=1e-10)

    def test_vector_and_matrix_inputs_agree(self, small_diamond, rng):
        inverse = MinNormRightInverse(small_diamond)
        q_hat = rng.standard_normal(small_diamond.n_p)
        np.testing.assert_allclose(inverse.apply(q_hat), inverse.apply(q_hat[:, None])[:, 0])

    def test_unknown_kind(self, small_diamond):
        with pytest.raises(ValueError, match="right-inverse"):
            make_right_inverse(small_diamond, "pseudo")  # type: ignore[arg-type]


class TestReducedBasis:
    """Test basis construction and compatibility."""

    def test_kernel_only(self, small_diamond):
        rb = kernel_only_basis(small_diamond)
        assert (rb.dim_q, rb.dim_v, rb.n) == (0, 3, 3)
        assert check_compatibility(small_diamond, rb).passed()

    def test_pca_is_compatible(self, small_diamond, snapshots):
        rb = constrained_pca(small_diamond, snapshots, energy_cutoff=0.0, max_modes=4)
        assert rb.dim_q == 4
        assert rb.dim_v == rb.dim_q + small_diamond.kernel.dim
        assert rb.blocks == (4,)
        report = check_compatibility(small_diamond, rb)
        assert report.passed(), report

    def test_antiderivative_pca_is_compatible(self, small_diamond, snapshots):
        rb = constrained_pca(
            small_diamond,
            snapshots,
            max_modes=3,
            right_inverse=AntiderivativeRightInverse(small_diamond),
        )
        assert check_compatibility(small_diamond, rb).passed()

    def test_right_inverse_does_not_change_reduced_solution(
        self, small_diamond, snapshots, diamond_data
    ):
        model = small_diamond
        load = assemble_load(model, diamond_data)
        x0 = initial_state(model, diamond_data)
        states = []
        for kind in ("min_norm", "antiderivative"):
            rb = constrained_pca(
                model,
                snapshots,
                energy_cutoff=0.0,
                max_modes=3,
                right_inverse=make_right_inverse(model, kind),
            )
            trajectory, _ = solve_reduced(model, rb, 2.3, load, x0, SETTINGS)
            states.append(rb.reconstruct(trajectory.p, trajectory.u))
        min_norm, antiderivative = states
        np.testing.assert_allclose(antiderivative.p, min_norm.p, rtol=0, atol=1e-9)
        np.testing.assert_allclose(antiderivative.u, min_norm.u, rtol=0, atol=1e-9)

    def test_enrichment_extends_basis(self, small_diamond, snapshots):
        first = constrained_pca(small_diamond, snapshots[:1], energy_cutoff=0.0, max_modes=2)
        second = constrained_pca(
            small_diamond, snapshots[1:], energy_cutoff=0.0, max_modes=2, basis=first
        )
        assert second.blocks == (2, 2)
        np.testing.assert_array_equal(second.q_basis[:, :2], first.q_basis)
        assert check_compatibility(small_diamond, second).passed()

    def test_prefix(self, small_diamond, snapshots):
        rb = constrained_pca(small_diamond, snapshots[:1], energy_cutoff=0.0, max_modes=2)
        rb = constrained_pca(small_diamond, snapshots[1:], energy_cutoff=0.0, max_modes=2, basis=rb)
        head = rb.prefix(small_diamond, 1)
        assert (head.dim_q, head.dim_v) == (2, 5)
        assert check_compatibility(small_diamond, head).passed()
        assert rb.prefix(small_diamond, 0).n == 3
        with pytest.raises(ValueError):
            rb.prefix(small_diamond, 3)

    def test_empty_snapshots(self, small_diamond):
        assert constrained_pca(small_diamond, []).n == 3
        with pytest.raises(ValueError, match="Empty"):
            constrained_pca(small_diamond, [], min_modes=1)

    def test_mode_cap(self, small_diamond, snapshots):
        rb = constrained_pca(small_diamond, snapshots, energy_cutoff=0.0, max_modes=1)
        assert rb.dim_q == 1

    def test_shape_mismatch(self, small_diamond):
        with pytest.raises(ValueError, match="truth dimensions"):
            build_reduced_basis(small_diamond, np.zeros((3, 1)), np.zeros((3, 1)), 0)


class TestPod:
    """Test the method of snapshots."""

    def test_matches_weighted_svd(self, small_diamond, snapshots):
        joint = joint_snapshots(small_diamond, snapshots)
        modes, eigenvalues = pod_modes(joint, small_diamond.M_Q, 0.0, 3)
        weighted = np.sqrt(small_diamond.cell_width)[:, None] * joint
        singular = np.linalg.svd(weighted, compute_uv=False)
        np.testing.assert_allclose(eigenvalues, singular[:3] ** 2, rtol=1e-8)
        np.testing.assert_allclose(
            modes.T @ (small_diamond.M_Q @ modes), np.eye(3), atol=1e-8
        )

    def test_empty(self, small_diamond):
        modes, eigenvalues = pod_modes(np.zeros((small_diamond.n_p, 0)), small_diamond.M_Q, 1e-7, 5)
        assert modes.shape == (small_diamond.n_p, 0)
        assert eigenvalues.size == 0

    def test_joint_snapshot_layout(self, small_diamond, snapshots):
        joint = joint_snapshots(small_diamond, snapshots)
        records = sum(len(s) for s in snapshots)
        assert joint.shape == (small_diamond.n_p, 2 * records)


class TestReducedSolve:
    """Test reduced runs."""

    def test_zero_data_gives_zero_initial_error(self, small_diamond, diamond_data):
        rb = kernel_only_basis(small_diamond)
        x0 = initial_state(small_diamond, diamond_data)
        initial = project_initial(small_diamond, rb, x0.p, x0.u)
        assert initial.error_sq == 0.0
        np.testing.assert_array_equal(initial.state.u, 0.0)

    def test_initial_error_is_orthogonal_remainder(self, small_diamond, rng):
        rb = kernel_only_basis(small_diamond)
        p0 = rng.standard_normal(small_diamond.n_p)
        initial = project_initial(small_diamond, rb, p0, np.zeros(small_diamond.n_u))
        assert initial.error_p**2 == pytest.approx(p0 @ (small_diamond.M_Q @ p0))

    def test_reduced_dissipation(self, small_diamond, snapshots, rng):
        """Homogeneous reduced runs do not gain energy."""
        model = small_diamond
        rb = constrained_pca(model, snapshots, max_modes=4)
        x0 = StateVector(p=rng.standard_normal(model.n_p), u=rng.standard_normal(model.n_u))
        load = assemble_load(model, SourceAndBoundaryData())
        trajectory, _ = solve_reduced(model, rb, 0.5, load, x0, SETTINGS)
        assert np.all(np.diff(trajectory.energies) <= 1e-12 * trajectory.energies[0])

    def test_full_reconstruction_shape(self, small_diamond, snapshots, diamond_data):
        model = small_diamond
        rb = constrained_pca(model, snapshots, max_modes=2)
        load = assemble_load(model, diamond_data)
        trajectory, _ = solve_reduced(
            model, rb, 1.0, load, initial_state(model, diamond_data), SETTINGS
        )
        approx = rb.reconstruct(trajectory.p, trajectory.u)
        assert approx.p.shape == (len(trajectory), model.n_p)
        assert approx.u.shape == (len(trajectory), model.n_u)


class TestGreedy:
    """Test the bound-driven POD-greedy loop."""

    training = [0.1, 1.0, 5.0]

    def test_loose_tolerance_stops_immediately(self, small_diamond, diamond_data, constants):
        state = greedy_train(
            small_diamond, self.training, diamond_data, SETTINGS, 1e10, 50, constants
        )
        assert state.stop_reason == "tolerance"
        assert len(state.history) == 1
        assert state.history[0].iteration == 0
        assert state.basis.n == 3

    def test_size_cap_without_room(self, small_diamond, diamond_data, constants):
        state = greedy_train(
            small_diamond, self.training, diamond_data, SETTINGS, 1e-30, 3, constants
        )
        assert state.stop_reason == "n_max"
        assert (state.basis.dim_q, state.basis.dim_v) == (0, 3)

    def test_enrichment(self, small_diamond, diamond_data, constants):
        state = greedy_train(
            small_diamond,
            self.training,
            diamond_data,
            SETTINGS,
            1e-30,
            9,
            constants,
            modes_per_iteration=2,
            energy_cutoff=0.0,
        )
        assert state.stop_reason == "n_max"
        assert state.basis.n <= 9
        sizes = [r.n for r in state.history]
        assert sizes == sorted(sizes)
        assert sizes[0] == 3 and sizes[-1] == state.basis.n
        assert all(r.compatibility is not None and r.compatibility.passed() for r in state.history)
        assert all(r.mu in self.training for r in state.history)
        assert state.history[-1].indicator < state.history[0].indicator

    def test_parallel_sweep_matches_serial(self, small_diamond, diamond_data, constants):
        kwargs = dict(modes_per_iteration=2, max_iterations=1)
        serial = greedy_train(
            small_diamond, self.training, diamond_data, SETTINGS, 1e-30, 20, constants, **kwargs
        )
        parallel = greedy_train(
            small_diamond,
            self.training,
            diamond_data,
            SETTINGS,
            1e-30,
            20,
            constants,
            workers=3,
            **kwargs,
        )
        assert serial.stop_reason == parallel.stop_reason == "max_iterations"
        assert [r.mu for r in serial.history] == [r.mu for r in parallel.history]
        assert [r.indicator for r in serial.history] == pytest.approx(
            [r.indicator for r in parallel.history], rel=1e-12
        )

    def test_exhausted_snapshots_end_normally(self, small_diamond, diamond_data, constants):
        def silent_truth(mu: float) -> Trajectory:
            steps = SETTINGS.n_steps + 1
            return Trajectory(
                times=SETTINGS.step * np.arange(steps),
                p=np.zeros((steps, small_diamond.n_p)),
                u=np.zeros((steps, small_diamond.n_u)),
                step=SETTINGS.step,
            )

        state = greedy_train(
            small_diamond,
            self.training,
            diamond_data,
            SETTINGS,
            1e-30,
            50,
            constants,
            truth_solver=silent_truth,
        )
        assert state.stop_reason == "exhausted"
        assert len(state.history) == 1
        assert state.basis.n == 3

    def test_single_parameter_reproduces_truth(self, small_diamond, diamond_data, constants):
        """Training on one parameter runs to the numerical floor and reproduces it."""
        model = small_diamond
        state = greedy_train(
            model, [1.0], diamond_data, SETTINGS, 0.0, 500, constants, energy_cutoff=1e-14
        )
        assert state.stop_reason == "exhausted"
        indicators = [r.indicator for r in state.history]
        assert indicators[-1] < 1e-8 < indicators[0]

        load = assemble_load(model, diamond_data)
        x0 = initial_state(model, diamond_data)
        truth = integrate(model, 1.0, load, x0, SETTINGS)
        reduced, _ = solve_reduced(model, state.basis, 1.0, load, x0, SETTINGS)
        err_sq = error_norms_sq(model, state.basis, reduced, truth)
        assert np.max(err_sq) <= 1e-8
        assert np.max(err_sq) <= indicators[-1]

    def test_stagnation_guard(self):
        assert is_stagnating([(1.0, 3.0), (1.0, 3.0), (1.0, 4.0)])
        assert not is_stagnating([(1.0, 3.0), (1.0, 3.0)])
        assert not is_stagnating([(1.0, 3.0), (1.0, 2.0), (1.0, 4.0)])
        assert not is_stagnating([(0.5, 3.0), (1.0, 3.0), (1.0, 4.0)])
        assert is_stagnating([(0.5, 9.0), (1.0, 3.0), (1.0, 3.0), (1.0, 3.0)])

    def test_empty_training_set(self, small_diamond, diamond_data, constants):
        with pytest.raises(ValueError, match="empty"):
            greedy_train(small_diamond, [], diamond_data, SETTINGS, 1e-3, 50, constants)

    def test_sparse_recording_rejected(self, small_diamond, diamond_data, constants):
        with pytest.raises(ValueError, match="every step"):
            greedy_train(
                small_diamond,
                self.training,
                diamond_data,
                SolverSettings(1.0, 0.05, record_every=2),
                1e-3,
                50,
                constants,
            )
