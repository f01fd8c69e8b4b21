import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize, minimize_scalar

from mesa_slam.baselines import centralized
from mesa_slam.datasets import SyntheticConfig, generate
from mesa_slam.factorgraph import (
    BetweenFactor,
    Key,
    NoiseModel,
    PriorFactor,
    SolverConfig,
    optimize,
)
from mesa_slam.manifold import (
    Pose,
    between,
    chordal_vec,
    compose,
    exp_map,
    log_map,
    random_pose,
    retract,
)
from mesa_slam.mesa import (
    BiasedPriorFactor,
    ConstraintKind,
    EdgeState,
    KindTypeMismatch,
    MesaConfig,
    RobotNode,
    StopCriteria,
    build_team,
    constraint_eval,
    constraint_gap,
    default_hyperparameters,
    dual_update,
    edge_value,
    init_edges,
    local_solve,
    max_gap,
    mesa_edge_step,
    run,
    variant_config,
    z_update,
)

from helpers import fd_jacobians, random_noise

POSE_KINDS = [
    ConstraintKind.GEODESIC,
    ConstraintKind.APPROX_GEODESIC,
    ConstraintKind.SPLIT,
    ConstraintKind.CHORDAL,
]
seeds = st.integers(0, 2**32 - 1)


def small_pose(rng, dim=3):
    return random_pose(rng, dim, max_angle=1.0)


class TestConstraint:
    @pytest.mark.parametrize("kind", POSE_KINDS)
    @pytest.mark.parametrize("dim", [2, 3])
    def test_zero_at_consensus(self, kind, dim, rng):
        p = small_pose(rng, dim)
        np.testing.assert_allclose(constraint_gap(kind, p, p), 0, atol=1e-12)
        np.testing.assert_allclose(constraint_eval(kind, p, edge_value(kind, p)), 0, atol=1e-12)

    @pytest.mark.parametrize("kind", POSE_KINDS)
    def test_nonzero_away_from_consensus(self, kind, rng):
        for _ in range(20):
            a, b = small_pose(rng), small_pose(rng)
            assert np.abs(constraint_gap(kind, a, b)).max() > 1e-6

    def test_geodesic_is_relative_log(self, rng):
        for _ in range(20):
            a, z = small_pose(rng), small_pose(rng)
            np.testing.assert_allclose(
                constraint_eval(ConstraintKind.GEODESIC, a, z), log_map(between(z, a)), atol=1e-10
            )

    def test_split_components(self, rng):
        a, z = small_pose(rng), small_pose(rng)
        q = constraint_eval(ConstraintKind.SPLIT, a, z)
        np.testing.assert_allclose(q[3:], a.translation - z.translation, atol=1e-12)
        rel = log_map(Pose(z.rotation.T @ a.rotation, np.zeros(3)))
        np.testing.assert_allclose(q[:3], rel[:3], atol=1e-10)

    def test_vector_kinds(self, rng):
        a, b = small_pose(rng), small_pose(rng)
        np.testing.assert_allclose(
            constraint_gap(ConstraintKind.CHORDAL, a, b), chordal_vec(a) - chordal_vec(b), atol=1e-12
        )
        np.testing.assert_allclose(
            constraint_gap(ConstraintKind.APPROX_GEODESIC, a, b), log_map(a) - log_map(b), atol=1e-12
        )
        x, y = rng.normal(size=2), rng.normal(size=2)
        np.testing.assert_allclose(constraint_gap(ConstraintKind.LINEAR, x, y), x - y)

    def test_kind_type_mismatch(self, rng):
        p = small_pose(rng)
        with pytest.raises(KindTypeMismatch):
            constraint_gap(ConstraintKind.LINEAR, p, p)
        with pytest.raises(KindTypeMismatch):
            constraint_gap(ConstraintKind.GEODESIC, np.zeros(2), np.zeros(2))
        with pytest.raises(KindTypeMismatch):
            constraint_eval(ConstraintKind.GEODESIC, p, chordal_vec(p))
        with pytest.raises(KindTypeMismatch):
            constraint_eval(ConstraintKind.CHORDAL, p, p)

    @pytest.mark.parametrize("kind", POSE_KINDS)
    def test_plain_string_kinds(self, kind, rng):
        a, b = small_pose(rng), small_pose(rng)
        np.testing.assert_array_equal(constraint_gap(kind.value, a, b), constraint_gap(kind, a, b))

    def test_chordal_dimension(self, rng):
        assert constraint_gap(ConstraintKind.CHORDAL, small_pose(rng), small_pose(rng)).size == 12
        assert constraint_gap(ConstraintKind.CHORDAL, small_pose(rng, 2), small_pose(rng, 2)).size == 6


class TestEdgeUpdates:
    @given(seeds, st.sampled_from(POSE_KINDS))
    def test_z_update_symmetric(self, seed, kind):
        rng = np.random.default_rng(seed)
        a, b = small_pose(rng), small_pose(rng)
        zab, zba = z_update(kind, a, b), z_update(kind, b, a)
        if isinstance(zab, Pose):
            assert zab.allclose(zba, 1e-9)
        else:
            np.testing.assert_allclose(zab, zba, atol=1e-12)

    def test_z_update_midpoints(self, rng):
        a, b = small_pose(rng), small_pose(rng)
        np.testing.assert_allclose(
            z_update(ConstraintKind.CHORDAL, a, b), 0.5 * (chordal_vec(a) + chordal_vec(b)), atol=1e-12
        )
        np.testing.assert_allclose(
            z_update(ConstraintKind.APPROX_GEODESIC, a, b), 0.5 * (log_map(a) + log_map(b)), atol=1e-12
        )
        np.testing.assert_allclose(z_update(ConstraintKind.LINEAR, np.ones(2), np.zeros(2)), [0.5, 0.5])
        z = z_update(ConstraintKind.GEODESIC, a, b)
        np.testing.assert_allclose(z.translation, 0.5 * (a.translation + b.translation), atol=1e-12)

    def test_z_update_at_consensus(self, rng):
        a = small_pose(rng)
        for kind in POSE_KINDS:
            np.testing.assert_allclose(constraint_eval(kind, a, z_update(kind, a, a)), 0, atol=1e-12)

    def test_dual_update(self, rng):
        a, b = small_pose(rng), small_pose(rng)
        lam = rng.normal(size=6)
        out = dual_update(lam, 7.0, a, b, ConstraintKind.GEODESIC)
        np.testing.assert_allclose(out, lam + 7.0 * log_map(between(b, a)), atol=1e-10)
        np.testing.assert_array_equal(dual_update(lam, 7.0, a, a, ConstraintKind.GEODESIC), lam)

    def test_dual_antisymmetric_for_linear(self, rng):
        x, y = rng.normal(size=3), rng.normal(size=3)
        li = dual_update(np.zeros(3), 2.0, x, y, ConstraintKind.LINEAR)
        lj = dual_update(np.zeros(3), 2.0, y, x, ConstraintKind.LINEAR)
        np.testing.assert_allclose(li + lj, 0, atol=1e-15)


class TestBiasedPrior:
    def test_scalar_penalty_minimizer(self):
        # argmin_a  b*a + beta/2 a^2  =  -b/beta, matching the biased prior's optimum
        rng = np.random.default_rng(7)
        for _ in range(100):
            b = rng.normal() * 10
            beta = 10 ** rng.uniform(-2, 3)
            oracle = minimize_scalar(lambda a: b * a + 0.5 * beta * a * a, bracket=(-1, 1), tol=1e-12).x
            f = BiasedPriorFactor(ConstraintKind.LINEAR, Key(0, 0), np.zeros(1), [b], beta)
            res = optimize([f], {Key(0, 0): np.array([3.0])})
            assert res.values[Key(0, 0)][0] == pytest.approx(-b / beta, rel=1e-9, abs=1e-12)
            assert oracle == pytest.approx(-b / beta, rel=1e-6, abs=1e-9)

    def test_cost_expansion(self, rng):
        # beta ||q + lam/beta||^2 = 2 (<lam, q> + beta/2 ||q||^2) + ||lam||^2 / beta
        p, z = small_pose(rng), small_pose(rng)
        lam, beta = rng.normal(size=6), 3.5
        f = BiasedPriorFactor(ConstraintKind.GEODESIC, Key(0, 0), z, lam, beta)
        q = constraint_eval(ConstraintKind.GEODESIC, p, z)
        lhs = f.cost(p)
        rhs = 2 * (lam @ q + 0.5 * beta * q @ q) + lam @ lam / beta
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("kind", POSE_KINDS)
    @pytest.mark.parametrize("dim", [2, 3])
    def test_jacobian_finite_difference(self, kind, dim, rng):
        for _ in range(25):
            p, z0 = small_pose(rng, dim), small_pose(rng, dim)
            z = edge_value(kind, z0)
            lam = rng.normal(size=constraint_eval(kind, p, z).size)
            f = BiasedPriorFactor(kind, Key(0, 0), z, lam, 2.0)
            vals = {Key(0, 0): p}
            np.testing.assert_allclose(f.jacobians(p)[0], fd_jacobians(f, vals)[0], atol=1e-6)

    def test_linear_jacobian(self, rng):
        f = BiasedPriorFactor(ConstraintKind.LINEAR, Key(0, 0), np.zeros(3), np.ones(3), 2.0)
        np.testing.assert_array_equal(f.jacobians(rng.normal(size=3))[0], np.eye(3))
        np.testing.assert_allclose(f.error(np.ones(3)), 1.5 * np.ones(3))

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            BiasedPriorFactor(ConstraintKind.LINEAR, Key(0, 0), np.zeros(1), [0.0], 0.0)


class TestHyperparameters:
    def test_defaults(self):
        assert default_hyperparameters("geodesic") == (200.0, 1.0)
        assert default_hyperparameters("chordal") == (200.0, 1.0)
        assert default_hyperparameters("apx-geo") == (200.0, 1.0)
        assert default_hyperparameters("split") == (200.0, 1.2)
        for kind in POSE_KINDS:
            assert default_hyperparameters(kind, "range") == (2.0, 1.05)
            assert default_hyperparameters(kind, "benchmark") == (2.0, 1.05)
        with pytest.raises(ValueError):
            default_hyperparameters("geodesic", "nope")

    def test_variant_config(self):
        cfg = variant_config("split")
        assert (cfg.beta0, cfg.alpha, cfg.pose_kind) == (200.0, 1.2, ConstraintKind.SPLIT)
        assert variant_config("geodesic", beta0=5.0).beta0 == 5.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MesaConfig(beta0=0)
        with pytest.raises(ValueError):
            MesaConfig(alpha=0.5)
        with pytest.raises(ValueError):
            MesaConfig(point_kind="chordal")
        with pytest.raises(ValueError):
            MesaConfig(dual_mode="x")


def pose_pair_problem(seed=0, sigma=0.05):
    """Two robots each seeing the shared pose S through their own prior."""
    rng = np.random.default_rng(seed)
    s = Key(0, 1)
    truth = {Key(0, 0): small_pose(rng), s: small_pose(rng), Key(1, 0): small_pose(rng)}
    noise = NoiseModel.from_sigmas(np.full(6, max(sigma, 0.05)))

    def noisy(p):
        return retract(p, rng.normal(scale=sigma, size=6))

    factors = {
        0: [
            PriorFactor(Key(0, 0), truth[Key(0, 0)], noise),
            BetweenFactor(Key(0, 0), s, noisy(between(truth[Key(0, 0)], truth[s])), noise),
        ],
        1: [
            PriorFactor(Key(1, 0), truth[Key(1, 0)], noise),
            BetweenFactor(Key(1, 0), s, noisy(between(truth[Key(1, 0)], truth[s])), noise),
        ],
    }
    initial = {
        0: {Key(0, 0): truth[Key(0, 0)], s: noisy(truth[s])},
        1: {Key(1, 0): truth[Key(1, 0)], s: noisy(truth[s])},
    }
    return factors, initial, truth


class TestLocalSolve:
    def test_linear_closed_form(self, rng):
        # ours: (x-m)' W (x-m) + beta ||x - z + lam/beta||^2, stationary at
        # (W + beta I) x = W m + beta z - lam
        key = Key(0, 0)
        w = random_noise(rng, 2)
        m, z, lam, beta = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2), 4.0
        robot = RobotNode(0, [PriorFactor(key, m, w)], {key: np.zeros(2)})
        robot.edges[1] = {key: EdgeState(z, lam, beta)}
        x = local_solve(robot, MesaConfig(point_kind="linear"))[key]
        expect = np.linalg.solve(w.information + beta * np.eye(2), w.information @ m + beta * z - lam)
        np.testing.assert_allclose(x, expect, atol=1e-10)

    def test_pose_lagrangian_oracle(self):
        # half-scaled local objective: 1/2 sum ||r||^2 + <lam, q> + beta/2 ||q||^2
        factors, initial, _ = pose_pair_problem(1)
        cfg = MesaConfig(beta0=3.0)
        robots = build_team(factors, initial, cfg)
        r0 = robots[0]
        es = r0.edges[1][Key(0, 1)]
        es.lam = np.array([0.1, -0.2, 0.05, 0.3, -0.1, 0.2])
        es.z = compose(es.z, exp_map(np.array([0.05, 0, 0.02, 0.1, 0, 0])))
        x = local_solve(r0, cfg)
        base = dict(r0.values)
        keys = sorted(base)

        def objective(delta):
            vals = {k: retract(base[k], delta[6 * n : 6 * n + 6]) for n, k in enumerate(keys)}
            meas = sum(f.cost(*(vals[k] for k in f.keys)) for f in r0.factors)
            q = constraint_eval(ConstraintKind.GEODESIC, vals[Key(0, 1)], es.z)
            return 0.5 * meas + es.lam @ q + 0.5 * es.beta * q @ q

        opt = minimize(objective, np.zeros(12), method="BFGS", options={"gtol": 1e-10})
        for n, k in enumerate(keys):
            expect = retract(base[k], opt.x[6 * n : 6 * n + 6])
            assert x[k].allclose(expect, 1e-5)

    def test_large_beta_pins_to_z(self):
        factors, initial, _ = pose_pair_problem(2)
        s = Key(0, 1)
        dists = []
        for beta in (1e3, 1e4, 1e5):
            robots = build_team(factors, initial, MesaConfig(beta0=beta))
            z = robots[0].edges[1][s].z
            x = local_solve(robots[0], MesaConfig(beta0=beta))[s]
            dists.append(np.linalg.norm(log_map(between(z, x))))
        # O(1/beta): each tenfold increase shrinks the distance about tenfold
        assert dists[1] < 0.2 * dists[0]
        assert dists[2] < 0.2 * dists[1]


class TestEdgeStep:
    def test_fixed_point_at_consensus(self):
        # zero-noise, consistent copies, zero duals: nothing moves
        factors, initial, truth = pose_pair_problem(3, sigma=0.0)
        initial = {r: {k: truth[k] for k in initial[r]} for r in initial}
        cfg = MesaConfig()
        robots = build_team(factors, initial, cfg)
        mesa_edge_step(robots[0], robots[1], cfg)
        for r in robots.values():
            for k, v in r.values.items():
                assert v.allclose(truth[k], 1e-9)
            np.testing.assert_allclose(r.edges[1 - r.id][Key(0, 1)].lam, 0, atol=1e-7)

    def test_gap_decreases(self):
        factors, initial, _ = pose_pair_problem(4)
        cfg = MesaConfig()
        robots = build_team(factors, initial, cfg)
        gaps = [max_gap(robots, cfg)]
        for _ in range(15):
            mesa_edge_step(robots[0], robots[1], cfg)
            gaps.append(max_gap(robots, cfg))
        assert gaps[-1] < 1e-3 * gaps[0]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_beta_geometric(self):
        factors, initial, _ = pose_pair_problem(5)
        cfg = MesaConfig(beta0=2.0, alpha=1.5)
        robots = build_team(factors, initial, cfg)
        for _ in range(4):
            mesa_edge_step(robots[0], robots[1], cfg)
        assert robots[0].edges[1][Key(0, 1)].beta == pytest.approx(2.0 * 1.5**4)
        assert robots[1].edges[0][Key(0, 1)].beta == pytest.approx(2.0 * 1.5**4)

    def test_z_shared_by_both_sides(self):
        factors, initial, _ = pose_pair_problem(6)
        cfg = MesaConfig()
        robots = build_team(factors, initial, cfg)
        mesa_edge_step(robots[0], robots[1], cfg)
        assert robots[0].edges[1][Key(0, 1)].z is robots[1].edges[0][Key(0, 1)].z

    def test_message_log(self):
        factors, initial, _ = pose_pair_problem(6)
        cfg = MesaConfig()
        robots = build_team(factors, initial, cfg)
        log = []
        mesa_edge_step(robots[0], robots[1], cfg, message_log=log)
        (edge, mi, mj), = log
        assert edge == (0, 1)
        assert [k for k, _ in mi] == [Key(0, 1)] == [k for k, _ in mj]

    def test_init_edges(self, tiny_problem):
        cfg = MesaConfig()
        robots = build_team(tiny_problem.factors, tiny_problem.initial, cfg)
        shared = sorted(set(tiny_problem.initial[0]) & set(tiny_problem.initial[1]))
        assert robots[0].shared_keys(1) == shared == robots[1].shared_keys(0)
        for es in robots[0].edges[1].values():
            assert es.beta == cfg.beta0
            assert not es.lam.any()


class TestRun:
    # the z-referenced dual step moves by half the gap, so it needs more rounds
    @pytest.mark.parametrize("dual_mode, steps", [("theta", 50), ("z", 100)])
    def test_reaches_centralized(self, tiny_problem, dual_mode, steps):
        cfg = MesaConfig(dual_mode=dual_mode)
        robots = build_team(tiny_problem.factors, tiny_problem.initial, cfg)
        trace = run(robots, [(0, 1)] * steps, cfg, StopCriteria(gap_tol=0))
        ref = centralized(tiny_problem).residual
        assert len(trace) == steps
        assert trace.final_r2 <= 1.01 * ref

    def test_trace_bookkeeping(self, tiny_problem):
        cfg = MesaConfig()
        robots = build_team(tiny_problem.factors, tiny_problem.initial, cfg)
        seen = []
        trace = run(robots, [(0, 1)] * 5, cfg, StopCriteria(max_communications=3), on_step=seen.append)
        assert trace.status == "budget"
        assert [s.communications for s in trace] == [1, 2, 3]
        assert seen == list(trace)

    def test_converged_status(self):
        factors, initial, _ = pose_pair_problem(7)
        cfg = MesaConfig()
        robots = build_team(factors, initial, cfg)
        trace = run(robots, [(0, 1)] * 400, cfg, StopCriteria(gap_tol=1e-6))
        assert trace.status == "converged"
        assert trace[-1].max_gap < 1e-6
        assert len(trace) < 400

    def test_empty_schedule(self, tiny_problem):
        cfg = MesaConfig()
        robots = build_team(tiny_problem.factors, tiny_problem.initial, cfg)
        trace = run(robots, [], cfg)
        assert len(trace) == 0 and trace.status == "exhausted"
        assert trace.communications == 0

    def test_single_robot_equals_centralized(self):
        factors, initial, _ = pose_pair_problem(8)
        robots = {0: RobotNode(0, factors[0], dict(initial[0]))}
        init_edges(robots, MesaConfig())
        run(robots, [], MesaConfig())
        ref = optimize(factors[0], initial[0], SolverConfig())
        for k, v in ref.values.items():
            assert robots[0].values[k].allclose(v, 1e-9)

    def test_four_robots_approach_centralized(self):
        problem = generate(SyntheticConfig(robots=4, length=20, seed=2))
        cfg = MesaConfig()
        robots = build_team(problem.factors, problem.initial, cfg)
        edges = sorted({tuple(sorted((i, j))) for i, r in robots.items() for j in r.neighbors})
        trace = run(robots, edges * 120, cfg, StopCriteria(gap_tol=1e-6))
        ref = centralized(problem).residual
        assert trace.final_r2 == pytest.approx(ref, rel=1e-3)
