import numpy as np
import pytest

from regimenlab.baselines import (
    BINARY_GRID,
    FIVE_LEVEL_GRID,
    DoseGrid,
    FqiDivergenceError,
    fitted_q_iteration,
    grid_for_setup,
    preset_policy,
    q_backward,
    snap_dose,
)
from regimenlab.cohortsim import ObservedCohort, ObservedPatient, SimSetup
from regimenlab.rng import substream

BIN_SETUP = SimSetup(n=8, p=10, horizon_mode="two_steps", missing_mode="none",
                     action_space="binary", policy_mode="random", seed=1)


def toy_cohort(e_by_patient, z_by_patient, y_by_patient, setup=BIN_SETUP):
    patients = [
        ObservedPatient(pid=i, x=np.zeros(setup.p), e=np.asarray(e, dtype=float),
                        z=np.atleast_2d(np.asarray(z, dtype=float)), y=int(y))
        for i, (e, z, y) in enumerate(zip(e_by_patient, z_by_patient, y_by_patient))
    ]
    return ObservedCohort(setup=setup, patients=patients)


class TestSnapDose:
    def test_binary_threshold(self):
        grid = DoseGrid(BINARY_GRID)
        assert snap_dose(30.0, grid) == 50.0
        assert snap_dose(0.0, grid) == 0.0
        assert snap_dose(25.0, grid) == 0.0  # strict threshold

    def test_five_level_thresholds(self):
        grid = DoseGrid(FIVE_LEVEL_GRID)
        assert snap_dose(40.0, grid) == 50.0
        assert snap_dose(12.5, grid) == 0.0
        assert snap_dose(12.6, grid) == 25.0
        assert snap_dose(99.0, grid) == 100.0

    def test_idempotent_and_on_grid(self):
        rng = substream(1, "snap")
        for grid in (DoseGrid(BINARY_GRID), DoseGrid(FIVE_LEVEL_GRID)):
            for _ in range(200):
                snapped = snap_dose(rng.uniform(-5, 130), grid)
                assert snapped in grid.levels
                assert snap_dose(snapped, grid) == snapped

    def test_grid_for_setup(self):
        assert grid_for_setup(BIN_SETUP).levels == BINARY_GRID
        cont = SimSetup(n=8, p=10, horizon_mode="two_steps", missing_mode="none",
                        action_space="continuous", policy_mode="random", seed=1)
        assert grid_for_setup(cont).levels == FIVE_LEVEL_GRID


class TestPresets:
    def test_inaction_always_zero(self):
        fn = preset_policy("inaction", BIN_SETUP)
        rng = substream(2, "preset")
        doses = [fn(np.array([75.0, 40.0]), np.zeros((1, 2)), 2, rng)[0] for _ in range(5)]
        assert doses == [0.0] * 5

    def test_full_dosing_by_space(self):
        cont = SimSetup(n=8, p=10, horizon_mode="two_steps", missing_mode="none",
                        action_space="continuous", policy_mode="random", seed=1)
        rng = substream(3, "preset")
        assert preset_policy("full_dosing", cont)(np.array([75.0]), np.zeros((1, 1)), 1, rng)[0] == 100.0
        assert preset_policy("full_dosing", BIN_SETUP)(np.array([75.0]), np.zeros((1, 1)), 1, rng)[0] == 50.0

    def test_random_respects_space(self):
        rng = substream(4, "preset")
        fn = preset_policy("random", BIN_SETUP)
        draws = {fn(np.array([75.0]), np.zeros((1, 1)), 1, rng)[0] for _ in range(50)}
        assert draws == {0.0, 50.0}

    def test_expert_uses_exact_table_means(self):
        cont_setup = SimSetup(n=8, p=10, horizon_mode="two_steps", missing_mode="none",
                              action_space="continuous", policy_mode="informed", seed=1)
        fn = preset_policy("expert", cont_setup, policy_type="aggressive")
        rng = substream(5, "preset")
        # realized burden 65 activates the first five features: 10+10+20+20+20
        e_hist = np.array([75.0, 65.0])  # slot 0 is the pre-treatment state
        z_hist = np.zeros((1, 2))
        assert fn(e_hist, z_hist, 2, rng)[0] == pytest.approx(80.0)

    def test_expert_requires_type(self):
        with pytest.raises(ValueError):
            preset_policy("expert", BIN_SETUP)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset_policy("nonsense", BIN_SETUP)


def dominance_cohort():
    """Two-step binary cohort where dosing 50 at each step strictly wins."""
    e_rows, z_rows, y_rows = [], [], []
    for z1 in (0.0, 50.0):
        for z2 in (0.0, 50.0):
            for copy in range(8):
                n50 = (z1 == 50.0) + (z2 == 50.0)
                if n50 == 2:
                    y = 0
                elif n50 == 0:
                    y = 1
                else:
                    y = copy % 2  # half good, half bad
                e_rows.append([50.0, 50.0])
                z_rows.append([z1, z2])
                y_rows.append(y)
    setup = SimSetup(n=len(y_rows), p=10, horizon_mode="two_steps", missing_mode="none",
                     action_space="binary", policy_mode="random", seed=1)
    return toy_cohort(e_rows, z_rows, y_rows, setup)


class TestQBackward:
    def test_dominant_action_learned(self):
        cohort = dominance_cohort()
        policy = q_backward(cohort, DoseGrid(BINARY_GRID))
        rng = substream(6, "qb")
        for pid in range(3):
            fn = policy.dose_fn_for(cohort.patients[pid].x)
            e_hist = np.array([60.0])
            z_hist = np.zeros((1, 1))
            assert fn(e_hist, z_hist, 1, rng)[0] == 50.0
            e_hist2 = np.array([60.0, 50.0])
            for z_prev in (0.0, 50.0):
                z_hist2 = np.array([[0.0, z_prev]])
                assert fn(e_hist2, z_hist2, 2, rng)[0] == 50.0

    def test_single_stage_horizon(self):
        # one patient observed for a single step truncates the recursion to t=1
        e_rows = [[50.0], [40.0, 45.0], [60.0, 55.0]]
        z_rows = [[0.0], [50.0, 0.0], [0.0, 50.0]]
        cohort = toy_cohort(e_rows, z_rows, [1, 0, 1],
                            SimSetup(n=3, p=10, horizon_mode="two_steps",
                                     missing_mode="variable", action_space="binary",
                                     policy_mode="random", seed=1))
        policy = q_backward(cohort, DoseGrid(BINARY_GRID))
        assert len(policy.weights) == 1

    def test_deterministic(self):
        cohort = dominance_cohort()
        p1 = q_backward(cohort, DoseGrid(BINARY_GRID))
        p2 = q_backward(cohort, DoseGrid(BINARY_GRID))
        for w1, w2 in zip(p1.weights, p2.weights):
            np.testing.assert_array_equal(w1, w2)

    def test_beyond_horizon_reuses_last_stage(self):
        cohort = dominance_cohort()
        policy = q_backward(cohort, DoseGrid(BINARY_GRID))
        rng = substream(7, "qb")
        fn = policy.dose_fn_for(np.zeros(10))
        e_hist = np.array([60.0, 50.0, 40.0, 45.0])
        z_hist = np.array([[0.0, 50.0, 50.0, 50.0]])
        assert fn(e_hist, z_hist, 4, rng)[0] in (0.0, 50.0)  # stage-2 model reused

    def test_empty_dataset_rejected(self):
        setup = SimSetup(n=1, p=10, horizon_mode="two_steps", missing_mode="none",
                         action_space="binary", policy_mode="random", seed=1)
        with pytest.raises(ValueError):
            q_backward(ObservedCohort(setup=setup, patients=[]), DoseGrid(BINARY_GRID))


def flat_reward_cohort(T=6, n=10):
    """Constant burden 50 and constant dose 50 make every naive reward zero."""
    e_rows = [[50.0] * T] * n
    z_rows = [[50.0] * T] * n
    setup = SimSetup(n=n, p=10, horizon_mode="ten_to_fifteen", missing_mode="none",
                     action_space="binary", policy_mode="random", seed=1)
    return toy_cohort(e_rows, z_rows, [0] * n, setup)


class TestFittedQIteration:
    def test_zero_rewards_fixed_point(self):
        policy = fitted_q_iteration(flat_reward_cohort(), DoseGrid(BINARY_GRID), "naive",
                                    iterations=25)
        np.testing.assert_allclose(policy.weights[0], 0.0, atol=1e-9)
        assert max(policy.target_scale_path) == 0.0

    def test_bandit_best_arm_under_naive_reward(self):
        # naive reward is (50 - dose)/4 when burden is flat: dose 0 wins
        rng = substream(8, "fqi")
        e_rows, z_rows = [], []
        for i in range(40):
            e_rows.append([50.0, 50.0, 50.0])
            z_rows.append(list(rng.choice([0.0, 50.0], size=3)))
        setup = SimSetup(n=40, p=10, horizon_mode="ten_to_fifteen", missing_mode="none",
                         action_space="binary", policy_mode="random", seed=1)
        cohort = toy_cohort(e_rows, z_rows, [0] * 40, setup)
        policy = fitted_q_iteration(cohort, DoseGrid(BINARY_GRID), "naive")
        fn = policy.dose_fn_for(np.zeros(10))
        assert fn(np.array([50.0, 50.0]), np.array([[0.0, 0.0]]), 2,
                  substream(9, "fqi"))[0] == 0.0
        assert fn(np.array([50.0, 50.0]), np.array([[0.0, 50.0]]), 2,
                  substream(9, "fqi"))[0] == 0.0

    def test_targets_respect_contraction_bound(self):
        rng = substream(10, "fqi")
        e_rows = [list(rng.uniform(10, 90, 8)) for _ in range(30)]
        z_rows = [list(rng.choice([0.0, 25.0, 50.0, 75.0, 100.0], size=8)) for _ in range(30)]
        setup = SimSetup(n=30, p=10, horizon_mode="ten_to_fifteen", missing_mode="none",
                         action_space="continuous", policy_mode="random", seed=1)
        cohort = toy_cohort(e_rows, z_rows, list(rng.integers(0, 2, 30)), setup)
        discount = 0.9
        policy = fitted_q_iteration(cohort, DoseGrid(FIVE_LEVEL_GRID), "naive",
                                    iterations=40, discount=discount)
        r_max = 100.0 + 50.0 / 4.0  # |e_prev - e_t| + |50 - z|/4 bound for this data
        bound = r_max / (1.0 - discount)
        assert max(policy.target_scale_path) <= bound

    def test_divergence_guard_trips(self):
        rng = substream(11, "fqi")
        e_rows = [list(rng.uniform(10, 90, 8)) for _ in range(30)]
        z_rows = [list(rng.choice([0.0, 50.0], size=8)) for _ in range(30)]
        setup = SimSetup(n=30, p=10, horizon_mode="ten_to_fifteen", missing_mode="none",
                         action_space="binary", policy_mode="random", seed=1)
        cohort = toy_cohort(e_rows, z_rows, [0] * 30, setup)
        with pytest.raises(FqiDivergenceError):
            fitted_q_iteration(cohort, DoseGrid(BINARY_GRID), "naive",
                               iterations=500, discount=1.6)

    def test_deterministic(self):
        cohort = flat_reward_cohort()
        p1 = fitted_q_iteration(cohort, DoseGrid(BINARY_GRID), "insightful")
        p2 = fitted_q_iteration(cohort, DoseGrid(BINARY_GRID), "insightful")
        np.testing.assert_array_equal(p1.weights[0], p2.weights[0])
