import numpy as np
import pytest

from glapmdp import core, policycover
from glapmdp.core import MdpError, Policy, exact_value, make_loss_sequence
from glapmdp.policycover import (
    SoftmaxPolicy,
    average_loss,
    best_policy_brute_force,
    build_cover,
    enumerate_deterministic_policies,
    softmax_to_tabular,
)


class TestBuildCover:
    def test_budget_one_is_uniform_only(self):
        cover = build_cover(3, 2, 0.5, budget=1, mode="grid", seed=0)
        assert len(cover) == 1
        assert np.all(cover.policies[0].params == 0.0)

    def test_unit_grid_one_dimensional(self):
        cover = build_cover(1, 1, 0.5, budget=100, mode="grid", seed=0)
        params = sorted(float(p.params[0, 0]) for p in cover.policies)
        assert params == [-1.0, 0.0, 1.0]
        assert cover.complete

    def test_grid_net_covers_parameter_ball(self):
        eps = 0.5
        cover = build_cover(2, 2, eps, budget=10_000, mode="grid", seed=0)
        assert cover.complete
        net = np.stack([p.params for p in cover.policies])  # (n, H, d)
        rng = np.random.default_rng(0)
        for _ in range(200):
            target = rng.normal(size=(2, 2))
            target /= np.maximum(np.linalg.norm(target, axis=1, keepdims=True), 1.0)
            radii = rng.random(2)[:, None]
            target *= radii
            dists = np.linalg.norm(net - target, axis=2).sum(axis=1)
            assert dists.min() <= eps + 1e-9

    def test_random_mode_respects_budget_and_ball(self):
        cover = build_cover(4, 3, 0.5, budget=25, mode="random", seed=5)
        assert len(cover) == 25
        assert np.all(cover.policies[0].params == 0.0)
        for pol in cover.policies:
            assert np.linalg.norm(pol.params, axis=1).max() <= 1.0 + 1e-12

    def test_random_mode_deterministic_given_seed(self):
        a = build_cover(3, 2, 0.5, budget=10, mode="random", seed=9)
        b = build_cover(3, 2, 0.5, budget=10, mode="random", seed=9)
        for pa, pb in zip(a.policies, b.policies):
            assert np.array_equal(pa.params, pb.params)

    def test_bad_arguments(self):
        with pytest.raises(MdpError):
            build_cover(2, 2, 0.5, budget=0)
        with pytest.raises(MdpError):
            build_cover(2, 2, 1.5, budget=3)
        with pytest.raises(MdpError):
            build_cover(2, 2, 0.5, budget=3, mode="mystery")


class TestSoftmaxToTabular:
    def test_zero_parameters_give_uniform(self, small_lowrank):
        sp = SoftmaxPolicy(np.zeros((3, 4)), temperature=5.0)
        pol = softmax_to_tabular(small_lowrank, sp)
        assert np.allclose(pol.tables, 0.5, atol=1e-12)

    def test_large_temperature_approaches_argmax(self, small_tabular, rng):
        w = rng.normal(size=(3, 8))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        sp = SoftmaxPolicy(w, temperature=1e4)
        logits = np.einsum("sad,hd->hsa", small_tabular.features, w)
        gaps = np.abs(np.diff(np.sort(logits, axis=2), axis=2)).min()
        assert gaps >= 0.01  # one-hot features: logits are distinct parameters
        pol = softmax_to_tabular(small_tabular, sp)
        assert pol.tables.max(axis=2).min() >= 1.0 - 1e-6

    def test_single_action(self):
        mdp = core.make_random_tabular_mdp(3, 1, 2, seed=0)
        sp = SoftmaxPolicy(np.zeros((2, 3)), temperature=2.0)
        pol = softmax_to_tabular(mdp, sp)
        assert np.all(pol.tables == 1.0)

    def test_rows_sum_to_one(self, small_lowrank, rng):
        w = rng.normal(size=(3, 4))
        w /= 2 * np.linalg.norm(w, axis=1, keepdims=True)
        pol = softmax_to_tabular(small_lowrank, SoftmaxPolicy(w, temperature=100.0))
        assert np.allclose(pol.tables.sum(axis=2), 1.0, atol=1e-12)

    def test_logit_shift_invariance(self, rng):
        # adding a constant vector to every action's features at a state only
        # shifts that state's logits, so the tables cannot change
        base = core.make_random_mdp(3, 2, 2, 3, seed=2)
        w = rng.normal(size=(2, 3))
        w /= np.linalg.norm(w, axis=1, keepdims=True) * 2
        shift = rng.normal(size=3)
        feats = base.features.copy()
        feats[1] += shift  # same shift for all actions of state 1
        shifted = core.LinearMDP(3, 2, 2, 3, feats, base.measures, base.initial_state)
        sp = SoftmaxPolicy(w, temperature=3.0)
        a = softmax_to_tabular(base, sp)
        b = softmax_to_tabular(shifted, sp)
        assert np.allclose(a.tables, b.tables, atol=1e-12)

    def test_parameter_ball_enforced(self):
        with pytest.raises(MdpError):
            SoftmaxPolicy(np.full((2, 2), 3.0), temperature=1.0)


class TestAverageLoss:
    def test_single_episode_identity(self, rng):
        theta = rng.normal(size=(1, 2, 3))
        assert np.array_equal(average_loss(core.LossSequence(theta)), theta[0])

    def test_alternating_cancels(self):
        v = np.ones((2, 3))
        theta = np.stack([v, -v, v, -v])
        assert np.allclose(average_loss(core.LossSequence(theta)), 0.0)

    def test_matches_direct_mean(self, rng):
        theta = rng.normal(size=(7, 3, 4))
        assert np.allclose(average_loss(core.LossSequence(theta)),
                           theta.mean(axis=0), atol=1e-15)


class TestBestPolicyBruteForce:
    def test_singleton_set(self, small_lowrank, rng):
        pol = core.random_policy(4, 2, 3, rng)
        losses = make_loss_sequence(rng.normal(size=(5, 3, 4)), small_lowrank)
        idx, val = best_policy_brute_force(small_lowrank, losses, [pol])
        assert idx == 0
        expected = sum(exact_value(small_lowrank, pol, losses, k) for k in range(5))
        assert val == pytest.approx(expected, abs=1e-9)

    def test_dominating_policy_wins(self):
        # single state, two actions, action 1 strictly cheaper each episode
        P = np.ones((2, 1, 2, 1))
        mdp = core.make_tabular_mdp(P, initial_state=0)
        theta = np.tile(np.array([[0.9, 0.1], [0.8, 0.2]])[None], (4, 1, 1))
        losses = core.LossSequence(theta)
        pols = enumerate_deterministic_policies(1, 2, 2)
        idx, _ = best_policy_brute_force(mdp, losses, pols)
        tables = pols[idx].tables
        assert np.all(tables[:, 0, 1] == 1.0)

    def test_agrees_with_average_mdp_argmin(self, rng):
        # averaged-loss reduction over every deterministic policy
        mdp = core.make_random_tabular_mdp(3, 2, 2, seed=8)
        theta = rng.normal(size=(20, 2, 6))
        losses = make_loss_sequence(theta, mdp)
        pols = enumerate_deterministic_policies(3, 2, 2)
        idx_sum, _ = best_policy_brute_force(mdp, losses, pols)
        avg = core.LossSequence(average_loss(losses)[None])
        idx_avg, _ = best_policy_brute_force(mdp, avg, pols)
        assert idx_sum == idx_avg

    def test_empty_set_rejected(self, small_lowrank):
        with pytest.raises(MdpError):
            best_policy_brute_force(small_lowrank, core.LossSequence(np.zeros((1, 3, 4))), [])


class TestAverageMdpIdentity:
    @pytest.mark.parametrize("seed", range(5))
    def test_summed_values_equal_scaled_average(self, seed):
        rng = np.random.default_rng(seed)
        mdp = core.make_random_mdp(3, 2, 2, 3, seed=seed)
        pol = core.random_policy(3, 2, 2, rng)
        losses = make_loss_sequence(rng.normal(size=(12, 2, 3)), mdp)
        total = sum(exact_value(mdp, pol, losses, k) for k in range(12))
        avg = core.LossSequence(average_loss(losses)[None])
        assert total == pytest.approx(12 * exact_value(mdp, pol, avg, 0), abs=1e-8)


class TestEnumerateDeterministic:
    def test_count(self):
        pols = enumerate_deterministic_policies(3, 2, 2)
        assert len(pols) == 2 ** 6
        keys = {p.tables.tobytes() for p in pols}
        assert len(keys) == 2 ** 6

    def test_limit_guard(self):
        with pytest.raises(MdpError):
            enumerate_deterministic_policies(10, 10, 10, limit=1000)


class TestCoverSerialization:
    def test_round_trip(self, tmp_path):
        cover = build_cover(3, 2, 0.4, budget=8, mode="random", seed=4,
                            temperature=17.5)
        path = tmp_path / "cover.json"
        policycover.save_cover(cover, path)
        loaded = policycover.load_cover(path)
        assert loaded.mode == cover.mode
        assert loaded.seed == cover.seed
        assert loaded.budget == cover.budget
        assert loaded.eps_prime == cover.eps_prime
        assert loaded.temperature == 17.5
        for pa, pb in zip(cover.policies, loaded.policies):
            assert np.array_equal(pa.params, pb.params)

    def test_tabular_policies_round_trip(self, tmp_path, rng):
        pol = core.random_policy(2, 2, 2, rng)
        cover = policycover.PolicyCover((pol,), 0.5, "manual", 0, 1, 1.0)
        path = tmp_path / "cover.json"
        policycover.save_cover(cover, path)
        loaded = policycover.load_cover(path)
        assert np.array_equal(loaded.policies[0].tables, pol.tables)
