import numpy as np
import pytest

from mags.certs import cert_ensemble_identity
from mags.data import make_splits, split_patches, synth_dataset
from mags.errors import ConfigError
from mags.faults import FaultModel, active_set, realize_base, sample_device_faults
from mags.inference import init_split_model
from mags.metrics import (count_comm, ensemble_decomposition,
                          estimate_risk, evaluate_policies, risk_bound_report,
                          select)
from mags.nn import Mlp
from mags.rng import stream
from mags.topology import build_graph
from mags.training import TrainConfig, fit


def uniform_model(graph, patch_dim, classes, seed=0):
    model = init_split_model(graph, [patch_dim] * graph.device_count, classes,
                             stream(seed, "init"))
    for k in model.heads:
        model.heads[k] = Mlp([(np.zeros_like(w), np.zeros_like(b))
                              for w, b in model.heads[k].layers])
    return model


class TestSelect:
    def preds(self, mapping, classes=4):
        out = {}
        for k, cls in mapping.items():
            p = np.full(classes, 0.01)
            p[cls] = 1 - 0.01 * (classes - 1)
            out[k] = p
        return out

    def test_all_correct_makes_every_policy_correct(self):
        preds = self.preds({1: 2, 2: 2, 3: 2})
        rng = stream(0, "select")
        for policy in ("active_rand", "active_best", "active_worst", "any_rand"):
            _, ok = select(policy, preds, {1, 2, 3}, 3, 2, 4, rng)
            assert ok

    def test_one_right_one_wrong_oracles(self):
        preds = self.preds({1: 2, 2: 0})
        rng = stream(1, "select")
        _, best = select("active_best", preds, {1, 2}, 2, 2, 4, rng)
        _, worst = select("active_worst", preds, {1, 2}, 2, 2, 4, rng)
        assert best and not worst

    def test_active_rand_is_a_fair_coin_here(self):
        preds = self.preds({1: 2, 2: 0})
        rng = stream(2, "select")
        draws = 100000
        hits = sum(select("active_rand", preds, {1, 2}, 2, 2, 4, rng)[1]
                   for _ in range(draws))
        band = 3 * np.sqrt(0.25 / draws)
        assert abs(hits / draws - 0.5) <= band

    def test_single_aggregator_oracles_coincide_with_rand(self):
        preds = self.preds({1: 3})
        rng = stream(3, "select")
        for policy in ("active_rand", "active_best", "active_worst"):
            pred, ok = select(policy, preds, {1}, 4, 3, 4, rng)
            assert ok and pred == 3
            pred, ok = select(policy, preds, {1}, 4, 0, 4, rng)
            assert not ok

    def test_empty_active_set_is_uniform_guess(self):
        rng = stream(4, "select")
        draws = 40000
        hits = sum(select("active_rand", {}, set(), 4, 1, 4, rng)[1]
                   for _ in range(draws))
        band = 3 * np.sqrt(0.25 * 0.75 / draws)
        assert abs(hits / draws - 0.25) <= band

    def test_any_rand_falls_back_on_inactive_pick(self):
        # only device 1 is an active aggregator among 8 devices
        preds = self.preds({1: 2})
        rng = stream(5, "select")
        draws = 40000
        hits = sum(select("any_rand", preds, {1}, 8, 2, 4, rng)[1]
                   for _ in range(draws))
        # correct w.p. 1/8 (informed) + 7/8 * 1/4 (guess)
        expected = 1 / 8 + (7 / 8) * (1 / 4)
        band = 3 * np.sqrt(expected * (1 - expected) / draws)
        assert abs(hits / draws - expected) <= band

    def test_conditional_selection_frequency_through_samplers(self):
        # given a nonempty active set, each aggregator is picked w.p. 1/K
        graph = build_graph("complete", 16, 4)
        rng_fault = stream(6, "fault")
        rng_sel = stream(6, "select")
        counts = np.zeros(5)
        preds = self.preds({1: 0, 2: 1, 3: 2, 4: 3})
        conditioned = 0
        for _ in range(20000):
            r = sample_device_faults(graph, 0.3, rng_fault)
            act = active_set(r, graph.aggregators)
            if not act:
                continue
            pred, _ = select("active_rand", preds, act, 16, 9, 4, rng_sel)
            counts[pred + 1] += 1  # class index identifies the aggregator
            conditioned += 1
        freq = counts[1:] / conditioned
        band = 3 * np.sqrt(0.25 * 0.75 / conditioned)
        assert np.all(np.abs(freq - 0.25) <= band)

    def test_unknown_policy_rejected(self):
        with pytest.raises(ConfigError):
            select("mode", {}, set(), 4, 0, 4, stream(0, "select"))


class TestCountComm:
    def test_single_aggregator_complete_no_faults(self):
        graph = build_graph("complete", 16, 1)
        count = count_comm([realize_base(graph)], graph.aggregators)
        assert count.total == 15 and count.aggregation == 15 and count.gossip == []

    def test_all_aggregators_with_gossip_rounds(self):
        graph = build_graph("complete", 16, 16)
        r = realize_base(graph)
        count = count_comm([r, r, r], graph.aggregators)
        assert count.aggregation == 240
        assert count.gossip == [240, 240]
        assert count.total == 720

    def test_dead_aggregator_receives_nothing(self):
        graph = build_graph("complete", 4, 4)
        r = realize_base(graph)
        r.alive[2] = False
        r.edge_alive[2, :] = False
        r.edge_alive[:, 2] = False
        count = count_comm([r], graph.aggregators)
        # three alive aggregators with two alive in-neighbors each
        assert count.total == 6

    def test_breakdown_sums_to_total(self):
        graph = build_graph("grid", 16, 4)
        rng = stream(7, "fault")
        from mags.faults import sample_comm_faults
        rs = [sample_comm_faults(graph, 0.3, rng) for _ in range(3)]
        count = count_comm(rs, graph.aggregators)
        assert count.total == count.aggregation + sum(count.gossip)


class TestEnsembleDecomposition:
    def test_hand_computed_two_member_case(self):
        members = np.log(np.array([[0.8, 0.2], [0.2, 0.8]]))
        y = np.array([1.0, 0.0])
        ens_loss, mean_loss, diversity = ensemble_decomposition(members, y)
        assert ens_loss == pytest.approx(0.69315, abs=1e-5)      # ln 2
        assert mean_loss == pytest.approx(0.91629, abs=1e-5)
        assert diversity == pytest.approx(0.22314, abs=1e-5)     # -ln 0.8
        assert abs(ens_loss - (mean_loss - diversity)) < 1e-12

    def test_identical_members_have_zero_diversity(self):
        from mags.nn import log_softmax
        lp = log_softmax(np.array([0.3, -1.0, 0.5]))
        ens_loss, mean_loss, diversity = ensemble_decomposition(
            np.stack([lp, lp, lp]), np.array([0.0, 1.0, 0.0]))
        assert diversity == pytest.approx(0.0, abs=1e-15)
        assert ens_loss == pytest.approx(mean_loss, abs=1e-12)

    def test_identity_and_nonnegativity_over_random_members(self):
        from mags.nn import log_softmax
        rng = np.random.default_rng(10)
        for _ in range(500):
            k = rng.choice([2, 4, 16])
            lps = log_softmax(2 * rng.standard_normal((k, 10)))
            y = np.zeros(10)
            y[rng.integers(10)] = 1.0
            ens_loss, mean_loss, diversity = ensemble_decomposition(lps, y)
            assert diversity >= -1e-12
            assert abs(ens_loss - (mean_loss - diversity)) < 1e-9

    def test_broken_arithmetic_combiner_fails_certificate(self):
        # mutation check: averaging probabilities instead of log-probabilities
        # must violate the decomposition identity
        def arithmetic(lps):
            return np.log(np.exp(lps).mean(axis=0))

        good = cert_ensemble_identity(seed=0, sets=200)
        bad = cert_ensemble_identity(seed=0, sets=200, combine=arithmetic)
        assert good.passed and not bad.passed


@pytest.fixture(scope="module")
def trained_small():
    ds = synth_dataset(1200, 4, 2, seed=5, noise=0.2)
    part = split_patches(ds.feature_count, 2)
    graph = build_graph("complete", 4, 4)
    tr, va = make_splits(ds, 1)
    ckpt = fit(TrainConfig(epochs=4, seed=1, dropout="cd", dropout_rate=0.3),
               tr, va, part, graph)
    return ckpt.model, ds, part, graph


class TestEvaluatePolicies:
    def test_uniform_heads_score_one_over_classes(self):
        graph = build_graph("complete", 4, 4)
        model = uniform_model(graph, 196, 10)
        ds = synth_dataset(800, 10, 2, seed=6, noise=0.3)
        part = split_patches(784, 2)
        res = evaluate_policies(model, ds.features, ds.labels, part, graph,
                                FaultModel("communication", 0.3),
                                ["active_rand", "active_best", "active_worst", "any_rand"],
                                0, seed=1)
        band = 3 * np.sqrt(0.1 * 0.9 / 800)
        for policy, acc in res.accuracy.items():
            assert abs(acc - 0.1) <= band, policy

    def test_trained_model_is_perfect_without_faults(self, trained_small):
        model, ds, part, graph = trained_small
        res = evaluate_policies(model, ds.features[-300:], ds.labels[-300:], part,
                                graph, FaultModel("none"), ["active_rand"], 0, seed=2)
        assert res.accuracy["active_rand"] == pytest.approx(1.0, abs=0.02)

    def test_oracle_ordering_holds_per_cell(self, trained_small):
        model, ds, part, graph = trained_small
        for kind in ("communication", "device"):
            for rate in (0.3, 0.6):
                res = evaluate_policies(
                    model, ds.features[-400:], ds.labels[-400:], part, graph,
                    FaultModel(kind, rate),
                    ["active_rand", "active_best", "active_worst", "any_rand"],
                    0, seed=3)
                a = res.accuracy
                assert a["active_best"] >= a["active_rand"] >= a["active_worst"]
                assert a["any_rand"] <= a["active_rand"]

    def test_gossip_reuses_fault_draws(self, trained_small):
        # the fault stream must not depend on the number of gossip rounds
        model, ds, part, graph = trained_small
        kwargs = dict(partition=part, graph=graph,
                      fault_model=FaultModel("communication", 0.4),
                      policies=["active_rand"], seed=4)
        r0 = evaluate_policies(model, ds.features[-200:], ds.labels[-200:],
                               gossip_rounds=0, **kwargs)
        r4 = evaluate_policies(model, ds.features[-200:], ds.labels[-200:],
                               gossip_rounds=4, **kwargs)
        assert r0.comm_mean == pytest.approx(r4.comm_mean / 5.0)

    def test_comm_mean_matches_expectation(self, trained_small):
        model, ds, part, graph = trained_small
        res = evaluate_policies(model, ds.features[-600:], ds.labels[-600:], part,
                                graph, FaultModel("communication", 0.3),
                                ["active_rand"], 0, seed=5)
        # 12 directed non-self edges alive w.p. 0.7
        assert abs(res.comm_mean - 12 * 0.7) < 1.5

    def test_rejects_bad_arguments(self, trained_small):
        model, ds, part, graph = trained_small
        with pytest.raises(ConfigError):
            evaluate_policies(model, ds.features, ds.labels, part, graph,
                              FaultModel("none"), ["oracle"], 0, seed=0)
        with pytest.raises(ConfigError):
            evaluate_policies(model, ds.features, ds.labels, part, graph,
                              FaultModel("none"), ["active_rand"], 0, seed=0, trials=0)


class TestEnsembleBenefit:
    def test_post_gossip_log_loss_never_exceeds_mean_member_loss(self, trained_small):
        # on a faultless complete graph one round reaches the exact geometric
        # mean, so the decomposition makes the inequality hold per sample
        model, ds, part, graph = trained_small
        from mags.data import client_views, one_hot
        from mags.inference import mags_infer
        views = [v[-300:] for v in client_views(ds.features, part)]
        labels = ds.labels[-300:]
        y = one_hot(labels, ds.class_count)
        r0 = mags_infer(model, views, graph, FaultModel("none"), 0, stream(20, "fault"))
        r1 = mags_infer(model, views, graph, FaultModel("none"), 1, stream(20, "fault"))
        member_nll = np.mean([-(y * r0.log_probs[k]).sum(axis=1)
                              for k in graph.aggregators], axis=0)
        for k in graph.aggregators:
            ens_nll = -(y * r1.log_probs[k]).sum(axis=1)
            assert np.all(ens_nll <= member_nll + 1e-12)


class TestEstimateRisk:
    def test_aggregates_over_seeds(self, trained_small):
        model, ds, part, graph = trained_small
        est = estimate_risk(model, ds.features[-300:], ds.labels[-300:], part, graph,
                            FaultModel("communication", 0.5), "active_rand", 2,
                            trials=1, seeds=[1, 2, 3])
        assert 0.0 <= est.mean <= 1.0
        assert est.std >= 0.0
        assert len(est.per_seed) == 3
        assert est.fault_kind == "communication"

    def test_single_seed_gives_zero_std(self, trained_small):
        model, ds, part, graph = trained_small
        est = estimate_risk(model, ds.features[-100:], ds.labels[-100:], part, graph,
                            FaultModel("none"), "active_rand", 0, trials=1, seeds=[7])
        assert est.std == 0.0


class TestRiskBoundReport:
    def test_rate_zero_bound_equals_clean_risk(self, trained_small):
        model, ds, part, graph = trained_small
        rep = risk_bound_report(model, ds.features[-200:], ds.labels[-200:], part,
                                graph, rate=0.0, seed=1)
        assert rep.bound == pytest.approx(rep.clean_risk)
        assert rep.passed

    def test_rate_one_bound_is_uniform_risk(self, trained_small):
        model, ds, part, graph = trained_small
        rep = risk_bound_report(model, ds.features[-200:], ds.labels[-200:], part,
                                graph, rate=1.0, seed=1)
        assert rep.bound == pytest.approx(1.0 - 1.0 / 4)
        assert rep.passed

    def test_moderate_rate_respects_bound(self, trained_small):
        model, ds, part, graph = trained_small
        rep = risk_bound_report(model, ds.features[-400:], ds.labels[-400:], part,
                                graph, rate=0.3, seed=2)
        assert rep.aggregator_count == 4
        assert rep.passed
