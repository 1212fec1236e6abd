import numpy as np
import pytest

from masafl.data import gen_synthetic, sample_proxy
from masafl.errors import ConfigError
from masafl.masa import (
    MasaConfig,
    filter_scores,
    fuse,
    masa_aggregate,
    mds,
    unlearn_and_accumulate,
)
from masafl.nn import ModelState, flatten, init_model, param_count, unflatten, vec_mean


def mds_oracle(values):
    """Brute-force recomputation with explicit loops."""
    values = list(map(float, values))
    n = len(values)
    median = sorted(values)[(n - 1) // 2]
    mean = sum(values) / n
    sigma = (sum((v - mean) ** 2 for v in values) / n) ** 0.5
    if sigma == 0.0:
        return [0.0] * n, median, 0.0
    return [(v - median) / sigma for v in values], median, sigma


@pytest.fixture(scope="module")
def proxy():
    ds = gen_synthetic(8, 200, (10, 10), seed=0)
    return sample_proxy(ds, 0.01, seed=0)


@pytest.fixture(scope="module")
def model():
    return init_model((100, 64, 8), seed=0)


class TestMasaConfig:
    def test_defaults(self):
        cfg = MasaConfig()
        assert cfg.fusion_degree == 0.7
        assert cfg.filter_radius == 1.0
        assert cfg.unlearn_epochs == 5
        assert cfg.unlearn_rate == 0.001
        assert cfg.unlearn_momentum == 0.9

    def test_low_fusion_degree_rejected(self):
        with pytest.raises(ConfigError, match=r"\(0.5, 1\]"):
            MasaConfig(fusion_degree=0.4)

    def test_fusion_degree_one_allowed(self):
        assert MasaConfig(fusion_degree=1.0).fusion_degree == 1.0

    def test_other_constraints(self):
        with pytest.raises(ConfigError):
            MasaConfig(filter_radius=0.0)
        with pytest.raises(ConfigError):
            MasaConfig(unlearn_epochs=0)
        with pytest.raises(ConfigError):
            MasaConfig(unlearn_momentum=1.0)


class TestFuse:
    def test_degree_one_disables_fusion(self, model):
        d = param_count(model.shape_signature)
        rng = np.random.default_rng(0)
        delta_i, delta_bar = rng.normal(size=d), rng.normal(size=d)
        fused = fuse(model, delta_i, delta_bar, 1.0)
        np.testing.assert_array_equal(flatten(fused), flatten(model) + delta_i)

    def test_identical_updates_make_degree_irrelevant(self, model):
        d = param_count(model.shape_signature)
        delta = np.random.default_rng(1).normal(size=d)
        for lam in (0.6, 0.7, 0.9, 1.0):
            fused = fuse(model, delta, delta, lam)
            np.testing.assert_allclose(flatten(fused), flatten(model) + delta, rtol=1e-12)

    def test_hand_computed_blend(self):
        zero = ModelState([(np.zeros((1, 1)), np.zeros(1))])
        fused = fuse(zero, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.7)
        np.testing.assert_allclose(flatten(fused), [0.7, 0.3], atol=1e-12)

    def test_degree_out_of_range_rejected(self, model):
        d = param_count(model.shape_signature)
        with pytest.raises(ConfigError):
            fuse(model, np.zeros(d), np.zeros(d), 0.5)

    def test_shape_mismatch_rejected(self, model):
        with pytest.raises(ConfigError):
            fuse(model, np.zeros(3), np.zeros(3), 0.7)


class TestUnlearn:
    def test_loss_count_is_epochs_times_batches(self, model, proxy):
        cfg = MasaConfig(batch_size=4)  # 16 proxy examples -> 4 batches
        trace = unlearn_and_accumulate(model, proxy, cfg, seed=0)
        assert len(trace.per_batch_losses) == cfg.unlearn_epochs * 4
        assert trace.accumulated_loss == pytest.approx(sum(trace.per_batch_losses))

    def test_vanishing_rate_freezes_the_loss(self, model, proxy):
        # the eta -> 0 limit: every recorded loss equals the static loss
        cfg = MasaConfig(unlearn_rate=1e-300)
        trace = unlearn_and_accumulate(model, proxy, cfg, seed=0)
        assert len(set(round(l, 9) for l in trace.per_batch_losses)) == 1
        assert trace.accumulated_loss == pytest.approx(5 * trace.per_batch_losses[0])

    def test_caller_model_not_mutated(self, model, proxy):
        before = flatten(model).copy()
        unlearn_and_accumulate(model, proxy, MasaConfig(), seed=1)
        assert np.array_equal(flatten(model), before)

    def test_repeat_call_identical(self, model, proxy):
        a = unlearn_and_accumulate(model, proxy, MasaConfig(), seed=2, client_id=3)
        b = unlearn_and_accumulate(model, proxy, MasaConfig(), seed=2, client_id=3)
        assert a.per_batch_losses == b.per_batch_losses

    def test_ascent_does_not_decrease_accumulated_loss(self, model, proxy):
        frozen = unlearn_and_accumulate(model, proxy, MasaConfig(unlearn_rate=1e-300), seed=3)
        moving = unlearn_and_accumulate(model, proxy, MasaConfig(unlearn_rate=0.05), seed=3)
        assert moving.accumulated_loss >= frozen.accumulated_loss - 1e-9

    def test_huge_losses_capped_and_flagged(self, proxy):
        # bias drives a wrong class to +1e4: every batch hits the cap
        layers = [(np.zeros((8, 100)), np.zeros(8))]
        layers[0][1][3] = 1e4
        bad = ModelState(layers)
        bad.layers[0] = (bad.layers[0][0], bad.layers[0][1])
        cfg = MasaConfig()
        trace = unlearn_and_accumulate(bad, proxy, cfg, seed=0)
        assert trace.cap_events > 0
        assert all(l <= cfg.loss_cap for l in trace.per_batch_losses)

    def test_empty_proxy_rejected(self, model, proxy):
        with pytest.raises(ValueError):
            unlearn_and_accumulate(model, proxy.subset(np.array([], dtype=np.int64)), MasaConfig(), seed=0)


class TestSeparationSignal:
    def test_backdoored_model_accumulates_more_loss_than_clean_twin(self):
        # same shard, same starting model: the poisoned twin's accumulated
        # unlearning loss should exceed the clean twin's in >= 95% of trials
        from masafl.attacks import TrainConfig, benign_local_train, malicious_local_train
        from masafl.data import PoisonSpec, partition_iid, poison_shard
        from masafl.nn import flatten, init_model, unflatten

        train = gen_synthetic(8, 200, (10, 10), seed=0)
        proxy = sample_proxy(train, 0.01, seed=0)
        base = init_model((100, 64, 8), seed=0)
        warm = benign_local_train(base, train, TrainConfig(epochs=3), seed=1)
        glob = unflatten(flatten(base) + warm, base.shape_signature)

        cfg = MasaConfig()
        wins = 0
        trials = 40
        for trial in range(trials):
            shard = partition_iid(train, 20, seed=trial)[trial % 20]
            clean_delta = benign_local_train(glob, shard, TrainConfig(), seed=100 + trial)
            d_m, d_b = poison_shard(shard, PoisonSpec(ratio=0.5), seed=trial)
            mal_delta = malicious_local_train(glob, d_m, d_b, TrainConfig(), seed=100 + trial)
            clean_model = unflatten(flatten(glob) + clean_delta, glob.shape_signature)
            mal_model = unflatten(flatten(glob) + mal_delta, glob.shape_signature)
            a_clean = unlearn_and_accumulate(clean_model, proxy, cfg, seed=trial).accumulated_loss
            a_mal = unlearn_and_accumulate(mal_model, proxy, cfg, seed=trial).accumulated_loss
            wins += a_mal > a_clean
        assert wins / trials >= 0.95


class TestMds:
    def test_all_equal_scores_zero(self):
        out = mds([3.0, 3.0, 3.0, 3.0])
        assert out.sigma == 0.0
        np.testing.assert_array_equal(out.scores, np.zeros(4))

    def test_frozen_example(self):
        # A = {1,2,3,4,100}: median 3, mean 22, population variance 1522
        out = mds([1.0, 2.0, 3.0, 4.0, 100.0])
        assert out.median == 3.0
        assert out.sigma == pytest.approx(39.01281840626232, abs=1e-12)
        np.testing.assert_allclose(
            out.scores,
            [-0.0512652015851016, -0.0256326007925508, 0.0, 0.0256326007925508, 2.486362276877428],
            atol=1e-12,
        )

    def test_translation_invariant(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=15)
        np.testing.assert_allclose(mds(a).scores, mds(a + 7.5).scores, atol=1e-9)

    def test_positive_affine_invariant(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=12)
        np.testing.assert_allclose(mds(a).scores, mds(3.0 * a - 2.0).scores, atol=1e-9)

    def test_even_length_median_is_lower_middle_element(self):
        out = mds([4.0, 1.0, 3.0, 2.0])
        assert out.median == 2.0
        assert out.scores[list([4.0, 1.0, 3.0, 2.0]).index(2.0)] == 0.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            a = rng.normal(scale=rng.uniform(0.01, 100), size=n)
            got = mds(a)
            want_scores, want_median, want_sigma = mds_oracle(a)
            assert got.median == pytest.approx(want_median, abs=1e-12)
            assert got.sigma == pytest.approx(want_sigma, rel=1e-12)
            np.testing.assert_allclose(got.scores, want_scores, atol=1e-12)

    def test_scores_order_isomorphic(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=20)
        scores = mds(a).scores
        assert np.array_equal(np.argsort(a), np.argsort(scores))


class TestFilter:
    def test_frozen_example_excludes_only_the_outlier(self):
        scores = mds([1.0, 2.0, 3.0, 4.0, 100.0]).scores
        assert filter_scores(scores, 1.0) == [0, 1, 2, 3]

    def test_all_equal_keeps_everyone(self):
        scores = mds([5.0] * 7).scores
        assert filter_scores(scores, 1.0) == list(range(7))

    def test_huge_radius_keeps_everyone(self):
        scores = mds(np.random.default_rng(4).normal(size=9)).scores
        assert filter_scores(scores, 1e9) == list(range(9))

    def test_monotone_in_radius(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            scores = mds(rng.normal(size=11)).scores
            r1, r2 = sorted(rng.uniform(0.1, 3.0, size=2))
            assert set(filter_scores(scores, r1)) <= set(filter_scores(scores, r2))

    def test_median_always_survives(self):
        # the median element scores 0 < radius, so the kept set is never empty
        rng = np.random.default_rng(6)
        for _ in range(20):
            scores = mds(rng.normal(size=rng.integers(1, 15))).scores
            assert filter_scores(scores, 1e-6)

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(ConfigError):
            filter_scores([0.0], 0.0)


class TestMasaAggregate:
    def test_single_client_passes_through(self, model, proxy):
        d = param_count(model.shape_signature)
        update = np.random.default_rng(0).normal(size=d) * 0.01
        out = masa_aggregate([update], model, proxy, MasaConfig(), seed=0)
        assert out.selected == (0,)
        np.testing.assert_array_equal(out.global_update, update)

    def test_identical_benign_updates_all_selected(self, model, proxy):
        d = param_count(model.shape_signature)
        update = np.random.default_rng(1).normal(size=d) * 0.01
        out = masa_aggregate([update.copy() for _ in range(6)], model, proxy, MasaConfig(), seed=0)
        assert out.selected == tuple(range(6))
        assert out.diagnostics["sigma"] == 0.0

    def test_aggregate_is_mean_of_raw_updates_of_survivors(self, model, proxy):
        # detection must not leak into the aggregated value
        rng = np.random.default_rng(2)
        d = param_count(model.shape_signature)
        updates = [rng.normal(size=d) * 0.01 for _ in range(8)]
        out = masa_aggregate(updates, model, proxy, MasaConfig(), seed=3)
        expected = vec_mean([updates[i] for i in out.selected])
        np.testing.assert_array_equal(out.global_update, expected)
        assert not out.diagnostics["fallback"]

    def test_deterministic_across_worker_counts(self, model, proxy):
        rng = np.random.default_rng(3)
        d = param_count(model.shape_signature)
        updates = [rng.normal(size=d) * 0.01 for _ in range(7)]
        serial = masa_aggregate(updates, model, proxy, MasaConfig(), seed=4, n_workers=1)
        threaded = masa_aggregate(updates, model, proxy, MasaConfig(), seed=4, n_workers=4)
        assert serial.selected == threaded.selected
        np.testing.assert_array_equal(serial.global_update, threaded.global_update)
        assert serial.diagnostics["accumulated_losses"] == threaded.diagnostics["accumulated_losses"]

    def test_client_ids_respected(self, model, proxy):
        d = param_count(model.shape_signature)
        updates = [np.zeros(d), np.zeros(d)]
        out = masa_aggregate(updates, model, proxy, MasaConfig(), seed=5, client_ids=[11, 17])
        assert out.selected == (11, 17)
