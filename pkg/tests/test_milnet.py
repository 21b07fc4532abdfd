import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from survseg.features import apply_normalizer, fit_normalizer
from survseg.milnet import (
    POOL_MODES,
    Architecture,
    Batch,
    NetworkParams,
    PatientBag,
    SurvivalError,
    TrainConfig,
    balanced_sample,
    cox_loss_and_grad,
    forward,
    gradient_check,
    init_params,
    late_fusion,
    load_model,
    loss_cox,
    loss_mse,
    pool,
    predict,
    save_model,
    train,
)
from survseg.stats import c_index

hazards = st.lists(st.floats(-50, 50), min_size=1, max_size=12)


def _brute_cox(eta, times, events):
    total = 0.0
    for i in range(len(eta)):
        if events[i]:
            total -= eta[i] - math.log(sum(math.exp(eta[j]) for j in range(len(eta)) if times[j] >= times[i]))
    return total


def _bags(n=12, d=5, seed=0, max_inst=3):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n):
        k = int(rng.integers(1, max_inst + 1))
        bags.append(PatientBag(f"p{i}", rng.normal(size=(k, d)), float(rng.uniform(1, 50)), int(i % 2), int(rng.integers(k))))
    return bags


class TestPool:
    @pytest.mark.parametrize("mode", POOL_MODES)
    def test_single_instance(self, mode):
        assert pool([1.0], mode, 0) == 1.0

    def test_lse_two_zeros(self):
        assert pool([0.0, 0.0], "lse") == pytest.approx(math.log(2), abs=1e-15)

    def test_lse_no_overflow(self):
        assert pool([1000.0, 1000.0], "lse") == pytest.approx(1000 + math.log(2), rel=1e-15)
        assert pool([10.0, 10.0], "lse") - 10 == pytest.approx(math.log(2), abs=1e-14)

    def test_exact_modes(self):
        assert pool([1.0, 4.0, -2.0], "mean") == 1.0
        assert pool([1.0, 4.0, -2.0], "max") == 4.0
        assert pool([1.0, 4.0, -2.0], "largest", 2) == -2.0

    def test_errors(self):
        with pytest.raises(SurvivalError):
            pool([1.0, 2.0], "largest")
        with pytest.raises(SurvivalError):
            pool([], "mean")
        with pytest.raises(SurvivalError):
            pool([1.0], "median")

    @settings(max_examples=200, deadline=None)
    @given(hazards)
    def test_lse_bounds(self, eta):
        eta = np.asarray(eta)
        m, n = eta.max(), eta.size
        # strictness is only representable while every term is visible next to the max
        assume(n == 1 or np.all(eta - m > -30))
        p = pool(eta, "lse")
        if n == 1:
            assert p == eta[0]
            return
        assert m < p <= m + math.log(n) + 1e-12
        if np.all(eta == eta[0]):
            assert p == pytest.approx(m + math.log(n), abs=1e-12)
        elif np.ptp(eta) > 1e-6:
            assert p < m + math.log(n)

    @settings(max_examples=100, deadline=None)
    @given(hazards)
    def test_max_equals_largest_when_largest_is_max(self, eta):
        i = int(np.argmax(eta))
        assert pool(eta, "max") == pool(eta, "largest", i)


class TestLosses:
    def test_mse_examples(self):
        assert loss_mse([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
        assert loss_mse([[0.0]], [[2.0]]) == 4.0
        assert loss_mse([[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [1.0, math.sqrt(2)]]) == pytest.approx(2.0)
        with pytest.raises(SurvivalError):
            loss_mse([[0.0, 0.0]], [[0.0]])

    def test_cox_examples(self):
        assert loss_cox([0.3], [5.0], [1]) == 0.0
        assert loss_cox([0.0, 0.0], [1.0, 2.0], [1, 1]) == pytest.approx(math.log(2), abs=1e-15)
        with pytest.raises(SurvivalError):
            loss_cox([0.0, 1.0], [1.0, 2.0], [0, 0])

    def test_breslow_ties_share_risk_set(self):
        # both tied events see both patients: 2 * ln 2
        assert loss_cox([0.0, 0.0], [3.0, 3.0], [1, 1]) == pytest.approx(2 * math.log(2))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 15), st.integers(0, 10_000), st.floats(-10, 10))
    def test_matches_brute_force_and_shift(self, n, seed, c):
        rng = np.random.default_rng(seed)
        eta = rng.normal(size=n) * 3
        times = rng.integers(1, 6, n).astype(float)
        events = rng.integers(0, 2, n)
        events[0] = 1
        got = loss_cox(eta, times, events)
        assert got == pytest.approx(_brute_cox(eta, times, events), rel=1e-10, abs=1e-10)
        assert abs(loss_cox(eta + c, times, events) - got) < 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 15), st.integers(0, 10_000), st.floats(0.01, 5))
    def test_monotone_in_earliest_event(self, n, seed, bump):
        rng = np.random.default_rng(seed)
        eta = rng.normal(size=n)
        times = rng.permutation(n).astype(float) + 1.0
        events = rng.integers(0, 2, n)
        first = int(np.argmin(times))
        events[first] = 1
        up = eta.copy()
        up[first] += bump
        assert loss_cox(up, times, events) < loss_cox(eta, times, events)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        eta, times, events = rng.normal(size=9), rng.integers(1, 4, 9).astype(float), rng.integers(0, 2, 9)
        events[0] = 1
        _, g = cox_loss_and_grad(eta, times, events)
        h = 1e-6
        for i in range(9):
            e = np.zeros(9)
            e[i] = h
            num = (loss_cox(eta + e, times, events) - loss_cox(eta - e, times, events)) / (2 * h)
            assert g[i] == pytest.approx(num, abs=1e-7)


class TestForward:
    def test_zero_network(self):
        params = init_params(Architecture(4), np.random.default_rng(0))
        params.flat[:] = 0.0
        params.weights["reg1.b"][:] = 0.7
        bag = PatientBag("a", np.ones((3, 4)), 1.0, 1)
        _, hz = forward(params, Batch.from_bags([bag]), "lse")
        np.testing.assert_array_equal(hz.tumour, [0.7, 0.7, 0.7])
        assert hz.patient[0] == pytest.approx(0.7 + math.log(3), abs=1e-14)

    @pytest.mark.parametrize("mode", POOL_MODES)
    def test_single_instance_bag(self, mode):
        params = init_params(Architecture(4), np.random.default_rng(1))
        bag = PatientBag("a", np.arange(4.0)[None], 1.0, 1, 0)
        _, hz = forward(params, Batch.from_bags([bag]), mode)
        assert hz.patient[0] == hz.tumour[0]

    def test_dimension_mismatch(self):
        params = init_params(Architecture(4), np.random.default_rng(0))
        with pytest.raises(SurvivalError):
            forward(params, Batch.from_bags([PatientBag("a", np.ones((1, 5)), 1.0, 1)]))

    def test_subset_matches_restacking(self):
        bags = _bags()
        full = Batch.from_bags(bags)
        idx = [7, 2, 3]
        a = full.subset(idx)
        b = Batch.from_bags([bags[i] for i in idx])
        for f in ("X", "offsets", "times", "events", "largest"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_bag_validation(self):
        with pytest.raises(SurvivalError):
            PatientBag("a", np.ones((1, 3)), 0.0, 1)
        with pytest.raises(SurvivalError):
            PatientBag("a", np.ones((1, 3)), 1.0, 2)
        with pytest.raises(SurvivalError):
            PatientBag("a", np.ones((2, 3)), 1.0, 1, 5)


@pytest.fixture(scope="module")
def setup():
    arch = Architecture(5, (6, 4, 3), (3,))
    params = init_params(arch, np.random.default_rng(2))
    return params, Batch.from_bags(_bags(10, 5, seed=3))


class TestGradient:
    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    @pytest.mark.parametrize("mode", POOL_MODES)
    def test_all_combinations(self, setup, mode, alpha):
        params, batch = setup
        assert gradient_check(params, batch, mode, alpha, per_array=None) < 1e-4

    def test_default_network_with_dropout(self):
        params = init_params(Architecture(5), np.random.default_rng(5))
        batch = Batch.from_bags(_bags(8, 5, seed=6))
        assert gradient_check(params, batch, "lse", 0.5, per_array=8, dropout=0.2) < 1e-4

    def test_empty_subset(self, setup):
        params, batch = setup
        assert gradient_check(params, batch, per_array=0) == 0.0


class TestTrain:
    def test_zero_epochs_is_init(self):
        bags = _bags()
        cfg = TrainConfig(epochs=0, seed=3)
        res = train(bags, cfg)
        init = init_params(Architecture(5), np.random.default_rng(np.random.SeedSequence(3).spawn(3)[0]))
        np.testing.assert_array_equal(res.params.flat, init.flat)
        assert res.history == []

    def test_deterministic(self):
        bags = _bags()
        cfg = TrainConfig(epochs=15, seed=11)
        a, b = train(bags, cfg), train(bags, cfg)
        assert a.params.flat.tobytes() == b.params.flat.tobytes()
        assert repr(a.history) == repr(b.history)
        c = train(bags, TrainConfig(epochs=15, seed=12))
        assert c.params.flat.tobytes() != a.params.flat.tobytes()

    def test_alpha_schedule(self):
        hist = train(_bags(), TrainConfig(epochs=10)).history
        alphas = [h["alpha"] for h in hist]
        assert alphas == [e / 10 for e in range(10)]

    def test_needs_two_events(self):
        bags = [PatientBag(f"p{i}", np.ones((1, 2)), 1.0 + i, int(i == 0)) for i in range(5)]
        with pytest.raises(SurvivalError):
            train(bags, TrainConfig(epochs=1))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=40), st.integers(0, 1000))
    def test_balanced_sample(self, events, seed):
        ev = np.array(events)
        idx = balanced_sample(ev, np.random.default_rng(seed))
        assert len(set(idx.tolist())) == len(idx)
        k = min(ev.sum(), (1 - ev).sum())
        if k == 0:
            assert len(idx) == len(ev)
        else:
            assert ev[idx].sum() == k and (1 - ev[idx]).sum() == k

    def test_rescaled_features_give_same_training(self):
        rng = np.random.default_rng(8)
        raw = rng.lognormal(size=(30, 4))
        times = rng.uniform(1, 40, 10)

        def run(x):
            z = apply_normalizer(x, fit_normalizer(x))
            bags = [PatientBag(f"p{i}", z[3 * i:3 * i + 3], times[i], i % 2) for i in range(10)]
            return train(bags, TrainConfig(epochs=20, seed=1)).params.flat

        np.testing.assert_allclose(run(raw), run(2.0 * raw), rtol=0, atol=1e-9)

    def test_learns_planted_signal(self):
        rng = np.random.default_rng(0)
        n = 120
        x = rng.normal(size=(n, 3))
        t = rng.exponential(1.0 / np.exp(2.0 * x[:, 0])) + 1e-3
        e = (rng.random(n) < 0.7).astype(int)
        bags = [PatientBag(str(i), x[i:i + 1], float(t[i]), int(e[i])) for i in range(n)]
        tr, te = bags[:80], bags[80:]
        params = train(tr, TrainConfig(epochs=250, seed=0)).params
        h = predict(params, te)
        assert c_index(t[80:], e[80:], h) >= 0.75


class TestFusion:
    def test_examples(self):
        assert late_fusion({"a": 1.5}, {"a": 1.5}) == {"a": 1.5}
        assert late_fusion({"a": 1.0}, {"a": 3.0}) == {"a": 2.0}
        assert late_fusion({}, {"b": 4.0}) == {"b": 4.0}

    def test_missing_everywhere(self):
        with pytest.raises(SurvivalError):
            late_fusion({"a": 1.0}, {}, ["a", "z"])


def test_model_round_trip(tmp_path):
    params = train(_bags(), TrainConfig(epochs=3)).params
    save_model(tmp_path / "m.json", {"pre": params}, {"pre": {"k": 1}}, "lse", 7)
    doc = load_model(tmp_path / "m.json")
    back: NetworkParams = doc["networks"]["pre"]
    assert back.flat.tobytes() == params.flat.tobytes()
    assert doc["pool"] == "lse" and doc["seed"] == 7 and doc["phases"]["pre"]["normalizer"] == {"k": 1}
    bags = _bags(seed=9)
    np.testing.assert_array_equal(predict(back, bags), predict(params, bags))
