import numpy as np
import pytest

from patternmine.training import (
    AdamState,
    AdapterParams,
    LossConfig,
    TripletEntry,
    adam_step,
    apply_adapter,
    triplet_loss,
    triplet_loss_grad,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_params(rng, c):
    return AdapterParams(W=np.eye(c) + 0.1 * rng.normal(size=(c, c)),
                         b=0.05 * rng.normal(size=c))


def random_batch(rng, c, n_entries, n_neg=4):
    batch = []
    for _ in range(n_entries):
        batch.append(TripletEntry(
            p1=unit(rng.normal(size=c)),
            p2=unit(rng.normal(size=c)),
            negatives=np.stack([unit(rng.normal(size=c)) for _ in range(n_neg)]),
        ))
    return batch


class TestApplyAdapter:
    def test_identity_on_unit_vector(self):
        p = AdapterParams.identity(5)
        x = unit([1, 2, 3, 4, 5])
        assert np.allclose(apply_adapter(p, x), x)

    def test_positive_scaling_cancels(self):
        p = AdapterParams(W=2 * np.eye(4), b=np.zeros(4))
        x = unit([1, -1, 2, 0.5])
        assert np.allclose(apply_adapter(p, x), x, atol=1e-12)

    def test_matches_direct_arithmetic(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            c_in, c_out = int(rng.integers(2, 8)), int(rng.integers(2, 8))
            params = AdapterParams(W=rng.normal(size=(c_out, c_in)),
                                   b=rng.normal(size=c_out))
            x = rng.normal(size=c_in)
            z = params.W @ x + params.b
            expected = z / np.linalg.norm(z)
            assert np.allclose(apply_adapter(params, x), expected, atol=1e-6)

    def test_zero_stays_zero(self):
        rng = np.random.default_rng(1)
        params = random_params(rng, 4)
        assert np.all(apply_adapter(params, np.zeros(4)) == 0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        params = random_params(rng, 6)
        xs = rng.normal(size=(3, 4, 6))
        out = apply_adapter(params, xs)
        for i in range(3):
            for j in range(4):
                assert np.allclose(out[i, j], apply_adapter(params, xs[i, j]))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            apply_adapter(AdapterParams.identity(3), np.zeros(4))


class TestTripletLoss:
    def test_direct_substitution_perfect_positive(self):
        cfg = LossConfig(lam=0.8, n_neg=1)
        p = unit([1, 0, 0])
        n = unit([0, 1, 0])
        assert abs(triplet_loss(p, p, n[None], cfg) - (-0.6)) < 1e-12

    def test_direct_substitution_hard_case(self):
        cfg = LossConfig(lam=0.8, n_neg=1)
        # s(P1,P2)=0.5, one negative with s=0.9
        p1 = np.array([1.0, 0.0])
        p2 = np.array([0.5, np.sqrt(0.75)])
        n = np.array([0.9, np.sqrt(1 - 0.81)])
        assert abs(triplet_loss(p1, p2, n[None], cfg) - 0.4) < 1e-12

    def test_double_clamp_regime(self):
        cfg = LossConfig(lam=0.8, n_neg=2)
        p1 = np.array([1.0, 0.0, 0.0])
        p2 = unit([0.9, 0.1, 0.0])  # s > 0.8
        negs = np.array([[0.1, 0.0, np.sqrt(0.99)],
                         [0.0, 1.0, 0.0]])  # s <= 0.2
        assert abs(triplet_loss(p1, p2, negs, cfg) - (-0.6)) < 1e-12

    def test_empty_negatives_rejected(self):
        cfg = LossConfig()
        with pytest.raises(ValueError):
            triplet_loss(np.ones(3), np.ones(3), np.zeros((0, 3)), cfg)

    def test_loss_lower_bound(self):
        # L >= 1 - 2*lambda always
        rng = np.random.default_rng(3)
        cfg = LossConfig(lam=0.8)
        for _ in range(200):
            c = 5
            p1, p2 = unit(rng.normal(size=c)), unit(rng.normal(size=c))
            negs = np.stack([unit(rng.normal(size=c)) for _ in range(4)])
            assert triplet_loss(p1, p2, negs, cfg) >= 1 - 2 * cfg.lam - 1e-12


def finite_difference_grads(batch, params, cfg, h=1e-5):
    """Independent oracle: central differences of the mean batch loss."""

    def loss_at(p):
        total = 0.0
        for e in batch:
            y1 = apply_adapter(p, e.p1)
            y2 = apply_adapter(p, e.p2)
            yn = apply_adapter(p, e.negatives)
            total += triplet_loss(y1, y2, yn, cfg)
        return total / len(batch)

    gw = np.zeros_like(params.W)
    for i in range(params.W.shape[0]):
        for j in range(params.W.shape[1]):
            lo, hi = params.copy(), params.copy()
            lo.W[i, j] -= h
            hi.W[i, j] += h
            gw[i, j] = (loss_at(hi) - loss_at(lo)) / (2 * h)
    gb = np.zeros_like(params.b)
    for i in range(params.b.shape[0]):
        lo, hi = params.copy(), params.copy()
        lo.b[i] -= h
        hi.b[i] += h
        gb[i] = (loss_at(hi) - loss_at(lo)) / (2 * h)
    return gw, gb


class TestTripletLossGrad:
    def test_double_clamp_zero_gradient(self):
        cfg = LossConfig(lam=0.8)
        p1 = np.array([1.0, 0.0, 0.0])
        p2 = np.array([0.9, np.sqrt(1 - 0.81), 0.0])
        negs = np.array([[0.0, 0.0, 1.0]])
        batch = [TripletEntry(p1=p1, p2=p2, negatives=negs)]
        _, gw, gb = triplet_loss_grad(batch, AdapterParams.identity(3), cfg)
        assert np.allclose(gw, 0) and np.allclose(gb, 0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        cfg = LossConfig(lam=0.8)
        for _ in range(20):
            c = 5
            params = random_params(rng, c)
            batch = random_batch(rng, c, int(rng.integers(1, 4)))
            _, gw, gb = triplet_loss_grad(batch, params, cfg)
            ew, eb = finite_difference_grads(batch, params, cfg)
            scale = max(np.abs(ew).max(), np.abs(eb).max(), 1e-8)
            assert np.abs(gw - ew).max() / scale < 1e-4
            assert np.abs(gb - eb).max() / scale < 1e-4

    def test_duplicate_entry_invariance(self):
        rng = np.random.default_rng(5)
        cfg = LossConfig()
        batch = random_batch(rng, 6, 2)
        params = random_params(rng, 6)
        l1, gw1, gb1 = triplet_loss_grad(batch, params, cfg)
        l2, gw2, gb2 = triplet_loss_grad(batch + batch, params, cfg)
        assert abs(l1 - l2) < 1e-12
        assert np.allclose(gw1, gw2) and np.allclose(gb1, gb2)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            triplet_loss_grad([], AdapterParams.identity(3), LossConfig())


class TestAdamStep:
    def test_zero_gradient_no_change(self):
        params = AdapterParams.identity(3)
        state = AdamState.for_params(params)
        new_params, new_state = adam_step(state, params,
                                          np.zeros((3, 3)), np.zeros(3))
        assert np.array_equal(new_params.W, params.W)
        assert np.array_equal(new_params.b, params.b)
        assert new_state.t == 1

    def test_first_step_closed_form(self):
        params = AdapterParams(W=np.array([[1.0]]), b=np.array([0.0]))
        state = AdamState.for_params(params, lr=1e-5)
        new_params, _ = adam_step(state, params, np.array([[1.0]]),
                                  np.array([0.0]))
        delta = new_params.W[0, 0] - 1.0
        assert abs(delta + 1e-5 / (1 + 1e-8)) < 1e-12

    def test_three_step_trace_matches_hand_recurrence(self):
        # independent oracle: the textbook Adam recurrence on a scalar
        lr, b1, b2, eps = 1e-3, 0.9, 0.99, 1e-8
        grads = [0.5, -0.2, 1.5]
        theta, m, v = 2.0, 0.0, 0.0
        expected = []
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
            expected.append(theta)

        params = AdapterParams(W=np.array([[2.0]]), b=np.array([0.0]))
        state = AdamState.for_params(params, lr=lr)
        got = []
        for g in grads:
            params, state = adam_step(state, params, np.array([[g]]),
                                      np.array([0.0]))
            got.append(params.W[0, 0])
        assert np.allclose(got, expected, atol=1e-10)


class TestTrainLoop:
    @staticmethod
    def _pyramids(seed=0, n=4, size=14):
        from patternmine.features import FeatureMap, FeaturePyramid, l2_normalize_map

        rng = np.random.default_rng(seed)
        pyrs = []
        for k in range(n):
            v = rng.normal(size=(size, size, 11)).astype(np.float32)
            # plant a shared block so mining has something to verify
            if k:
                v[2:10, 2:10] = pyrs[0].maps[0].values[2:10, 2:10]
            pyrs.append(FeaturePyramid(image_id=f"i{k}", maps=[
                l2_normalize_map(FeatureMap(scale_factor=1.0, values=v))]))
        return pyrs

    def test_zero_rounds_returns_identity(self):
        from patternmine.mining import MiningConfig
        from patternmine.training import train

        params, hist = train(self._pyramids(), MiningConfig(), LossConfig(),
                             rounds=0, seed=1)
        ident = AdapterParams.identity(11)
        assert np.array_equal(params.W, ident.W)
        assert np.array_equal(params.b, ident.b)
        assert hist.rows == []

    def test_deterministic_under_seed(self):
        from patternmine.mining import MiningConfig
        from patternmine.training import train

        cfg = MiningConfig(proposals_per_round=32)
        a, ha = train(self._pyramids(), cfg, LossConfig(), rounds=5, seed=9,
                      lr=1e-3)
        b, hb = train(self._pyramids(), cfg, LossConfig(), rounds=5, seed=9,
                      lr=1e-3)
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(a.b, b.b)
        assert ha.rows == hb.rows

    def test_history_one_row_per_round(self):
        from patternmine.mining import MiningConfig
        from patternmine.training import train

        _, hist = train(self._pyramids(), MiningConfig(proposals_per_round=32),
                        LossConfig(), rounds=5, seed=9, lr=1e-3)
        assert [r["round"] for r in hist.rows] == list(range(5))
