import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import norm

from neurodesk import rbm
from neurodesk.data import DimensionMismatchError, SampleMatrix


def _params(W, a=None, b=None, sigma=None):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    V, H = W.shape
    return rbm.RbmParams(W, np.zeros(V) if a is None else a, np.zeros(H) if b is None else b, sigma)


def _mean_field(**kw):
    return rbm.RbmTrainConfig(sample_hidden=False, sample_visible=False, **kw)


class TestConfig:
    def test_defaults(self):
        cfg = rbm.RbmTrainConfig()
        assert (cfg.epsilon, cfg.l1, cfg.batch_size, cfg.epochs, cfg.cd_steps, cfg.momentum) == (0.08, 0.1, 5, 100, 1, 0.0)

    def test_lambda_key_is_accepted(self):
        assert rbm.RbmTrainConfig.model_validate({"lambda": 0.3}).l1 == 0.3

    @pytest.mark.parametrize("field, value", [("epochs", 0), ("epsilon", 0.0), ("l1", -1.0),
                                              ("batch_size", 0), ("cd_steps", 0), ("momentum", 1.0)])
    def test_invalid_values_rejected(self, field, value):
        with pytest.raises(ValidationError):
            rbm.RbmTrainConfig(**{field: value})

    def test_params_reject_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            _params([[1.0]], sigma=[0.0])


class TestEnergyAndConditionals:
    def test_energy_all_zero(self):
        assert rbm.energy([0.0, 0.0], [0.0], _params(np.zeros((2, 1)))) == 0.0

    def test_energy_hand_value(self):
        assert rbm.energy([1.0], [1.0], _params([[2.0]])) == pytest.approx(-1.5)

    def test_energy_ignores_b_when_h_zero(self):
        p = _params([[0.3, -0.2]], b=[0.4, 0.1])
        doubled = _params([[0.3, -0.2]], b=[0.8, 0.2])
        assert rbm.energy([0.7], [0.0, 0.0], p) == rbm.energy([0.7], [0.0, 0.0], doubled)

    def test_energy_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            rbm.energy([1.0, 2.0, 3.0], [1.0], _params([[2.0], [1.0]]))

    def test_hidden_mean_values(self):
        np.testing.assert_array_equal(rbm.hidden_mean([0.0, 0.0], _params(np.ones((2, 3)))), np.zeros(3))
        assert rbm.hidden_mean([1.0], _params([[1.0]]))[0] == pytest.approx(0.76159, abs=1e-5)

    def test_hidden_mean_odd_in_weights(self, small_params):
        v = np.array([0.4, -1.2])
        flipped = rbm.RbmParams(-small_params.W, small_params.a, -small_params.b)
        np.testing.assert_allclose(rbm.hidden_mean(v, flipped), -rbm.hidden_mean(v, small_params))

    def test_sample_hidden_extremes_and_frequency(self, rng):
        assert np.all(rbm.sample_hidden(np.ones(100), rng) == 1.0)
        assert np.all(rbm.sample_hidden(-np.ones(100), rng) == -1.0)
        draws = rbm.sample_hidden(np.zeros(100_000), rng)
        assert abs(np.mean(draws == 1.0) - 0.5) < 0.01

    def test_visible_mean(self):
        np.testing.assert_array_equal(rbm.visible_mean([0.0], _params([[2.0], [1.0]], a=[0.5, -1.0])), [0.5, -1.0])
        assert rbm.visible_mean([-1.0], _params([[2.0]], a=[0.5]))[0] == pytest.approx(-1.5)

    def test_visible_mean_scales_with_sigma(self):
        base = rbm.visible_mean([1.0], _params([[2.0], [1.0]]))
        scaled = rbm.visible_mean([1.0], _params([[2.0], [1.0]], sigma=[3.0, 1.0]))
        np.testing.assert_allclose(scaled, [3.0 * base[0], base[1]])

    def test_sample_visible_noise(self, rng):
        p = _params(np.zeros((1, 1)))
        mean = np.zeros((100_000, 1))
        draws = rbm.sample_visible(mean, p, rng)
        assert abs(draws.var() - 1.0) < 0.02
        np.testing.assert_array_equal(rbm.sample_visible(mean[:5], p, rng, noise=False), mean[:5])

    def test_sample_visible_seeded(self):
        p = _params(np.zeros((3, 1)))
        a = rbm.sample_visible(np.zeros(3), p, np.random.default_rng(9))
        b = rbm.sample_visible(np.zeros(3), p, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_free_energy_matches_enumeration(self, small_params):
        v = np.array([0.3, -0.8])
        states = [np.array(s, dtype=float) for s in ((-1, -1), (-1, 1), (1, -1), (1, 1))]
        brute = -np.log(sum(np.exp(-rbm.energy(v, h, small_params)) for h in states))
        assert rbm.free_energy(v, small_params) == pytest.approx(brute, rel=1e-12)


class TestContrastiveDivergence:
    def test_zero_batch_zero_model_is_a_no_op(self, rng):
        p = _params(np.zeros((3, 2)))
        updated, _ = rbm.cd1_update(np.zeros((4, 3)), p, rbm.RbmTrainConfig(l1=0.0), rng)
        np.testing.assert_array_equal(updated.W, p.W)
        np.testing.assert_array_equal(updated.a, p.a)
        np.testing.assert_array_equal(updated.b, p.b)

    def test_l1_only_update(self, rng):
        W = np.array([[0.5, -0.2], [0.0, 0.3]])
        cfg = _mean_field(epsilon=0.1, l1=0.1)
        updated, _ = rbm.cd1_update(np.zeros((3, 2)), _params(W), cfg, rng)
        np.testing.assert_allclose(updated.W, W - 0.1 * 0.1 * np.sign(W), atol=1e-15)
        np.testing.assert_array_equal(updated.b, 0.0)

    def test_toy_update_matches_hand_formula(self, rng):
        W = np.array([[0.4], [-0.3]])
        a = np.array([0.1, -0.2])
        b = np.array([0.05])
        batch = np.array([[1.0, 0.5], [-0.5, 2.0]])
        eps = 0.05
        cfg = _mean_field(epsilon=eps, l1=0.0)

        # brute force, one sample and one entry at a time
        gW = np.zeros_like(W)
        ga = np.zeros(2)
        gb = np.zeros(1)
        for v0 in batch:
            h0 = np.tanh(b[0] + v0[0] * W[0, 0] + v0[1] * W[1, 0])
            v1 = np.array([a[0] + W[0, 0] * h0, a[1] + W[1, 0] * h0])
            h1 = np.tanh(b[0] + v1[0] * W[0, 0] + v1[1] * W[1, 0])
            for j in range(2):
                gW[j, 0] += (v0[j] * h0 - v1[j] * h1) / len(batch)
                ga[j] += (v0[j] - v1[j]) / len(batch)
            gb[0] += (h0 - h1) / len(batch)

        updated, _ = rbm.cd1_update(batch, _params(W, a, b), cfg, rng)
        np.testing.assert_allclose(updated.W, W + eps * gW, rtol=1e-12)
        np.testing.assert_allclose(updated.a, a + eps * ga, rtol=1e-12)
        np.testing.assert_allclose(updated.b, b + eps * gb, rtol=1e-12)

    def test_momentum_accumulates(self, rng):
        W = np.array([[0.5]])
        cfg = _mean_field(epsilon=0.1, l1=0.1, momentum=0.5)
        velocity = rbm.RbmGradient(np.zeros((1, 1)), np.zeros(1), np.zeros(1))
        p, _ = rbm.cd1_update(np.zeros((2, 1)), _params(W), cfg, rng, velocity)
        p, _ = rbm.cd1_update(np.zeros((2, 1)), p, cfg, rng, velocity)
        # steps -0.01 then -0.01 + 0.5 * -0.01
        assert p.W[0, 0] == pytest.approx(0.5 - 0.01 - 0.015)

    def test_batch_width_checked(self, rng):
        with pytest.raises(DimensionMismatchError):
            rbm.cd1_update(np.zeros((2, 3)), _params(np.zeros((2, 1))), rbm.RbmTrainConfig(), rng)

    def test_cd_direction_agrees_with_exact_gradient(self, small_params):
        data_rng = np.random.default_rng(5)
        data = data_rng.normal(size=(50, 2)) + np.array([1.0, -0.5])
        exact = rbm.exact_loglik_gradient(data, small_params).flat()

        cfg = rbm.RbmTrainConfig()
        total = np.zeros_like(exact)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            idx = rng.choice(len(data), size=5, replace=False)
            grad, _ = rbm.cd_gradient(data[idx], small_params, cfg, rng)
            total += grad.flat()
        cosine = total @ exact / (np.linalg.norm(total) * np.linalg.norm(exact))
        assert cosine > 0


class TestTraining:
    def test_trace_length_and_determinism(self, tiny_data):
        cfg = rbm.RbmTrainConfig(n_hidden=4, epochs=3, seed=11)
        p1, trace = rbm.train(tiny_data, cfg)
        p2, _ = rbm.train(tiny_data, cfg)
        assert len(trace.recon_error) == 3 and len(trace.mean_abs_w) == 3
        np.testing.assert_array_equal(p1.W, p2.W)
        np.testing.assert_array_equal(p1.b, p2.b)
        assert list(trace.to_frame().columns) == ["epoch", "recon_error", "mean_abs_w"]

    def test_reconstruction_improves(self, tiny_data):
        _, trace = rbm.train(tiny_data, rbm.RbmTrainConfig(n_hidden=4, epochs=30, l1=0.0, seed=2))
        assert trace.recon_error[-1] < trace.recon_error[0]

    def test_l1_shrinks_weights(self, tiny_data):
        base = dict(n_hidden=4, epochs=30, seed=2)
        sparse, _ = rbm.train(tiny_data, rbm.RbmTrainConfig(l1=0.1, **base))
        dense, _ = rbm.train(tiny_data, rbm.RbmTrainConfig(l1=0.0, **base))
        assert np.mean(np.abs(sparse.W)) < np.mean(np.abs(dense.W))

    def test_warns_on_raw_data(self, caplog, rng):
        rbm.train(rng.normal(4.0, 2.0, size=(10, 3)), rbm.RbmTrainConfig(n_hidden=2, epochs=1))
        assert any("not z-scored" in r.message for r in caplog.records)


class TestPostTraining:
    def test_flip_example(self):
        p = _params([[-1.0, 0.5], [-2.0, 0.5]], b=[0.3, 0.2])
        flipped = rbm.flip_negative_fields(p)
        np.testing.assert_array_equal(flipped.W, [[1.0, 0.5], [2.0, 0.5]])
        np.testing.assert_array_equal(flipped.b, [-0.3, 0.2])

    def test_flip_is_idempotent_and_keeps_magnitudes(self, small_params):
        once = rbm.flip_negative_fields(small_params)
        twice = rbm.flip_negative_fields(once)
        np.testing.assert_array_equal(once.W, twice.W)
        v = np.array([0.7, -0.1])
        np.testing.assert_allclose(np.abs(rbm.hidden_mean(v, once)), np.abs(rbm.hidden_mean(v, small_params)))

    def test_timecourses(self, small_params):
        zero = rbm.feed_forward_timecourses(np.zeros((3, 2)), _params(np.ones((2, 2))))
        np.testing.assert_array_equal(zero.values, 0.0)
        row = np.array([[0.5, -0.5]])
        np.testing.assert_allclose(rbm.feed_forward_timecourses(row, small_params).values[0],
                                   rbm.hidden_mean(row[0], small_params))

    def test_timecourses_bounded(self, tiny_data):
        p, _ = rbm.train(tiny_data, rbm.RbmTrainConfig(n_hidden=3, epochs=2))
        tc = rbm.feed_forward_timecourses(tiny_data, p).values
        assert tc.shape == (tiny_data.rows, 3)
        # large pre-activations round tanh to exactly +/-1 in float64
        assert np.all(np.abs(tc) <= 1.0)

    def test_timecourses_open_interval_for_moderate_input(self, rng):
        p = _params(rng.normal(0.0, 0.5, size=(4, 3)))
        x = rng.uniform(-1.0, 1.0, size=(50, 4))
        tc = rbm.feed_forward_timecourses(x - x.mean(axis=0), p).values
        assert np.all(np.abs(tc) < 1.0)

    def test_receptive_fields_and_active_units(self):
        p = _params([[1.0, 0.0, 0.2], [1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(rbm.receptive_fields(p).values, p.W.T)
        assert rbm.active_units(p) == 2


class TestExactLikelihood:
    def test_zero_weights_reduce_to_gaussian(self, rng):
        data = rng.normal(size=(20, 3))
        a = np.array([0.2, -0.1, 0.5])
        p = rbm.RbmParams(np.zeros((3, 2)), a, np.array([0.3, -0.7]))
        expected = norm.logpdf(data, loc=a).sum(axis=1).mean()
        assert rbm.exact_loglik(data, p) == pytest.approx(expected, rel=1e-10)

    def test_gradient_matches_finite_differences(self, small_params, rng):
        data = rng.normal(size=(30, 2))
        grad = rbm.exact_loglik_gradient(data, small_params).flat()
        step = 1e-5
        numeric = np.zeros_like(grad)
        names = [("W", idx) for idx in np.ndindex(2, 2)] + [("a", (i,)) for i in range(2)] + [("b", (i,)) for i in range(2)]
        for k, (name, idx) in enumerate(names):
            values = {n: getattr(small_params, n).copy() for n in ("W", "a", "b")}
            values[name][idx] += step
            up = rbm.exact_loglik(data, rbm.RbmParams(values["W"], values["a"], values["b"]))
            values[name][idx] -= 2 * step
            down = rbm.exact_loglik(data, rbm.RbmParams(values["W"], values["a"], values["b"]))
            numeric[k] = (up - down) / (2 * step)
        assert np.linalg.norm(grad - numeric) / np.linalg.norm(grad) < 1e-5

    def test_gradient_ascent_increases_likelihood(self, small_params, rng):
        data = rng.normal(size=(40, 2)) @ np.array([[1.0, 0.6], [0.0, 0.8]])
        p = small_params
        values = [rbm.exact_loglik(data, p)]
        for _ in range(50):
            g = rbm.exact_loglik_gradient(data, p)
            p = rbm.RbmParams(p.W + 0.02 * g.W, p.a + 0.02 * g.a, p.b + 0.02 * g.b)
            values.append(rbm.exact_loglik(data, p))
        assert values[-1] > values[0]
        assert np.all(np.diff(values) > -1e-12)

    def test_symmetric_data_gives_zero_bias_gradient(self, rng):
        half = rng.normal(size=(15, 2))
        data = np.vstack([half, -half])
        p = rbm.RbmParams(rng.normal(0, 0.5, size=(2, 3)), np.zeros(2), np.zeros(3))
        np.testing.assert_allclose(rbm.exact_loglik_gradient(data, p).a, 0.0, atol=1e-12)

    def test_too_many_hidden_units(self):
        with pytest.raises(rbm.StateSpaceTooLargeError):
            rbm.exact_loglik(np.zeros((1, 1)), _params(np.zeros((1, 13))))


class TestPersistence:
    def test_round_trip_float64(self, tmp_path, small_params):
        path = tmp_path / "m.rbm"
        rbm.save_rbm(small_params, path, dtype="<f8")
        back = rbm.load_rbm(path)
        np.testing.assert_array_equal(back.W, small_params.W)
        np.testing.assert_array_equal(back.a, small_params.a)
        np.testing.assert_array_equal(back.b, small_params.b)
        np.testing.assert_array_equal(back.sigma, 1.0)

    def test_stored_sigma_and_visible_kind(self, tmp_path):
        p = rbm.RbmParams(np.ones((2, 1)), np.zeros(2), np.zeros(1), sigma=[0.5, 2.0], visible="tanh")
        rbm.save_rbm(p, tmp_path / "m.rbm")
        back = rbm.load_rbm(tmp_path / "m.rbm")
        np.testing.assert_array_equal(back.sigma, [0.5, 2.0])
        assert back.visible == "tanh"

    def test_accepts_sample_matrix(self, small_params):
        out = rbm.hidden_mean(SampleMatrix([[0.1, 0.2], [0.3, 0.4]]), small_params)
        assert out.shape == (2, 2)
