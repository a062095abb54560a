import numpy as np
import pytest

from srpo.behavior import (BehaviorNet, BehaviorTrainConfig, DensityGrid, density_grid,
                           denoising_loss, log_density, sample_times, score, train_behavior)
from srpo.errors import CheckpointError, NumericError
from srpo.nn import save_checkpoint, DenseNet
from srpo.oracles import (GaussianMixture, MixtureNoiseModel, diffused_mixture_logpdf,
                          vp_alpha_sigma)
from srpo.schedule import T_RANGE

from conftest import numeric_grad, rel_err

STD_NORMAL = GaussianMixture([1.0], [[0.0, 0.0]], [1.0])


def small_net(state_dim=0, seed=0, linear_skip=False):
    net = BehaviorNet(2, state_dim, width=16, n_blocks=2, dropout=0.0, num_frequencies=4,
                      frequency_scale=4.0, seed=seed, linear_skip=linear_skip)
    if linear_skip:
        # zero at init; randomise so the skip path actually carries signal
        rng = np.random.default_rng(seed + 100)
        for v in net.skip.params.values():
            v[...] = 0.3 * rng.standard_normal(v.shape)
    return net


class TestBehaviorNet:
    def test_shapes_with_and_without_state(self):
        rng = np.random.default_rng(0)
        assert small_net().forward(rng.standard_normal((5, 2)), None, 0.3).shape == (5, 2)
        net = small_net(state_dim=3)
        out = net.forward(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)),
                          rng.uniform(0, 1, 5))
        assert out.shape == (5, 2)

    def test_wrong_state_width(self):
        with pytest.raises(ValueError):
            small_net(state_dim=3).forward(np.zeros((2, 2)), np.zeros((2, 2)), 0.5)

    @pytest.mark.parametrize("linear_skip", [False, True])
    def test_action_gradient_matches_differences(self, linear_skip):
        rng = np.random.default_rng(1)
        net = small_net(state_dim=2, seed=3, linear_skip=linear_skip)
        a = rng.standard_normal((4, 2))
        s = rng.standard_normal((4, 2))
        t = rng.uniform(0.02, 0.98, 4)
        r = rng.standard_normal((4, 2))

        def f():
            return float(np.sum(net.forward(a, s, t) * r))

        net.forward(a, s, t)
        grads, ga = net.backward(r)
        assert rel_err(ga.ravel(), numeric_grad(f, a, np.arange(a.size))) < 1e-6
        w = net.params["block1.fc2.weight"]
        idx = rng.choice(w.size, 20, replace=False)
        assert rel_err(grads["block1.fc2.weight"].ravel()[idx], numeric_grad(f, w, idx)) < 1e-6
        assert set(grads) == set(net.params)
        if linear_skip:
            for k in ("skip/layer0.weight", "skip/layer0.bias"):
                p = net.params[k]
                assert rel_err(grads[k].ravel(), numeric_grad(f, p, np.arange(p.size))) < 1e-6

    @pytest.mark.parametrize("linear_skip", [False, True])
    def test_divergence_is_jacobian_trace(self, linear_skip):
        rng = np.random.default_rng(2)
        net = small_net(seed=1, linear_skip=linear_skip)
        a = rng.standard_normal((3, 2))
        eps, div = net.noise_divergence(a, None, 0.4)
        h = 1e-6
        fd = np.zeros(3)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd += (net.forward(a + e, None, 0.4)[:, i] - net.forward(a - e, None, 0.4)[:, i]) / (2 * h)
        np.testing.assert_allclose(div, fd, rtol=1e-6, atol=1e-9)
        np.testing.assert_array_equal(eps, net.forward(a, None, 0.4))

    def test_score_sign_and_scale(self, schedule):
        net = small_net()
        a = np.ones((2, 2))
        _, s = schedule.alpha_sigma(0.3)
        np.testing.assert_allclose(score(net, a, None, 0.3, schedule), -net.forward(a, None, 0.3) / s)

    @pytest.mark.parametrize("linear_skip", [False, True])
    def test_save_load(self, tmp_path, linear_skip):
        net = small_net(state_dim=1, seed=5, linear_skip=linear_skip)
        net.save(tmp_path / "b.npz", meta={"note": "x"})
        back = BehaviorNet.load(tmp_path / "b.npz")
        a, s = np.ones((2, 2)), np.ones((2, 1))
        np.testing.assert_array_equal(back.forward(a, s, 0.2), net.forward(a, s, 0.2))
        assert back.describe() == net.describe()

    def test_skip_starts_at_zero(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((4, 2))
        plain = BehaviorNet(2, width=8, n_blocks=1, seed=2)
        skip = BehaviorNet(2, width=8, n_blocks=1, seed=2, linear_skip=True)
        np.testing.assert_array_equal(skip.forward(a, None, 0.3), plain.forward(a, None, 0.3))

    def test_params_setter_round_trip(self):
        net = small_net(linear_skip=True)
        new = {k: np.full_like(v, 0.5) for k, v in net.params.items()}
        net.params = new
        assert all(np.all(v == 0.5) for v in net.params.values())
        assert net.skip.params["layer0.weight"] is new["skip/layer0.weight"]

    def test_load_rejects_other_models(self, tmp_path):
        save_checkpoint(tmp_path / "x.npz", {"net": DenseNet([2, 2])}, {"model": "Other"})
        with pytest.raises(CheckpointError):
            BehaviorNet.load(tmp_path / "x.npz")


class TestDenoisingLoss:
    def test_param_gradients(self, schedule):
        net = small_net(seed=2)
        actions = np.random.default_rng(3).standard_normal((8, 2))

        def f():
            return denoising_loss(net, actions, None, np.random.default_rng(9), schedule,
                                  need_grads=False)[0]

        _, grads = denoising_loss(net, actions, None, np.random.default_rng(9), schedule)
        for k in ("input.weight", "block0.fc1.bias", "output.weight"):
            p = net.params[k]
            idx = np.arange(min(p.size, 15))
            assert rel_err(grads[k].ravel()[idx], numeric_grad(f, p, idx)) < 1e-6

    def test_perfect_model_loss_equals_residual_variance(self, schedule):
        # for N(0, I) data the optimum eps* = sigma a_t leaves E||eps* - eps||^2 = d E[alpha^2]
        model = MixtureNoiseModel(STD_NORMAL)
        rng = np.random.default_rng(0)
        actions = rng.standard_normal((200_000, 2))
        loss, _ = denoising_loss(model, actions, None, rng, schedule, need_grads=False)
        t = np.linspace(*T_RANGE, 200_001)
        expected = 2 * np.mean(vp_alpha_sigma(t)[0] ** 2)
        np.testing.assert_allclose(loss, expected, rtol=0.01)

    def test_empty_batch(self, schedule):
        with pytest.raises(ValueError):
            denoising_loss(small_net(), np.zeros((0, 2)), None, np.random.default_rng(0), schedule)


class TestTimeSampling:
    def test_uniform_range(self):
        t = sample_times(np.random.default_rng(0), 10_000)
        assert T_RANGE[0] <= t.min() and t.max() <= T_RANGE[1]

    def test_low_biased_shifts_mass_down(self):
        rng = np.random.default_rng(0)
        u = sample_times(rng, 50_000, t_sampling="uniform")
        b = sample_times(rng, 50_000, t_sampling="low_biased")
        assert T_RANGE[0] <= b.min() and b.max() <= T_RANGE[1]
        assert np.mean(b < 0.1) > 2 * np.mean(u < 0.1)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            sample_times(np.random.default_rng(0), 3, t_sampling="cubic")


class TestTraining:
    @pytest.mark.parametrize("linear_skip", [False, True])
    def test_short_run_reduces_loss_and_writes_artifacts(self, tmp_path, linear_skip):
        data = np.random.default_rng(0).standard_normal((4000, 2))
        net = small_net(linear_skip=linear_skip)
        before = {k: v.copy() for k, v in net.params.items()}
        cfg = BehaviorTrainConfig(steps=600, batch_size=128, lr=3e-3, ema_decay=0.99,
                                  log_interval=50, ckpt_interval=300)
        seen = []
        curve = train_behavior(net, data, config=cfg, out_dir=tmp_path,
                               callback=lambda step, m: seen.append(step))
        assert curve[-1][1] < curve[0][1]
        assert seen == [300, 600]
        assert (tmp_path / "behavior.npz").exists() and (tmp_path / "loss_curve.csv").exists()
        assert (tmp_path / "behavior_0000300.npz").exists()
        back = BehaviorNet.load(tmp_path / "behavior.npz")
        np.testing.assert_array_equal(back.forward(data[:3], None, 0.5), net.forward(data[:3], None, 0.5))
        assert all(not np.array_equal(before[k], v) for k, v in net.params.items())

    def test_same_seed_same_weights(self):
        data = np.random.default_rng(1).standard_normal((500, 2))
        cfg = BehaviorTrainConfig(steps=20, batch_size=32)
        a, b = small_net(), small_net()
        train_behavior(a, data, config=cfg)
        train_behavior(b, data, config=cfg)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_behavior(small_net(), np.zeros((0, 2)))


class TestLogDensity:
    def test_exact_gaussian_model(self):
        model = MixtureNoiseModel(STD_NORMAL)
        x = np.random.default_rng(0).standard_normal((20, 2)) * 1.5
        ld = log_density(model, x, ode_steps=100)
        ref = -0.5 * np.sum(x**2, 1) - np.log(2 * np.pi)
        np.testing.assert_allclose(ld, ref, atol=1e-6)

    @pytest.mark.parametrize("t_eval", [0.02, 0.3])
    def test_exact_mixture_model(self, t_eval):
        # zero-mean mixture: its t = 1 marginal is N(0, I) up to O(alpha_1^2)
        gm = GaussianMixture([0.5, 0.5], [[-1.0, 0.5], [1.0, -0.5]], [0.25, 0.25])
        x = np.random.default_rng(1).standard_normal((10, 2))
        ld = log_density(MixtureNoiseModel(gm), x, t_eval=t_eval, ode_steps=200)
        np.testing.assert_allclose(ld, diffused_mixture_logpdf(gm, x, t_eval), atol=2e-4)

    def test_terminal_time_is_standard_normal(self):
        x = np.array([[0.0, 0.0], [1.0, 2.0]])
        np.testing.assert_allclose(log_density(small_net(), x, t_eval=1.0),
                                   -0.5 * np.sum(x**2, 1) - np.log(2 * np.pi))

    def test_rejects_coarse_ode(self):
        with pytest.raises(ValueError):
            log_density(small_net(), np.zeros((1, 2)), ode_steps=10)

    def test_non_finite_flow_raises(self):
        class Blowup:
            action_dim, state_dim = 2, 0

            def noise_divergence(self, a, s, t):
                return np.full_like(a, np.inf), np.zeros(len(a))

        with pytest.raises(NumericError, match="t="), np.errstate(invalid="ignore"):
            log_density(Blowup(), np.zeros((1, 2)))


class TestDensityGrid:
    def test_exact_gaussian_grid_normalises(self):
        grid = density_grid(MixtureNoiseModel(STD_NORMAL), resolution=(30, 30), ode_steps=50)
        # N(0, I) mass inside [-4.5, 4.5]^2 is 1 - 1.4e-5
        assert grid.values.shape == (30, 30)
        np.testing.assert_allclose(grid.integral(), 1.0, atol=2e-3)

    def test_csv_round_trip(self, tmp_path):
        grid = DensityGrid((-1.0, 1.0, -2.0, 2.0), (3, 2), np.arange(6.0).reshape(2, 3), 0.1)
        back = DensityGrid.from_csv(grid.to_csv(tmp_path / "g.csv"))
        np.testing.assert_array_equal(back.values, grid.values)
        assert back.bounds == grid.bounds and back.resolution == (3, 2) and back.diffusion_time == 0.1
        pts = grid.points()
        assert pts.shape == (6, 2)
        np.testing.assert_allclose(pts[1], [0.0, -1.0])

    def test_total_variation_of_planes(self):
        xs = np.arange(4.0)
        grid = DensityGrid((0, 4, 0, 3), (4, 3), np.tile(xs, (3, 1)), 0.0)
        # three unit steps along x on each of three rows
        assert grid.total_variation() == 9.0
        flat = DensityGrid((0, 4, 0, 3), (4, 3), np.zeros((3, 4)), 0.0)
        assert flat.total_variation() == 0.0

    def test_png(self, tmp_path):
        grid = DensityGrid((-1, 1, -1, 1), (4, 4), np.zeros((4, 4)), 0.02)
        path = grid.render_png(tmp_path / "g.png", scatter=np.zeros((2, 2)))
        assert path.stat().st_size > 0

    def test_only_two_dimensional(self):
        net = BehaviorNet(3, width=8, n_blocks=1)
        with pytest.raises(ValueError):
            density_grid(net)
