import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import central_difference, relative_error
from setbayes.errors import InvalidSplit
from setbayes.ggp import (
    GgpConfig,
    GgpOutput,
    assemble_covariance,
    ggp_forward,
    ggp_nll,
    ggp_nll_gradient,
    ggp_predict,
    init_ggp,
    make_tasks,
    nll_output_grads,
    train_ggp,
)
from setbayes.harness.benchmarks import generate_regression_dataset, step_function
from setbayes.numerics import Rng, mlp_forward

TINY = GgpConfig(rank=2, hidden=(5,), self_width=3, int_width=3, data_width=3)


def tiny_params(seed, x_dim=1, shift=0.0, scale=1.0):
    p = init_ggp(x_dim, Rng(seed), TINY, shift, scale)
    for a in p.arrays():
        a += 0.1 * Rng(seed, 1, a.size).normal(a.shape)
    return p


class TestCovariance:
    def test_zero_heads_identity(self):
        out = GgpOutput(np.zeros(3), np.zeros((3, 2)), np.zeros(3))
        np.testing.assert_array_equal(assemble_covariance(out), np.eye(3))

    def test_rank_one(self):
        out = GgpOutput(np.zeros(2), np.ones((2, 1)), np.zeros(2))
        np.testing.assert_array_equal(assemble_covariance(out), [[2.0, 1.0], [1.0, 2.0]])

    def test_min_eigenvalue_bound(self):
        for seed in range(100):
            r = Rng(seed)
            n = 1 + seed % 10
            out = GgpOutput(r.normal(n), r.normal((n, 3)), r.normal(n))
            K = assemble_covariance(out)
            np.testing.assert_array_equal(K, K.T)
            assert np.linalg.eigvalsh(K).min() >= np.exp(out.log_diag).min() - 1e-10


class TestNll:
    def test_scalar(self):
        out = GgpOutput(np.array([0.3]), np.zeros((1, 1)), np.zeros(1))
        assert ggp_nll(out, np.array([0.3])) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_zero_residual(self, rng):
        out = GgpOutput(rng.normal(4), rng.normal((4, 2)), rng.normal(4))
        K = assemble_covariance(out)
        want = 0.5 * np.linalg.slogdet(K)[1] + 2 * math.log(2 * math.pi)
        assert ggp_nll(out, out.mean) == pytest.approx(want, abs=1e-10)

    def test_matches_mvn(self, rng):
        out = GgpOutput(rng.normal(5), rng.normal((5, 3)), rng.normal(5))
        y = rng.normal(5)
        oracle = -multivariate_normal(out.mean, assemble_covariance(out)).logpdf(y)
        assert ggp_nll(out, y) == pytest.approx(oracle, abs=1e-10)

    def test_zero_residual_mean_gradient(self):
        out = GgpOutput(np.ones(3), np.zeros((3, 1)), np.zeros(3))
        _, g_mean, _, _ = nll_output_grads(out, np.ones(3))
        np.testing.assert_array_equal(g_mean, 0.0)

    def test_scalar_log_diag_gradient(self):
        d, r = 0.4, 1.3
        out = GgpOutput(np.array([0.0]), np.zeros((1, 1)), np.array([d]))
        _, _, _, g_logd = nll_output_grads(out, np.array([r]))
        assert g_logd[0] == pytest.approx(0.5 * (1 - r**2 / math.exp(d)), abs=1e-12)

    def test_output_gradients(self, rng):
        out = GgpOutput(rng.normal(4), rng.normal((4, 2)), rng.normal(4))
        y = rng.normal(4)
        _, gm, gl, gd = nll_output_grads(out, y)
        numeric = central_difference(lambda: ggp_nll(out, y), [out.mean, out.low_rank, out.log_diag])
        assert relative_error([gm, gl, gd], numeric) < 1e-4


class TestForward:
    def test_context_permutation_invariance_and_test_equivariance(self):
        for seed in range(100):
            r = Rng(seed)
            p = tiny_params(seed, x_dim=1 + seed % 2)
            d = p.x_dim
            cx, cy, xs = r.uniform((1 + seed % 9, d)), r.normal(1 + seed % 9), r.uniform((1 + seed % 7, d))
            base, _ = ggp_forward(p, xs, cx, cy)
            c = r.permutation(len(cy))
            same, _ = ggp_forward(p, xs, cx[c], cy[c])
            for a, b in [(same.mean, base.mean), (same.low_rank, base.low_rank), (same.log_diag, base.log_diag)]:
                assert np.max(np.abs(a - b)) <= 1e-10
            s = r.permutation(xs.shape[0])
            moved, _ = ggp_forward(p, xs[s], cx, cy)
            assert np.max(np.abs(moved.mean - base.mean[s])) <= 1e-10
            assert np.max(np.abs(moved.low_rank - base.low_rank[s])) <= 1e-10
            assert np.max(np.abs(moved.log_diag - base.log_diag[s])) <= 1e-10

    def test_single_test_point_hand_chain(self):
        p = tiny_params(3, shift=0.5, scale=2.0)
        xs, cx, cy = np.array([[0.2]]), np.array([[0.1], [0.7]]), np.array([1.0, -1.0])
        out, _ = ggp_forward(p, xs, cx, cy)
        emb, _ = mlp_forward(p.data_net, np.column_stack([cx, (cy - 0.5) / 2.0]))
        s, _ = mlp_forward(p.self_net, xs)
        t, _ = mlp_forward(p.int_net, xs)
        raw, _ = mlp_forward(p.fit_net, np.concatenate([s, t, emb.mean(axis=0)[None]], axis=-1))
        assert out.mean[0] == pytest.approx(0.5 + 2.0 * raw[0, 0], abs=1e-14)
        np.testing.assert_allclose(out.low_rank[0], 2.0 * raw[0, 1:3], atol=1e-14)
        assert out.log_diag[0] == pytest.approx(raw[0, 3] + 2 * math.log(2.0), abs=1e-14)

    @pytest.mark.parametrize("n", [1, 7, 1000])
    def test_output_shapes(self, n, rng):
        p = tiny_params(0)
        out, _ = ggp_forward(p, rng.uniform((n, 1)), rng.uniform((4, 1)), rng.normal(4))
        assert out.mean.shape == (n,) and out.low_rank.shape == (n, 2) and out.log_diag.shape == (n,)

    def test_predict_permutations(self, rng):
        p = tiny_params(1)
        X, Y, xs = rng.uniform((8, 1)), rng.normal(8), rng.uniform((5, 1))
        base = ggp_predict(p, X, Y, xs)
        perm = rng.permutation(8)
        same = ggp_predict(p, X[perm], Y[perm], xs)
        np.testing.assert_allclose(same.covariance, base.covariance, atol=1e-10)
        s = rng.permutation(5)
        moved = ggp_predict(p, X, Y, xs[s])
        np.testing.assert_allclose(moved.covariance, base.covariance[np.ix_(s, s)], atol=1e-10)
        np.testing.assert_allclose(moved.mean, base.mean[s], atol=1e-10)


class TestGradient:
    @pytest.mark.parametrize("x_dim", [1, 2])
    def test_full_pipeline(self, x_dim):
        r = Rng(x_dim)
        p = tiny_params(7, x_dim, shift=0.2, scale=1.5)
        X, Y = r.uniform((9, x_dim)), r.normal(9)
        task = make_tasks(X, Y, 4, 1, r)[0]
        _, grads = ggp_nll_gradient(p, task)
        numeric = central_difference(lambda: ggp_nll_gradient(p, task)[0], p.arrays())
        assert relative_error(grads, numeric) < 1e-4


class TestTasks:
    def test_sparse_split(self, rng):
        X, Y = rng.uniform(30), rng.normal(30)
        for t in make_tasks(X, Y, 20, 50, rng):
            assert len(t.target_idx) == 20 and len(t.context_idx) == 10
            assert not set(t.target_idx) & set(t.context_idx)

    def test_dense_split(self, rng):
        t = make_tasks(rng.uniform(100), rng.normal(100), 10, 1, rng)[0]
        assert len(t.target_idx) == 10 and len(t.context_idx) == 90

    def test_invalid_split(self, rng):
        with pytest.raises(InvalidSplit):
            make_tasks(rng.uniform(5), rng.normal(5), 5, 1, rng)

    def test_task_count(self, rng):
        assert len(make_tasks(rng.uniform(30), rng.normal(30), 20, 2000, rng)) == 2000


@pytest.fixture(scope="module")
def step_data():
    return generate_regression_dataset(step_function, 1, 0.01, Rng(0), count=30)


class TestTraining:
    CONFIG = GgpConfig(rank=4, hidden=(16,), self_width=8, int_width=8, data_width=8, n_tasks=640, epochs=8)

    def test_zero_epochs_returns_init(self, step_data):
        cfg = GgpConfig(**{**self.CONFIG.__dict__, "epochs": 0})
        params, history = train_ggp(step_data.X, step_data.Y, cfg, Rng(5))
        init = init_ggp(1, Rng(5).spawn(0), cfg, params.y_shift, params.y_scale)
        for a, b in zip(params.arrays(), init.arrays()):
            np.testing.assert_array_equal(a, b)
        assert history["step"] == []

    def test_deterministic(self, step_data):
        cfg = GgpConfig(**{**self.CONFIG.__dict__, "epochs": 1, "n_tasks": 128})
        a, _ = train_ggp(step_data.X, step_data.Y, cfg, Rng(5))
        b, _ = train_ggp(step_data.X, step_data.Y, cfg, Rng(5))
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_smoothed_loss_decreases(self, step_data):
        _, history = train_ggp(step_data.X, step_data.Y, self.CONFIG, Rng(5))
        steps = np.array(history["step"])
        blocks = steps[: len(steps) // 10 * 10].reshape(-1, 10).mean(axis=1)
        assert blocks[-1] < blocks[0]
        smooth = np.convolve(steps, np.ones(50) / 50, mode="valid")
        assert smooth[-1] < smooth[0]

    def test_covariance_stage_moves_only_head(self, step_data):
        cfg = GgpConfig(**{**self.CONFIG.__dict__, "epochs": 1, "n_tasks": 128})
        params, _ = train_ggp(step_data.X, step_data.Y, cfg, Rng(5))
        before = params.copy()
        stage2 = GgpConfig(**{**cfg.__dict__, "epochs": 0, "covariance_epochs": 1})
        train_ggp(step_data.X, step_data.Y, stage2, Rng(6), params=params)
        head = len(params.operator.arrays()) - 2
        for k, (a, b) in enumerate(zip(before.arrays(), params.arrays())):
            if k < head or k > head + 1:
                np.testing.assert_array_equal(a, b)
        assert not np.array_equal(before.arrays()[head], params.arrays()[head])
        np.testing.assert_array_equal(before.arrays()[head][:, 0], params.arrays()[head][:, 0])
        xs = np.linspace(0, 1, 11)
        m1 = ggp_predict(before, step_data.X, step_data.Y, xs, full_cov=False).mean
        m2 = ggp_predict(params, step_data.X, step_data.Y, xs, full_cov=False).mean
        np.testing.assert_array_equal(m1, m2)
