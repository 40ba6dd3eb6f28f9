import time

import numpy as np
import pytest

from pgits import autodiff as ad
from pgits.gradcheck import relative_error, run_gradcheck, toy_problem
from pgits.model import ModelConfig, init_params


def test_toy_problem_shape():
    with ad.precision(np.float64):
        graph, batch = toy_problem(0)
    assert graph.n_nodes == 4 and graph.n_virtual == 1
    assert batch.values.shape == (6, 4)
    assert not batch.mask[:, 3].any() and np.all(batch.x[~batch.mask] == 0)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-3)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_loss_gradient_matches_finite_differences(seed):
    t0 = time.perf_counter()
    res = run_gradcheck(seed=seed)
    assert time.perf_counter() - t0 < 10
    assert res.max_rel_error < 1e-3, res.per_param
    n_params = sum(p.data.size for p in init_params(ModelConfig(layers=2, feature_dim=4, window=6), 0).values())
    assert res.n_checked == n_params


def test_gradcheck_detects_wrong_gradient(monkeypatch):
    # a broken backward rule must show up as a large error
    from pgits import autodiff
    orig = autodiff.Tensor.relu

    def leaky(self):
        out = orig(self)
        back = out._backward

        def wrong(g):
            return [1.5 * pg for pg in back(g)]
        out._backward = wrong
        return out

    monkeypatch.setattr(autodiff.Tensor, "relu", leaky)
    assert run_gradcheck(seed=0).max_rel_error > 1e-2
