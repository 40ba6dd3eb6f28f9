import json

import numpy as np
import pytest

from pgits import autodiff as ad
from pgits import training as tr
from pgits.autodiff import Tensor
from pgits.data import KrigingData, WindowBatch
from pgits.errors import DataError, ParameterError
from pgits.evaluation import validation_mae
from pgits.model import GraphContext, ModelConfig, init_params
from pgits.stations import virtual_count
from fd_oracle import numeric_grad

TINY = ModelConfig(layers=1, feature_dim=4, window=24, windfield_hidden=2)


def toy(seed=0, n=4, t=3):
    rng = np.random.default_rng(seed)
    w = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]], float)[:n, :n]
    batch = WindowBatch(rng.normal(size=(t, n)), np.ones((t, n), bool), rng.normal(size=(t, n, 2)), np.arange(t))
    cfg = ModelConfig(layers=2, feature_dim=3, window=t, windfield_hidden=2)
    params = init_params(cfg, seed, zero_readout=False)
    return GraphContext.from_graph(w), batch, cfg, params


def fake_ncr(phase1, phase2, mask):
    p1 = Tensor(np.asarray(phase1, float))
    return tr.NcrOutput(p1, ad.where(~mask, p1, 0.0), Tensor(np.asarray(phase2, float)), ~mask)


# -- NCR ---------------------------------------------------------------------------

@pytest.mark.parametrize("visible", [[1, 1, 1, 1], [0, 0, 0, 0], [1, 0, 0, 1]])
def test_pseudo_input_identity(visible):
    ctx, batch, cfg, params = toy()
    out = tr.ncr_pass(batch.with_mask(np.array(visible, bool)), ctx, params, cfg)
    hidden = ~np.array(visible, bool)
    expected = np.where(hidden[None, :], out.phase1.data, 0.0)
    assert np.array_equal(out.pseudo_input.data, expected)
    if all(visible):
        assert np.all(out.pseudo_input.data == 0)
    if not any(visible):
        assert np.array_equal(out.pseudo_input.data, out.phase1.data)
    assert np.array_equal(out.inverse_mask, np.broadcast_to(hidden, out.inverse_mask.shape))


def test_phase_two_sees_inverse_mask():
    ctx, batch, cfg, params = toy(1)
    b = batch.with_mask(np.array([1, 0, 1, 0], bool))
    out = tr.ncr_pass(b, ctx, params, cfg)
    from pgits.model import forward
    swapped = WindowBatch(b.values, np.ones_like(b.available), b.wind, b.hours, ~b.mask)
    again = forward(swapped, ctx, params, cfg, x=out.pseudo_input)
    assert np.allclose(again.data, out.phase2.data)


# -- losses ----------------------------------------------------------------------------

def hand_batch():
    values = np.array([[1.0, 5.0, 0.0, 0.0]])
    return WindowBatch(values, np.ones((1, 4), bool), np.zeros((1, 4, 2)), np.arange(1)).with_mask(
        np.array([1, 1, 0, 0], bool))


def test_supervised_loss_hand_case():
    batch = hand_batch()
    ncr = fake_ncr([[2.0, 2.0, 7.0, 7.0]], [[4.0, 0.0, 9.0, 5.0]], batch.mask)
    # observed errors (1, 3) -> 2; phase-2 gaps (2, 2, 2, 2) -> 2
    assert tr.supervised_loss(ncr, batch, 1.0).item() == pytest.approx(4.0)
    assert tr.supervised_loss(ncr, batch, 0.0).item() == pytest.approx(2.0)


def test_supervised_loss_zero_when_consistent():
    batch = hand_batch()
    ncr = fake_ncr(batch.values, batch.values, batch.mask)
    assert tr.supervised_loss(ncr, batch, 1.0).item() == 0.0


def test_supervised_loss_needs_observed_entries():
    batch = hand_batch().with_mask(np.zeros(4, bool))
    ncr = fake_ncr(batch.values, batch.values, batch.mask)
    with pytest.raises(DataError):
        tr.supervised_loss(ncr, batch, 1.0)


def test_labelled_widens_supervision():
    batch = hand_batch()
    ncr = fake_ncr([[2.0, 2.0, 7.0, 7.0]], [[2.0, 2.0, 7.0, 7.0]], batch.mask)
    wide = np.ones((1, 4), bool)
    # errors (1, 3, 7, 7)
    assert tr.supervised_loss(ncr, batch, 1.0, labelled=wide).item() == pytest.approx(4.5)


def test_continuity_loss_cases():
    assert tr.physics_continuity_loss(Tensor(np.ones((4, 3)))).item() == 0.0
    assert tr.physics_continuity_loss(Tensor(np.array([[0.0, 2.0], [1.0, 3.0]]))).item() == 1.0
    three = Tensor(np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]]))
    assert tr.physics_continuity_loss(three).item() == pytest.approx(2.5)
    with pytest.raises(ParameterError):
        tr.physics_continuity_loss(Tensor(np.ones((1, 3))))


def test_total_loss_arithmetic():
    assert tr.total_loss(4.0, 2.5, 0.1) == pytest.approx(4.25)
    assert tr.total_loss(4.0, 2.5, 0.0) == 4.0


def test_objective_gradient_is_linear_in_beta():
    with ad.precision(np.float64):
        ctx, batch, cfg, params = toy(2)
        batch = batch.with_mask(np.array([1, 1, 0, 1], bool))
        labels = tr.ncr_pass(batch, ctx, params, cfg).phase1.detach()
        p = params["embed.w"]

        def grad(beta):
            for q in params.values():
                q.grad = None
            tr.objective(batch, ctx, params, cfg, 1.0, beta, pseudo_labels=labels)[0].backward()
            return p.grad.copy()

        g0, g1 = grad(0.0), grad(1.0)
        loss, sup, phy, _ = tr.objective(batch, ctx, params, cfg, 1.0, 0.3, pseudo_labels=labels)
        assert loss.item() == sup.item() + 0.3 * phy.item()
        assert np.allclose(grad(0.3), g0 + 0.3 * (g1 - g0), atol=1e-12)
        fd = numeric_grad(lambda: tr.objective(batch, ctx, params, cfg, 1.0, 0.3, pseudo_labels=labels)[0].item(),
                          p.data, 1e-6)
        assert np.allclose(grad(0.3), fd, rtol=1e-5, atol=1e-7)


def test_hide_labelled():
    mask = np.array([1, 1, 1, 1, 0, 0], bool)
    out = tr.hide_labelled(mask, 0.5, 3)
    assert out.sum() == 2 and not (out & ~mask).any()
    assert np.array_equal(tr.hide_labelled(mask, 0.0, 3), mask)
    assert tr.hide_labelled(np.array([1, 0], bool), 0.9, 0).sum() == 1


def test_train_config_validation():
    c = tr.TrainConfig()
    assert (c.alpha, c.batch_size, c.lr, c.lam, c.beta) == (0.5, 32, 2e-4, 1.0, 0.05)
    for bad in (dict(alpha=1.0), dict(lam=-1), dict(beta=-0.1), dict(patience=-1), dict(hide_real=1.0)):
        with pytest.raises(ParameterError):
            tr.TrainConfig(**bad)


# -- training loop -------------------------------------------------------------------

@pytest.fixture(scope="module")
def kd(small_table, small_stations):
    return KrigingData.prepare(small_table, small_stations, seed=0, stride=12)


def quick(kd, tmp=None, **kw):
    cfg = tr.TrainConfig(**{"max_epochs": 2, "patience": 5, "batch_size": 8, "lr": 1e-3, **kw})
    paths = {} if tmp is None else {"log_path": tmp / "log.jsonl", "checkpoint_path": tmp / "ck.bin"}
    return tr.train(kd, cfg, TINY, **paths)


def test_patience_zero_runs_one_epoch(kd):
    assert len(quick(kd, patience=0).log) == 1


def test_training_graph_size_matches_inference(kd):
    res = quick(kd, max_epochs=1)
    n_obs = len(kd.nodes.observed)
    assert set(res.graph_sizes) == {n_obs + virtual_count(n_obs, 0.5)}
    assert res.inference_nodes == kd.graph.n_nodes == 12 == res.graph_sizes[0]


def test_training_is_deterministic(kd, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = quick(kd, tmp_path / "a")
    b = quick(kd, tmp_path / "b")
    assert (tmp_path / "a/log.jsonl").read_text() == (tmp_path / "b/log.jsonl").read_text()
    assert (tmp_path / "a/ck.bin").read_bytes() == (tmp_path / "b/ck.bin").read_bytes()
    assert a.best_val_mae == b.best_val_mae


def test_log_records_and_best_checkpoint(kd, tmp_path):
    res = quick(kd, tmp_path, max_epochs=3)
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"epoch", "train_loss", "sup_loss", "phy_loss", "val_mae", "mu"}
    assert res.best_val_mae == min(r["val_mae"] for r in rows)
    # returned parameters are the best ones and reproduce the logged score
    assert validation_mae(kd, res.params, TINY) == pytest.approx(res.best_val_mae, abs=1e-6)
    saved = ad.load_checkpoint(tmp_path / "ck.bin")
    assert all(np.array_equal(saved[k], v.data) for k, v in res.params.items())


def test_single_step_moves_parameters(kd):
    before = {k: v.data.copy() for k, v in init_params(TINY, tr.derived_seed(0, 0)).items()}
    res = quick(kd, max_epochs=1)
    assert any(not np.array_equal(before[k], v.data) for k, v in res.params.items())


def test_empty_validation_split(small_table, small_stations):
    from pgits.data import SplitSpec
    kd0 = KrigingData.prepare(small_table, small_stations, split=SplitSpec(val_fraction=0.0))
    assert len(kd0.nodes.val) == 0
    with pytest.raises(DataError, match="validation"):
        quick(kd0)
