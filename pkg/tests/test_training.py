import csv
import math

import numpy as np
import pytest

from conftest import full_batch_rmse, overfit_toy_set
from fcdcast.data import ValidationError
from fcdcast.featurize import ReducedInputSpec, build_batch, enumerate_samples
from fcdcast.models import ModelSpec, build_model
from fcdcast.nn import quadratic_loss
from fcdcast.training import (
    ArrayDataset,
    TrainConfig,
    TrainingDiverged,
    grid_search,
    recalibrate_batchnorm,
    train,
    validate,
)


def fnn1(seed=0, hidden=16):
    return build_model(ModelSpec("fnn1", "reduced", hidden), np.random.default_rng(seed))


@pytest.fixture(scope="module")
def reduced_sets(small_panel):
    spec = ReducedInputSpec()
    anchors = enumerate_samples(small_panel, spec, stride=5)
    X, Y = build_batch(small_panel, spec, anchors)
    Y = Y.reshape(len(X), -1)
    cut = int(0.8 * len(X))
    return (X[:cut], Y[:cut]), (X[cut:], Y[cut:])


class Constant:
    def __init__(self, value):
        self.value = value

    def predict(self, X):
        return np.full((len(X), 3), self.value)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"t_mb": 1}, {"val_fraction": 0.0}, {"val_fraction": 1.0},
                                        {"eta0": 0.0}, {"lambda_l2": -1.0}, {"patience": 0},
                                        {"bn_recalibrate": -1}])
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)

    def test_dict_roundtrip_ignores_unknown(self):
        cfg = TrainConfig(t_mb=7, eta0=1e-2)
        assert TrainConfig.from_dict({**cfg.to_dict(), "colour": "red"}) == cfg


class TestValidate:
    def test_perfect_and_constant(self):
        X = np.zeros((4, 2))
        assert validate(Constant(0.5), (X, np.full((4, 3), 0.5))) == 0.0

    def test_kph_denormalization(self):
        X = np.zeros((4, 2))
        assert validate(Constant(0.0), (X, np.ones((4, 3))), ffs=65.0) == pytest.approx(65.0)

    def test_empty(self):
        with pytest.raises(ValidationError):
            validate(Constant(0.0), (np.zeros((0, 2)), np.zeros((0, 3))))


class TestOverfit:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_memorizes_ten_samples(self, seed):
        X, Y = overfit_toy_set(seed)
        model = build_model(ModelSpec("fnn1", "reduced", 32), np.random.default_rng(100 + seed))
        cfg = TrainConfig(t_mb=10, max_epochs=2000, lambda_l1=0.0, lambda_l2=0.0)
        model, log = train(model, (X, Y), None, cfg, rng=np.random.default_rng(200 + seed))
        assert len(log.iters) == 2000 and log.stop_reason == "max_epochs"
        assert full_batch_rmse(model, X, Y) < 0.01


class TestTrainLoop:
    def test_same_seed_same_everything(self, reduced_sets):
        cfg = TrainConfig(t_mb=20, max_epochs=60, val_every=20)
        runs = [train(fnn1(), reduced_sets[0], reduced_sets[1], cfg, rng=np.random.default_rng(3))
                for _ in range(2)]
        (ma, la), (mb, lb) = runs
        assert la.train_loss == lb.train_loss and la.val_rmse == lb.val_rmse
        for k, v in ma.state_dict().items():
            np.testing.assert_array_equal(v, mb.state_dict()[k])

    def test_loss_trends_down(self, reduced_sets):
        cfg = TrainConfig(t_mb=20, max_epochs=100, lambda_l1=0.0, lambda_l2=0.0)
        _, log = train(fnn1(), reduced_sets[0], None, cfg, rng=np.random.default_rng(0))
        slope = np.polyfit(log.iters, log.train_loss, 1)[0]
        assert slope < 0

    def test_logged_loss_excludes_the_penalty(self, reduced_sets):
        X, Y = reduced_sets[0]
        cfg = TrainConfig(t_mb=20, max_epochs=1, lambda_l1=10.0, lambda_l2=10.0, bn_recalibrate=0)
        _, log = train(fnn1(), (X, Y), None, cfg, rng=np.random.default_rng(9))
        idx = np.sort(np.random.default_rng(9).permutation(len(X))[:20])
        expected, _ = quadratic_loss(fnn1().forward(X[idx], train=True), Y[idx])
        assert log.train_loss[0] == pytest.approx(expected, rel=1e-12)

    def test_ridge_domination_shrinks_weights(self, reduced_sets):
        model = fnn1()
        cfg = TrainConfig(t_mb=20, max_epochs=1, eta0=1e-3, lambda_l1=0.0, lambda_l2=1e3, bn_recalibrate=0)
        rng = np.random.default_rng(0)

        def norm():
            return math.sqrt(sum(float(np.sum(w * w)) for _, w in model.weights()))

        norms, state = [norm()], None
        for _ in range(40):
            model, log = train(model, reduced_sets[0], None, cfg, rng=rng, optimizer_state=state)
            state = log.optimizer_state
            norms.append(norm())
        assert np.all(np.diff(norms) < 0)
        assert norms[-1] < 0.8 * norms[0]

    def test_resume_continues_the_optimizer(self, reduced_sets):
        cfg = TrainConfig(t_mb=20, max_epochs=5, alpha0=0.1)
        _, first = train(fnn1(), reduced_sets[0], None, cfg, rng=np.random.default_rng(0))
        assert first.optimizer_state["t"] == 5
        assert first.optimizer_state["eta"] == pytest.approx(cfg.eta0 * math.exp(-0.5))
        _, second = train(fnn1(), reduced_sets[0], None, cfg, rng=np.random.default_rng(0),
                          optimizer_state=first.optimizer_state)
        assert second.eta[0] == pytest.approx(first.optimizer_state["eta"])
        assert second.optimizer_state["t"] == 10

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            train(fnn1(), (np.zeros((5, 32)), np.zeros((5, 20))), None, TrainConfig(t_mb=10))

    def test_nan_input_aborts_with_state(self, reduced_sets):
        X, Y = reduced_sets[0]
        X = X.copy()
        X[:, 0] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train(fnn1(), (X, Y), None, TrainConfig(t_mb=20, max_epochs=5))
        err = info.value
        assert err.iteration == 0 and len(err.batch_indices) == 20
        assert "0.dense.theta" in err.state


class TestEarlyStopping:
    def test_best_checkpoint_is_restored(self, reduced_sets):
        cfg = TrainConfig(t_mb=20, max_epochs=400, eta0=1e-2, val_every=10, patience=3)
        model, log = train(fnn1(), reduced_sets[0], reduced_sets[1], cfg, rng=np.random.default_rng(1))
        assert log.best_val_rmse == min(log.val_rmse.values())
        assert log.val_rmse[log.best_iter] == log.best_val_rmse
        assert validate(model, reduced_sets[1]) == pytest.approx(log.best_val_rmse, rel=1e-12)

    def test_patience_counts_checks(self, reduced_sets):
        cfg = TrainConfig(t_mb=20, max_epochs=5000, eta0=1e-2, val_every=5, patience=2)
        _, log = train(fnn1(), reduced_sets[0], reduced_sets[1], cfg, rng=np.random.default_rng(1))
        assert log.stop_reason == "patience"
        checks = sorted(log.val_rmse)
        assert checks[-1] == log.iters[-1]
        assert checks.index(log.best_iter) == len(checks) - 3

    def test_csv_log(self, reduced_sets, tmp_path):
        cfg = TrainConfig(t_mb=20, max_epochs=6, val_every=3)
        _, log = train(fnn1(), reduced_sets[0], reduced_sets[1], cfg, rng=np.random.default_rng(0))
        path = tmp_path / "log.csv"
        log.write_csv(path)
        raw = path.read_bytes()
        assert b"\r" not in raw
        rows = list(csv.reader(raw.decode().splitlines()))
        assert rows[0] == ["iter", "train_loss", "val_rmse", "eta"]
        assert [r[0] for r in rows[1:]] == [str(i) for i in range(6)]
        assert rows[1][2] == "" and rows[3][2] != ""
        assert float(rows[3][2]) == log.val_rmse[2]


class TestRecalibration:
    def test_matches_exact_batch_statistics(self, rng):
        model = fnn1(hidden=4)
        X = rng.normal(size=(12, 32))
        model.forward(rng.normal(size=(12, 32)) * 5, train=True)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        recalibrate_batchnorm(model, (X, np.zeros((12, 20))), 3, 12, rng)
        bn = model.batchnorms()[0]
        h = model.layers[1].forward(model.layers[0].forward(X))
        np.testing.assert_allclose(bn.running_mean, h.mean(axis=0), atol=1e-12)
        for k, v in model.state_dict().items():
            if "running" not in k and not k.endswith("epoch"):
                np.testing.assert_array_equal(v, before[k])


class TestGridSearch:
    def make(self, cand):
        return fnn1(seed=0), TrainConfig(t_mb=20, max_epochs=80, val_every=20, lambda_l1=cand)

    def test_single_candidate(self, reduced_sets):
        (res,) = grid_search([1e-4], *reduced_sets, self.make)
        assert res.candidate == 1e-4 and res.index == 0

    def test_crippling_l1_ranks_last(self, reduced_sets):
        results = grid_search([1e3, 1e-4], *reduced_sets, self.make)
        assert [r.candidate for r in results] == [1e-4, 1e3]

    def test_ties_keep_candidate_order_and_repeat(self, reduced_sets):
        a = grid_search([1e-4, 1e-4], *reduced_sets, self.make)
        b = grid_search([1e-4, 1e-4], *reduced_sets, self.make)
        assert [r.index for r in a] == [0, 1]
        assert [r.val_rmse for r in a] == [r.val_rmse for r in b]

    def test_needs_a_candidate(self, reduced_sets):
        with pytest.raises(ValidationError):
            grid_search([], *reduced_sets, self.make)
