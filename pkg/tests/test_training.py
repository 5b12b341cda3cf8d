"""Training loop: optimiser, evaluation, lambda alternation, run records."""

import csv
import json
import math

import numpy as np
import pytest

from signagg.data import toy_two_gaussians
from signagg.forward import expected_linear_loss_exact
from signagg.network import NetworkSpec, init_posterior
from signagg.rng import DATA, EVAL, substream
from signagg.training import (
    CSV_COLUMNS,
    Adam,
    ConfigError,
    TrainConfig,
    evaluate,
    linear_loss,
    train_run,
    write_rows_csv,
)


@pytest.fixture(scope="module")
def toy_data():
    train = toy_two_gaussians(512, substream(1234, DATA, 0))
    test = toy_two_gaussians(256, substream(1234, DATA, 1))
    return train, test


def _toy_config(**overrides):
    base = dict(
        objective="fix_lambda",
        widths=(2, 6, 1),
        hidden_activation="sign",
        learning_rate=0.05,
        train_samples=8,
        batch_size=64,
        epochs=4,
        eval_every=2,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestLinearLoss:
    def test_endpoint_values(self):
        np.testing.assert_array_equal(
            linear_loss(np.array([1.0, -1.0, 0.0]), np.array([1.0, 1.0, 1.0])),
            [0.0, 1.0, 0.5],
        )

    def test_matches_01_on_signs(self):
        rng = np.random.default_rng(42)
        signs = np.where(rng.random(50) < 0.5, -1.0, 1.0)
        y = np.where(rng.random(50) < 0.5, -1.0, 1.0)
        np.testing.assert_array_equal(linear_loss(signs, y), (signs != y).astype(float))


class TestAdam:
    def test_first_step_closed_form(self):
        """After one step from rest, Adam moves by -lr * g / (|g| + eps)."""
        rng = np.random.default_rng(42)
        p = rng.standard_normal(20)
        g = rng.standard_normal(20)
        expected = p - 0.01 * g / (np.abs(g) + 1e-8)
        opt = Adam([p], lr=0.01)
        opt.step([g.copy()])
        np.testing.assert_allclose(p, expected, rtol=1e-12)

    def test_zero_gradient_is_fixed_point(self):
        p = np.array([1.0, -2.0, 3.0])
        opt = Adam([p], lr=0.5)
        for _ in range(3):
            opt.step([np.zeros(3)])
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_updates_all_param_arrays(self):
        a, b = np.zeros(3), np.zeros((2, 2))
        opt = Adam([a, b], lr=0.1)
        opt.step([np.ones(3), np.ones((2, 2))])
        assert np.all(a != 0.0)
        assert np.all(b != 0.0)


class TestTrainConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError) as excinfo:
            TrainConfig.from_dict({"objective": "fix_lambda", "leaning_rate": 0.1})
        assert "leaning_rate" in str(excinfo.value)

    def test_round_trips_through_dict(self):
        cfg = _toy_config()
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            _toy_config(objective="sgd")
        with pytest.raises(ConfigError):
            _toy_config(learning_rate=-1.0)
        with pytest.raises(ConfigError):
            _toy_config(epochs=0)
        with pytest.raises(ConfigError):
            _toy_config(delta=2.0)
        with pytest.raises(ConfigError):
            _toy_config(objective="mlp", hidden_activation="sign")

    def test_eval_samples_defaults_to_train_samples(self):
        assert _toy_config(train_samples=7).eval_t == 7
        assert _toy_config(train_samples=7, eval_samples=50).eval_t == 50


class TestEvaluate:
    def test_matches_enumeration_on_small_network(self, toy_data):
        train, _ = toy_data
        spec = NetworkSpec(widths=(2, 4, 1), hidden_activation="sign")
        post = init_posterior(spec, substream(5, 0))
        small_inputs = train.inputs[:64]
        small_labels = train.labels[:64]
        from signagg.data import Dataset

        ds = Dataset(small_inputs, small_labels)
        result = evaluate(post, ds, 400, substream(5, EVAL, 0, 0))
        exact = expected_linear_loss_exact(post, small_inputs, small_labels)
        assert abs(result["linear"] - exact) < 0.03

    def test_majority_vote_optional(self, toy_data):
        train, _ = toy_data
        spec = NetworkSpec(widths=(2, 3, 1), hidden_activation="sign")
        post = init_posterior(spec, substream(6, 0))
        plain = evaluate(post, train, 8, substream(6, EVAL, 0, 0))
        assert math.isnan(plain["mv01"])
        voted = evaluate(post, train, 8, substream(6, EVAL, 0, 0), majority_vote=True)
        assert 0.0 <= voted["mv01"] <= 1.0


class TestTrainRun:
    def test_bitwise_deterministic(self, toy_data):
        train, test = toy_data
        a = train_run(_toy_config(), train, test)
        b = train_run(_toy_config(), train, test)
        da, db = a.record.to_dict(), b.record.to_dict()
        da.pop("wall_time_s")
        db.pop("wall_time_s")
        assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)
        for wa, wb in zip(a.final_posterior.weights, b.final_posterior.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_learning_rate_never_increases(self, toy_data):
        train, test = toy_data
        result = train_run(_toy_config(epochs=8, eval_every=1), train, test)
        lrs = [row.lr for row in result.record.rows]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_plateau_halves_learning_rate(self, toy_data):
        """With a vanishing learning rate the bound cannot improve, so the
        halving rule must fire within a few evaluations."""
        train, test = toy_data
        cfg = _toy_config(learning_rate=1e-12, epochs=8, eval_every=1)
        result = train_run(cfg, train, test)
        assert result.record.rows[-1].lr < 1e-12

    def test_fix_lambda_keeps_lambda_at_m(self, toy_data):
        train, test = toy_data
        events = []
        cfg = _toy_config(epochs=1)
        train_run(cfg, train, test, on_batch=lambda *args: events.append(args))
        assert all(kind == "params" for _, _, kind, _ in events)
        assert all(lam == float(len(train)) for _, _, _, lam in events)

    def test_optim_lambda_alternates_batches(self, toy_data):
        """Odd minibatches move lambda only; even minibatches move the
        means only, with lambda frozen in between."""
        train, test = toy_data
        events = []
        cfg = _toy_config(objective="optim_lambda", epochs=2)
        result = train_run(cfg, train, test, on_batch=lambda *args: events.append(args))
        for _, b_idx, kind, _ in events:
            assert kind == ("lambda" if b_idx % 2 == 1 else "params")
        lam_after_params = [lam for _, _, kind, lam in events if kind == "params"]
        lam_after_lambda = [lam for _, _, kind, lam in events if kind == "lambda"]
        # params steps never move lambda: each equals the latest lambda value
        changes = {round(v, 15) for v in lam_after_params}
        assert changes <= {round(float(len(train)), 15)} | {
            round(v, 15) for v in lam_after_lambda
        }
        assert result.record.final_lambda == lam_after_lambda[-1]

    def test_early_termination_flagged(self, toy_data):
        """A reinforce run that cannot learn crosses the loss threshold at
        the checkpoint epoch and stops there."""
        train, test = toy_data
        cfg = _toy_config(
            objective="reinforce",
            learning_rate=1e-9,
            epochs=12,
            eval_every=1,
            early_stop_epoch=3,
            train_samples=4,
        )
        result = train_run(cfg, train, test)
        assert result.record.terminated_early
        assert result.record.rows[-1].epoch == 3

    def test_pathwise_objectives_train(self, toy_data):
        train, test = toy_data
        for activation in ("sigmoid", "relu"):
            cfg = _toy_config(hidden_activation=activation, epochs=2, eval_every=2)
            result = train_run(cfg, train, test)
            assert len(result.record.rows) == 1
            assert result.record.backend in ("numpy", "numba")

    def test_best_epoch_selected_by_bound(self, toy_data):
        train, test = toy_data
        result = train_run(_toy_config(epochs=6, eval_every=2), train, test)
        record = result.record
        assert record.selected_by == "bound"
        best = min(
            (row for row in record.rows if row.bound < 1.0), key=lambda r: r.bound
        )
        assert record.best_epoch == best.epoch
        np.testing.assert_allclose(record.best_row["bound"], best.bound)
        assert result.best_posterior is not None

    def test_training_reduces_bound(self, toy_data):
        """On the separable toy task a short run must tighten the certificate
        well below coin-flipping."""
        train, test = toy_data
        result = train_run(_toy_config(epochs=10, eval_every=5), train, test)
        assert result.record.best_row["bound"] < 0.5


class TestMlpBaseline:
    def test_trains_and_selects_by_loss(self, toy_data):
        train, test = toy_data
        cfg = _toy_config(objective="mlp", hidden_activation="relu", epochs=6)
        result = train_run(cfg, train, test)
        record = result.record
        assert record.selected_by == "train_linear"
        assert len(record.rows) == 6  # the baseline evaluates every epoch
        assert record.rows[-1].train_linear < record.rows[0].train_linear
        assert math.isnan(record.rows[0].kl)
        assert math.isnan(record.rows[0].bound)
        assert result.best_posterior is None

    def test_deterministic(self, toy_data):
        train, test = toy_data
        cfg = _toy_config(objective="mlp", hidden_activation="relu", epochs=2)
        a = train_run(cfg, train, test)
        b = train_run(cfg, train, test)
        assert a.record.rows[-1].train_linear == b.record.rows[-1].train_linear


class TestRowsCsv:
    def test_schema_and_nan_handling(self, toy_data, tmp_path):
        train, test = toy_data
        cfg = _toy_config(objective="mlp", hidden_activation="relu", epochs=2)
        rows = train_run(cfg, train, test).record.rows
        path = tmp_path / "rows.csv"
        write_rows_csv(rows, path)
        with open(path, newline="") as fh:
            parsed = list(csv.reader(fh))
        assert parsed[0] == list(CSV_COLUMNS)
        assert len(parsed) == 3
        header = parsed[0]
        assert parsed[1][header.index("kl")] == ""  # nan written as empty
        assert float(parsed[1][header.index("train_linear")]) == rows[0].train_linear

    def test_float_round_trip_is_exact(self, toy_data, tmp_path):
        train, test = toy_data
        rows = train_run(_toy_config(), train, test).record.rows
        path = tmp_path / "rows.csv"
        write_rows_csv(rows, path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            parsed = list(reader)
        for row, raw in zip(rows, parsed):
            assert float(raw["bound"]) == row.bound
            assert float(raw["lambda"]) == row.lam
