import copy

import numpy as np
import pytest

from lmmv.data.synth import generate
from lmmv.model import Batch
from lmmv.trainer import (Checkpoint, TrainConfig, Trainer, TrainingDiverged, apply_view_dropout,
                          evaluate, load_checkpoint, predict_proba, restrict_views, save_checkpoint,
                          train_view_specific)
from conftest import TINY_MODEL, tiny_config

FAST = dict(epochs=2, batch_size=8, group_lr={})


def trainer(ds, **kw):
    return Trainer(ds.part("train"), TrainConfig(**{**FAST, **kw}), TINY_MODEL, ds.part("val"))


def same_params(a: Checkpoint, b: Checkpoint) -> bool:
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestViewDropout:
    def test_zero_rate_is_identity(self, rng):
        avail = rng.random((10, 3, 4)) < 0.6
        assert np.array_equal(apply_view_dropout(avail, 0.0, rng), avail)

    def test_high_rate_hides_nearly_everything(self):
        rng = np.random.default_rng(0)
        avail = np.ones((200, 5, 4), dtype=bool)
        kept = apply_view_dropout(avail, 0.999, rng).mean()
        se = np.sqrt(0.001 * 0.999 / avail.size)
        assert abs(kept - 0.001) <= 3 * se

    def test_half_rate_statistics(self):
        rng = np.random.default_rng(1)
        avail = np.ones((400, 5, 4), dtype=bool)
        kept = apply_view_dropout(avail, 0.5, rng).mean()
        assert abs(kept - 0.5) <= 3 * np.sqrt(0.25 / avail.size)

    def test_missing_stays_missing(self, rng):
        avail = rng.random((50, 3, 4)) < 0.5
        out = apply_view_dropout(avail, 0.3, rng)
        assert not (out & ~avail).any()

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ValueError):
            apply_view_dropout(np.ones((1, 1, 1), bool), 1.0, rng)

    def test_restrict_views(self):
        avail = np.ones((2, 2, 3), dtype=bool)
        out = restrict_views(avail, [0, 2])
        assert out[..., [0, 2]].all() and not out[..., 1].any()


class TestTrainer:
    def test_zero_epochs_returns_initial_state(self, tiny_ds):
        t = trainer(tiny_ds, epochs=0)
        init = t.state()
        best, history = t.fit()
        assert history == [] and same_params(best, init)
        assert best.header["metrics"]["selected_epoch"] == 0

    def test_same_seed_is_bit_identical(self, tiny_ds):
        a, ha = trainer(tiny_ds, seed=3).fit()
        b, hb = trainer(tiny_ds, seed=3).fit()
        assert a == b and ha == hb

    def test_different_seed_differs(self, tiny_ds):
        a, _ = trainer(tiny_ds, seed=3).fit()
        b, _ = trainer(tiny_ds, seed=4).fit()
        assert not same_params(a, b)

    def test_history_rows(self, tiny_ds):
        _, history = trainer(tiny_ds).fit()
        assert [r["epoch"] for r in history] == [1, 2]
        assert set(history[0]) == {"epoch", "train_loss", "lr", "val_ap", "val_roc", "val_macro_acc"}
        assert all(np.isfinite(r["train_loss"]) for r in history)

    def test_loss_decreases_on_easy_data(self):
        ds = generate(tiny_config(n_patients=64, noise=0.05))
        _, history = trainer(ds, epochs=6, lr=3e-3, view_dropout=0.0).fit()
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_checkpoint_round_trip_is_bit_exact(self, tiny_ds, tmp_path):
        best, _ = trainer(tiny_ds).fit()
        path = save_checkpoint(best, tmp_path / "a.ckpt")
        again = load_checkpoint(path)
        assert again == best
        save_checkpoint(again, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_resume_equals_continuing(self, tiny_ds, tmp_path):
        a = trainer(tiny_ds, epochs=3)
        a.run_epoch()
        save_checkpoint(a.state(), tmp_path / "mid.ckpt")
        a.run_epoch()
        b = trainer(tiny_ds, epochs=3)
        b.restore(load_checkpoint(tmp_path / "mid.ckpt"))
        b.run_epoch()
        assert a.state() == b.state()

    def test_restore_rejects_other_architecture(self, tiny_ds):
        from dataclasses import replace
        a = trainer(tiny_ds)
        b = Trainer(tiny_ds.part("train"), TrainConfig(**FAST), replace(TINY_MODEL, d_model=8))
        with pytest.raises(ValueError):
            b.restore(a.state())

    def test_corrupt_checkpoint_rejected(self, tiny_ds, tmp_path):
        p = save_checkpoint(trainer(tiny_ds).state(), tmp_path / "c.ckpt")
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(p)
        p.write_bytes(b"NOTACKPT" + b"\0" * 20)
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_divergence_keeps_last_good_state(self, tiny_ds):
        t = trainer(tiny_ds, view_dropout=0.0)
        t.train_ds.obs[1][:] = np.nan
        with pytest.raises(TrainingDiverged) as exc:
            t.fit()
        ck = exc.value.checkpoint
        assert ck.header["epoch"] == 0
        assert all(np.isfinite(v).all() for v in ck.params.values())

    def test_view_specific_with_all_views_equals_no_dropout(self, tiny_ds):
        names = list(tiny_ds.catalog.names)
        cfg = TrainConfig(**FAST)
        a, _ = train_view_specific(tiny_ds.part("train"), tiny_ds.part("val"), names, cfg, TINY_MODEL)
        b, _ = trainer(tiny_ds, view_dropout=0.0).fit()
        assert same_params(a, b)
        assert a.header["train"]["view_dropout"] == 0.0 and a.header["views"] == names

    def test_view_specific_ignores_other_views(self, tiny_ds, rng):
        ck, _ = train_view_specific(tiny_ds.part("train"), None, ["T"], TrainConfig(**FAST), TINY_MODEL)
        model = ck.build_model()
        avail = restrict_views(tiny_ds.available, [0])
        base = predict_proba(model, tiny_ds, avail)
        scrambled = copy.deepcopy(tiny_ds)
        for o in scrambled.obs[1:]:
            o[:] = rng.normal(size=o.shape)
        scrambled.available[..., 1:] = ~scrambled.available[..., 1:]
        assert np.array_equal(predict_proba(model, scrambled, restrict_views(scrambled.available, [0])), base)


class TestEvaluation:
    def test_hidden_view_content_is_irrelevant(self, tiny_ds, rng):
        model = trainer(tiny_ds).model
        avail = apply_view_dropout(tiny_ds.available, 0.5, rng)
        batch = Batch.from_dataset(tiny_ds, available=avail)
        base = model(batch).data
        for a, o in enumerate(batch.obs):
            hidden = ~avail[..., a]
            o[hidden] = rng.normal(scale=100.0, size=o[hidden].shape).astype(o.dtype)
        assert np.abs(model(batch).data - base).max() <= 1e-6

    def test_batching_does_not_change_predictions(self, tiny_ds):
        model = trainer(tiny_ds).model
        a = predict_proba(model, tiny_ds, batch_size=5)
        b = predict_proba(model, tiny_ds, batch_size=100)
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-6)

    def test_evaluate_needs_labels(self, tiny_ds):
        from lmmv.metrics import MetricUndefined
        tiny_ds.labels[:, -1] = -1
        with pytest.raises(MetricUndefined):
            evaluate(trainer(tiny_ds).model, tiny_ds)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(view_dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(selection_metric="f1")
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
