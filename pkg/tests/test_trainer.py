"""Training loop determinism, update counting, loss history and checkpoints."""
import struct

import numpy as np
import pytest

import resinsort.trainer as trainer_mod
from resinsort.data import DataError, DatasetManifest, Record, split_dataset
from resinsort.nets import SiameseModel, TripletModel
from resinsort.trainer import (
    MAGIC,
    CheckpointError,
    LossHistory,
    TrainConfig,
    TrainingError,
    batch_loss_and_grads,
    build_model,
    load_checkpoint,
    mean_loss,
    save_checkpoint,
    train,
)


def toy_data(counts=(20, 20, 20), seed=0):
    records = []
    for cid, n in enumerate(counts):
        records += [Record(f"{cid}-{k}", cid, f"{cid}/{k}.ppm") for k in range(n)]
    manifest = split_dataset(DatasetManifest([f"{i:02d}-c{i}" for i in range(len(counts))], records),
                             seed=0)
    r = np.random.default_rng(seed)
    images = r.normal(size=(len(records), 32, 32, 3))
    # a per-class offset gives the network something to learn
    images += np.array([rec.class_id for rec in manifest.records])[:, None, None, None] * 0.5
    return manifest, images


def quick(kind="triplet", **kw):
    base = dict(kind=kind, profile="mini", epochs=2, samples_per_epoch=12, batch_size=5,
                val_samples=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def params_of(model):
    return [p.data.copy() for p in model.params()]


class TestConfig:
    def test_defaults(self):
        s = TrainConfig(kind="siamese")
        assert (s.epochs, s.batch_size, s.learning_rate, s.momentum) == (50, 50, 0.001, 0.9)
        assert s.samples_per_epoch == 5000
        assert TrainConfig(kind="triplet").epochs == 100
        assert TrainConfig().margin == 0.4

    def test_steps_per_epoch_rounds_up(self):
        assert quick(samples_per_epoch=12, batch_size=5).steps_per_epoch == 3

    @pytest.mark.parametrize("kw", [dict(kind="quad"), dict(epochs=0), dict(batch_size=20),
                                    dict(learning_rate=-1.0), dict(momentum=1.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            quick(**kw)


class TestTraining:
    @pytest.mark.parametrize("kind", ["siamese", "triplet"])
    def test_zero_learning_rate_keeps_init(self, kind):
        manifest, images = toy_data()
        config = quick(kind, learning_rate=0.0)
        model, _ = train(config, manifest, images)
        for a, b in zip(params_of(build_model(config)), params_of(model)):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("kind", ["siamese", "triplet"])
    def test_same_seed_same_history(self, kind):
        manifest, images = toy_data()
        m1, h1 = train(quick(kind), manifest, images)
        m2, h2 = train(quick(kind), manifest, images)
        assert h1 == h2
        for a, b in zip(params_of(m1), params_of(m2)):
            np.testing.assert_array_equal(a, b)

    def test_seed_changes_run(self):
        manifest, images = toy_data()
        _, h1 = train(quick(seed=1), manifest, images)
        _, h2 = train(quick(seed=2), manifest, images)
        assert h1 != h2

    def test_history_length_and_finite(self):
        manifest, images = toy_data()
        seen = []
        _, history = train(quick(epochs=3), manifest, images,
                           on_epoch=lambda e, t, v: seen.append(e))
        assert len(history) == 3 and len(history.val) == 3
        assert np.all(np.isfinite(history.train + history.val))
        assert seen == [1, 2, 3]

    def test_update_count(self, monkeypatch):
        manifest, images = toy_data()
        calls = []
        real = trainer_mod.sgd_momentum_step
        monkeypatch.setattr(trainer_mod, "sgd_momentum_step",
                            lambda *a: (calls.append(1), real(*a)))
        train(quick(epochs=3, samples_per_epoch=12, batch_size=5), manifest, images)
        assert len(calls) == 3 * 3

    def test_validation_does_not_touch_parameters(self):
        manifest, images = toy_data()
        config = quick()
        model = build_model(config)
        before = params_of(model)
        rows = {i: i for i in range(len(manifest.records))}
        samples = [(0, 1, 20), (2, 3, 25)]
        mean_loss(model, config, samples, rows, images)
        for a, b in zip(before, params_of(model)):
            np.testing.assert_array_equal(a, b)

    def test_micro_batches_match_full_batch(self):
        manifest, images = toy_data()
        config = quick()
        rows = {i: i for i in range(len(manifest.records))}
        samples = [(0, 1, 20), (2, 3, 25), (11, 12, 4), (13, 14, 5), (21, 22, 6)]
        model = build_model(config)
        full_loss, full = batch_loss_and_grads(model, config, samples, rows, images)
        micro = TrainConfig(**{**config.__dict__, "micro_batch": 2})
        part_loss, part = batch_loss_and_grads(model, micro, samples, rows, images)
        assert part_loss == pytest.approx(full_loss, rel=1e-12)
        for a, b in zip(full, part):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)

    def test_holdout_class_is_never_sampled(self, monkeypatch):
        manifest, images = toy_data()
        used = set()
        real = trainer_mod._batch_arrays

        def spy(config, samples, rows, imgs):
            for s in samples:
                used.update(s[:3] if config.kind == "triplet" else s[:2])
            return real(config, samples, rows, imgs)

        monkeypatch.setattr(trainer_mod, "_batch_arrays", spy)
        train(quick(holdout_class=2), manifest, images)
        assert used and all(manifest.records[i].class_id != 2 for i in used)

    def test_one_class_is_a_data_error(self):
        manifest, images = toy_data((20,))
        with pytest.raises(DataError):
            train(quick(), manifest, images)

    def test_wrong_image_size(self):
        manifest, images = toy_data()
        with pytest.raises(DataError):
            train(quick(), manifest, images[:, :16, :16])

    def test_non_finite_loss_raises(self):
        manifest, images = toy_data()
        images[:] = np.nan
        with pytest.raises(TrainingError):
            train(quick(), manifest, images)

    def test_loss_decreases_on_separable_data(self):
        manifest, images = toy_data((30, 30, 30))
        _, history = train(quick(epochs=6, samples_per_epoch=40, batch_size=10,
                                 learning_rate=0.01), manifest, images)
        assert history.train[-1] < history.train[0]


class TestHistoryCsv:
    def test_layout(self, tmp_path):
        h = LossHistory([0.5, 0.25], [0.75, 0.125])
        h.to_csv(tmp_path / "loss.csv")
        assert (tmp_path / "loss.csv").read_text().splitlines() == [
            "epoch,train_loss,val_loss", "1,0.5,0.75", "2,0.25,0.125"]


class TestCheckpoint:
    @pytest.fixture(params=["siamese", "triplet"])
    def model(self, request):
        if request.param == "siamese":
            return SiameseModel.create("mini", seed=4)
        return TripletModel.create("mini", seed=4, margin=0.7)

    def test_save_load_save_is_byte_identical(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_round_trip_preserves_embeddings(self, model, tmp_path, rng):
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        x = rng.normal(size=(3, 32, 32, 3))
        np.testing.assert_array_equal(model.embed(x), back.embed(x))
        assert back.kind == model.kind
        assert getattr(back, "margin", None) == getattr(model, "margin", None)

    def test_layout(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.ckpt")
        buf = (tmp_path / "m.ckpt").read_bytes()
        assert buf[:5] == MAGIC
        (hlen,) = struct.unpack_from("<Q", buf, 5)
        n = sum(p.size for p in model.params())
        assert len(buf) == 5 + 8 + hlen + 8 * n

    def test_truncated(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.ckpt")
        buf = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(buf[:-8])
        with pytest.raises(CheckpointError, match="truncated payload"):
            load_checkpoint(tmp_path / "t.ckpt")
        (tmp_path / "h.ckpt").write_bytes(buf[:9])
        with pytest.raises(CheckpointError, match="truncated payload"):
            load_checkpoint(tmp_path / "h.ckpt")

    def test_trailing_bytes(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.ckpt")
        (tmp_path / "x.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes() + b"\0" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE!" + b"\0" * 20)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_shape_mismatch(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "m.ckpt")
        buf = (tmp_path / "m.ckpt").read_bytes()
        (hlen,) = struct.unpack_from("<Q", buf, 5)
        header = buf[13:13 + hlen].decode()
        first = "[" + ",".join(str(s) for s in model.params()[0].shape) + "]"
        bad = header.replace(first, "[1,1,1,1]", 1).encode()
        (tmp_path / "s.ckpt").write_bytes(MAGIC + struct.pack("<Q", len(bad)) + bad + buf[13 + hlen:])
        with pytest.raises(CheckpointError, match="shapes"):
            load_checkpoint(tmp_path / "s.ckpt")

    def test_malformed_header(self, tmp_path):
        body = b"{not json"
        (tmp_path / "j.ckpt").write_bytes(MAGIC + struct.pack("<Q", len(body)) + body)
        with pytest.raises(CheckpointError, match="malformed"):
            load_checkpoint(tmp_path / "j.ckpt")
