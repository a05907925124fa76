import numpy as np
import pytest

from mceend.autograd import Tensor
from mceend.encoders import ModelConfig
from mceend.errors import ConfigError, DataError, DivergenceError
from mceend.features import FeatureBank
from mceend.model import freeze_set, init_model, named_parameters
from mceend.trainer import (
    Adam,
    SessionData,
    TrainConfig,
    clip_gradients,
    load_checkpoint,
    noam_lr,
    resume_payload,
    sample_training_channels,
    save_checkpoint,
    train,
)


def tiny_model(variant="co_attention", seed=0):
    cfg = ModelConfig(
        variant=variant,
        n_features=12,
        n_multi_features=6,
        embed_dim=8,
        multi_embed_dim=4,
        n_heads=2,
        ffn_hidden=16,
        multi_ffn_hidden=8,
        n_blocks=2,
        n_speakers=2,
    )
    return init_model(cfg, np.random.default_rng(seed))


def tiny_dataset(n_sessions=2, n_frames=40, n_channels=2, seed=0):
    rng = np.random.default_rng(seed)
    sessions = []
    for i in range(n_sessions):
        bank = FeatureBank(
            spliced=rng.normal(size=(n_channels, 12, n_frames)),
            context=rng.normal(size=(n_channels, 6, n_frames)),
        )
        labels = (rng.uniform(size=(2, n_frames)) > 0.5).astype(float)
        sessions.append(SessionData(session_id=f"s{i}", bank=bank, labels=labels))
    return sessions


class TestNoamLr:
    def test_crossover_at_warmup(self):
        w = 4000
        assert noam_lr(w, 256, w) == pytest.approx(256**-0.5 * w**-0.5, rel=1e-12)
        assert w**-0.5 == pytest.approx(w * w**-1.5, rel=1e-12)

    def test_paper_scale_value(self):
        assert noam_lr(100000, 256, 100000) == pytest.approx((1 / 16) * 100000**-0.5, rel=1e-12)
        assert noam_lr(100000, 256, 100000) == pytest.approx(1.977e-4, rel=1e-3)

    def test_monotone_up_then_down(self):
        values = [noam_lr(s, 64, 1000) for s in range(1, 3000)]
        peak = values.index(max(values))
        assert all(a < b for a, b in zip(values[:peak], values[1 : peak + 1]))
        assert all(a > b for a, b in zip(values[peak:], values[peak + 1 :]))

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            noam_lr(0, 256, 1000)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        adam = Adam()
        adam.step({"p": p}, lr=0.1)
        np.testing.assert_array_equal(p.data, [[1.0, 2.0]])

    def test_first_step_hand_case(self):
        p = Tensor(np.array([[0.0]]), requires_grad=True)
        p.grad[:] = 1.0
        adam = Adam()
        adam.step({"p": p}, lr=0.01)
        assert p.data[0, 0] == pytest.approx(-0.01 * 1.0 / (1.0 + 1e-8), rel=1e-9)

    def test_frozen_parameter_untouched(self):
        p = Tensor(np.array([[3.0]]), requires_grad=True)
        p.grad[:] = 5.0
        adam = Adam()
        adam.step({"p": p}, lr=0.1, frozen=frozenset({"p"}))
        np.testing.assert_array_equal(p.data, [[3.0]])
        assert "p" not in adam.m and "p" not in adam.v

    def test_lr_zero_changes_nothing(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        p.grad[:] = rng.normal(size=(3, 3))
        before = p.data.copy()
        Adam().step({"p": p}, lr=0.0)
        np.testing.assert_array_equal(p.data, before)


class TestClipGradients:
    def test_clips_to_max_norm(self):
        p = Tensor(np.zeros((2, 2)), requires_grad=True)
        p.grad[:] = 3.0
        norm = clip_gradients({"p": p}, max_norm=1.0)
        assert norm == pytest.approx(6.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        p = Tensor(np.zeros((2, 2)), requires_grad=True)
        p.grad[:] = 0.1
        clip_gradients({"p": p}, max_norm=5.0)
        np.testing.assert_allclose(p.grad, 0.1)


class TestSampleTrainingChannels:
    def test_full_dropout_gives_single_channel(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert len(sample_training_channels(6, 4, 1.0, rng)) == 1

    def test_no_dropout_full_subset_is_identity_set(self):
        rng = np.random.default_rng(2)
        assert sample_training_channels(5, 5, 0.0, rng) == [0, 1, 2, 3, 4]

    def test_dropout_rate_monte_carlo(self):
        rng = np.random.default_rng(3)
        singles = sum(
            1 for _ in range(100_000) if len(sample_training_channels(10, 4, 0.1, rng)) == 1
        )
        assert abs(singles / 100_000 - 0.1) <= 0.01

    def test_subset_larger_than_available_rejected(self):
        with pytest.raises(ValueError):
            sample_training_channels(3, 4, 0.0, np.random.default_rng(4))


class TestFreezeSet:
    def test_spatio_temporal_policy(self):
        model = tiny_model("spatio_temporal")
        frozen = freeze_set(model, "channel_invariant")
        names = named_parameters(model)
        assert frozen
        assert all(".cross_channel." in n for n in frozen)
        expected = {n for n in names if ".cross_channel." in n}
        assert frozen == expected

    def test_co_attention_policy(self):
        model = tiny_model("co_attention")
        frozen = freeze_set(model, "channel_invariant")
        names = set(named_parameters(model))
        assert frozen <= names
        for marker in (".multi_qk.", ".multi_vo.", ".multi_ffn.", ".ln_multi_co.", ".ln_multi_ffn."):
            assert any(marker in n for n in frozen)
        assert not any(".single_" in n for n in frozen)

    def test_partition(self):
        model = tiny_model("co_attention")
        frozen = freeze_set(model, "channel_invariant")
        all_names = set(named_parameters(model))
        trainable = all_names - frozen
        assert frozen | trainable == all_names
        assert not frozen & trainable

    def test_none_policy_and_transformer(self):
        assert freeze_set(tiny_model("co_attention"), "none") == set()
        assert freeze_set(tiny_model("transformer"), "channel_invariant") == set()

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            freeze_set(tiny_model(), "everything")


class TestTrainLoop:
    def config(self, **kw):
        defaults = dict(
            chunk_frames=20,
            batch_size=2,
            epochs=1,
            max_steps=10,
            warmup_steps=20,
            noam_scale=0.05,
            channel_subset=2,
            channel_dropout=0.1,
        )
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_loss_decreases_on_overfit_smoke(self):
        model = tiny_model()
        dataset = tiny_dataset(n_sessions=1)
        cfg = self.config(max_steps=60, epochs=30, batch_size=2, channel_dropout=0.0)
        records = train(model, dataset, cfg, np.random.default_rng(5))
        first = np.mean([r["loss"] for r in records[:10]])
        last = np.mean([r["loss"] for r in records[-10:]])
        assert last < first

    def test_fixed_seed_reproducible(self):
        r1 = train(tiny_model(seed=3), tiny_dataset(), self.config(), np.random.default_rng(7))
        r2 = train(tiny_model(seed=3), tiny_dataset(), self.config(), np.random.default_rng(7))
        assert [r["loss"] for r in r1] == [r["loss"] for r in r2]

    def test_frozen_tensors_bit_identical(self):
        model = tiny_model()
        frozen = freeze_set(model, "channel_invariant")
        params = named_parameters(model)
        before = {n: p.data.copy() for n, p in params.items()}
        cfg = self.config(mode="adapt", freeze_policy="channel_invariant", adapt_lr=1e-3)
        train(model, tiny_dataset(n_channels=1), cfg, np.random.default_rng(8))
        for n in frozen:
            assert np.array_equal(params[n].data, before[n]), n
        # and the complement did move
        moved = [n for n in params if n not in frozen and not np.array_equal(params[n].data, before[n])]
        assert moved

    def test_divergence_guard(self):
        dataset = tiny_dataset(n_sessions=1)
        dataset[0].labels[0, 0] = np.nan
        with pytest.raises(DivergenceError):
            train(tiny_model(), dataset, self.config(), np.random.default_rng(9))

    def test_empty_dataset_rejected(self):
        with pytest.raises(DataError):
            train(tiny_model(), [], self.config(), np.random.default_rng(10))

    def test_sessions_shorter_than_chunk_rejected(self):
        with pytest.raises(DataError):
            train(tiny_model(), tiny_dataset(n_frames=10), self.config(), np.random.default_rng(11))

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(channel_dropout=1.5)
        with pytest.raises(ConfigError):
            TrainConfig(mode="finetune")


class TestCheckpointing:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model()
        adam = Adam()
        params = named_parameters(model)
        for p in params.values():
            p.grad[:] = np.random.default_rng(12).normal(size=p.shape)
        adam.step(params, lr=0.01)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, adam, extra={"note": 1})
        loaded, meta, optim_tensors = load_checkpoint(path)
        assert meta["note"] == 1
        assert meta["optimizer_step"] == 1
        reloaded = named_parameters(loaded)
        for name, p in params.items():
            assert np.array_equal(reloaded[name].data, p.data), name
        assert any(k.startswith("optim.m.") for k in optim_tensors)

    def test_no_stray_tmp_file(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", tiny_model())
        assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        cfg = TrainConfig(
            chunk_frames=20, batch_size=2, epochs=2, warmup_steps=20,
            noam_scale=0.05, channel_subset=2, channel_dropout=0.1,
        )
        full = train(tiny_model(seed=4), tiny_dataset(), cfg, np.random.default_rng(13))

        part_model = tiny_model(seed=4)
        cfg_first = TrainConfig(
            chunk_frames=20, batch_size=2, epochs=1, warmup_steps=20,
            noam_scale=0.05, channel_subset=2, channel_dropout=0.1,
        )
        train(part_model, tiny_dataset(), cfg_first, np.random.default_rng(13), checkpoint_dir=tmp_path)

        resumed_model, meta, optim_tensors = load_checkpoint(tmp_path / "latest.ckpt")
        adam = Adam()
        resume = resume_payload(meta, optim_tensors, adam)
        rest = train(resumed_model, tiny_dataset(), cfg, np.random.default_rng(99), resume=resume, optimizer=adam)

        full_epoch2 = [r["loss"] for r in full if r["epoch"] == 1]
        rest_epoch2 = [r["loss"] for r in rest]
        assert rest_epoch2 == full_epoch2
