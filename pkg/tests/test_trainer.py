import copy
import csv
import math

import numpy as np
import pytest
import torch

from conftest import write_dataset
from ptdehaze.distill import FileHintProvider, TeacherHintProvider, lambda_decay
from ptdehaze.errors import (ChecksumError, MissingHintError, NumericError,
                             ParameterError, VersionError)
from ptdehaze.generator import GeneratorConfig, build_generator
from ptdehaze.losses import LossWeights, StubExtractor
from ptdehaze.trainer import (CHECKPOINT_MAGIC, TrainConfig, TrainState, assemble_batch,
                              build_state, build_surrogate_teacher, linear_lr,
                              load_checkpoint, padded_inference, save_checkpoint,
                              train, train_step, write_history)


def toy_gen_cfg():
    return GeneratorConfig(base_channels=4, levels=3, spp_pool_sizes=(3,))


def toy_train_cfg(**kwargs):
    defaults = dict(epochs=2, batch_size=2, lr0=1e-3, delta=0.5, n_critic=1,
                    gp_coeff=10.0, seed=0, patience=50, crop=16,
                    steps_per_epoch=1, flip=True, perceptual="stub",
                    teacher_channels=32)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def toy_teacher():
    cfg = GeneratorConfig(base_channels=8, levels=3, spp_pool_sizes=(3,))
    teacher = build_generator(cfg, seed=77)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def toy_batch(state, n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    from ptdehaze.data import LoadedPair
    loaded = []
    for i in range(n):
        hazy = rng.random((size, size, 3))
        clean = rng.random((size, size, 3))
        hazemap = rng.random((size, size))
        loaded.append(LoadedPair(id=f"t{i}", split="train", hazy=hazy,
                                 clean=clean, hazemap=hazemap))
    return assemble_batch(loaded, state.cfg, np.random.default_rng(seed + 1))


class TestSchedules:

    def test_lr_schedule_endpoints(self):
        assert linear_lr(0, 400, 1e-4) == 1e-4
        assert linear_lr(400, 400, 1e-4) == 0.0
        assert linear_lr(200, 400, 1e-4) == pytest.approx(5e-5)


class TestTrainStep:

    def test_zero_weights_leave_params_unchanged(self):
        cfg = toy_train_cfg(weights=LossWeights(adv=0, per=0, trans=0, hint=0, critic=1))
        state = build_state(toy_gen_cfg(), cfg)
        before = {k: v.clone() for k, v in state.generator.named_parameters()}
        before_adapt = {k: v.clone() for k, v in state.adaptation.named_parameters()}
        train_step(state, toy_batch(state), lam=0.0, extractor=StubExtractor())
        for k, v in state.generator.named_parameters():
            assert torch.equal(v, before[k]), k
        for k, v in state.adaptation.named_parameters():
            assert torch.equal(v, before_adapt[k]), k

    def test_step_changes_generator_params(self):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        before = [p.clone() for p in state.generator.parameters()]
        train_step(state, toy_batch(state), lam=0.0, extractor=StubExtractor())
        assert any(not torch.equal(a, b)
                   for a, b in zip(before, state.generator.parameters()))

    def test_lazy_hint_contract_at_lambda_zero(self):
        class ExplodingProvider:
            def hints(self, ids, x):
                raise AssertionError("provider must not be queried at lambda=0")

        state = build_state(toy_gen_cfg(), toy_train_cfg())
        logs = train_step(state, toy_batch(state), lam=0.0,
                          extractor=StubExtractor(), hint_provider=ExplodingProvider())
        assert logs["loss_hint"] == 0.0

    def test_missing_hint_error_names_sample(self, tmp_path):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        provider = FileHintProvider(tmp_path)  # empty directory
        with pytest.raises(MissingHintError, match="t0"):
            train_step(state, toy_batch(state), lam=1.0,
                       extractor=StubExtractor(), hint_provider=provider)

    def test_hint_provider_required_when_lambda_positive(self):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        with pytest.raises(ParameterError):
            train_step(state, toy_batch(state), lam=0.5, extractor=StubExtractor())

    def test_determinism_from_checkpoint(self, tmp_path):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        path = tmp_path / "step.ckpt"
        save_checkpoint(state, path)
        provider = TeacherHintProvider(toy_teacher())

        logs_a = train_step(state, toy_batch(state), lam=0.5,
                            extractor=StubExtractor(), hint_provider=provider)
        reloaded = load_checkpoint(path)
        logs_b = train_step(reloaded, toy_batch(reloaded), lam=0.5,
                            extractor=StubExtractor(), hint_provider=provider)
        assert logs_a == logs_b

    def test_nan_perceptual_aborts_with_name(self):
        class NanExtractor(StubExtractor):
            def forward(self, x):
                return x * float("nan")

        state = build_state(toy_gen_cfg(), toy_train_cfg())
        with pytest.raises(NumericError, match="perceptual"):
            train_step(state, toy_batch(state), lam=0.0, extractor=NanExtractor())

    def test_critic_requires_grad_restored(self):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        train_step(state, toy_batch(state), lam=0.0, extractor=StubExtractor())
        assert all(p.requires_grad for p in state.critic.parameters())


class TestStageTwoFreeze:

    def test_adaptation_frozen_in_stage_two(self):
        # hint is the only active objective; once lambda hits 0 the adaptation
        # layer must stop moving entirely
        cfg = toy_train_cfg(weights=LossWeights(adv=0, per=0, trans=0, hint=100, critic=1),
                            epochs=4)
        state = build_state(toy_gen_cfg(), cfg)
        provider = TeacherHintProvider(toy_teacher())
        snapshots = []
        for e in range(4):
            lam = lambda_decay(e, 4, 0.5)
            train_step(state, toy_batch(state, seed=e), lam,
                       extractor=StubExtractor(), hint_provider=provider)
            snapshots.append({k: v.clone() for k, v in state.adaptation.named_parameters()})
        # stage I (lambda 1.0 then 0.5) moves the adaptation layer
        assert any(not torch.equal(snapshots[0][k], snapshots[1][k]) for k in snapshots[0])
        # stage II (epochs 2 and 3, lambda 0) leaves it bit-identical
        for k in snapshots[2]:
            assert torch.equal(snapshots[2][k], snapshots[3][k]), k


class TestCheckpoints:

    def test_save_load_forward_bit_exact(self, tmp_path):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        x = torch.rand(1, 4, 16, 16)
        state.generator.eval()
        with torch.no_grad():
            before = state.generator(x)
        path = save_checkpoint(state, tmp_path / "model.ckpt")
        restored = load_checkpoint(path)
        restored.generator.eval()
        with torch.no_grad():
            after = restored.generator(x)
        assert torch.equal(before, after)

    def test_truncation_detected(self, tmp_path):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        path = save_checkpoint(state, tmp_path / "model.ckpt")
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_version_mismatch_detected(self, tmp_path):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        path = save_checkpoint(state, tmp_path / "model.ckpt")
        blob = bytearray(path.read_bytes())
        blob[len(CHECKPOINT_MAGIC)] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_run_config_snapshot_roundtrip(self, tmp_path):
        state = build_state(toy_gen_cfg(), toy_train_cfg())
        state.run_config = {"data": {"root": "somewhere"}}
        path = save_checkpoint(state, tmp_path / "model.ckpt")
        assert load_checkpoint(path).run_config == {"data": {"root": "somewhere"}}


class TestPaddedInference:

    def test_arbitrary_size_roundtrip(self):
        gen = build_generator(toy_gen_cfg(), seed=0)
        rng = np.random.default_rng(0)
        hazy = rng.random((30, 46, 3))
        out = padded_inference(gen, hazy, rng.random((30, 46)))
        assert out.shape == (30, 46, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestTrainLoop:

    def test_lambda_history_matches_schedule(self, tmp_path):
        root = write_dataset(tmp_path / "d", n_train=2, n_val=1, size=32)
        cfg = toy_train_cfg(epochs=4, crop=32)
        provider = TeacherHintProvider(toy_teacher())
        _, history, _ = train(toy_gen_cfg(), cfg, root, hint_provider=provider,
                              out_dir=tmp_path / "run", extractor=StubExtractor())
        assert [row["lambda"] for row in history] == [1.0, 0.5, 0.0, 0.0]
        assert [row["hint_weight"] for row in history] == [100.0, 50.0, 0.0, 0.0]

    def test_lr_column_linear(self, tmp_path):
        root = write_dataset(tmp_path / "d", n_train=2, n_val=0, size=32)
        cfg = toy_train_cfg(epochs=4, crop=32, weights=LossWeights(hint=0.0))
        _, history, _ = train(toy_gen_cfg(), cfg, root, out_dir=None,
                              extractor=StubExtractor())
        lrs = [row["lr"] for row in history]
        assert lrs == [linear_lr(e, 4, cfg.lr0) for e in range(4)]

    def test_two_runs_identical_histories(self, tmp_path):
        root = write_dataset(tmp_path / "d", n_train=2, n_val=1, size=32)

        def run():
            cfg = toy_train_cfg(epochs=2, crop=32)
            provider = TeacherHintProvider(toy_teacher())
            _, history, _ = train(toy_gen_cfg(), cfg, root, hint_provider=provider,
                                  extractor=StubExtractor())
            return history

        assert run() == run()

    def test_history_csv_layout(self, tmp_path):
        rows = [{"epoch": 0, "lambda": 1.0, "lr": 1e-4, "hint_weight": 100.0,
                 "loss_adv": 0.1, "loss_per": 0.2, "loss_trans": 0.3,
                 "loss_hint": 0.4, "loss_gen": 0.5, "loss_critic": 0.6,
                 "gp": 0.7, "val_psnr": 20.0, "val_ssim": 0.8}]
        path = tmp_path / "history.csv"
        write_history(rows, path)
        with open(path) as fh:
            parsed = list(csv.DictReader(fh))
        assert parsed[0]["lambda"] == "1.0"
        assert parsed[0]["val_psnr"] == "20.0"

    def test_early_stopping(self, tmp_path, monkeypatch):
        root = write_dataset(tmp_path / "d", n_train=2, n_val=1, size=32)
        cfg = toy_train_cfg(epochs=10, crop=32, patience=2,
                            weights=LossWeights(hint=0.0))
        monkeypatch.setattr("ptdehaze.trainer.validate", lambda state, val: (15.0, 0.5))
        _, history, _ = train(toy_gen_cfg(), cfg, root, extractor=StubExtractor())
        # epoch 0 improves over -inf; epochs 1-2 are stale; stop at patience=2
        assert len(history) == 3

    def test_missing_provider_with_hint_weight_rejected(self, tmp_path):
        root = write_dataset(tmp_path / "d", n_train=1, n_val=0, size=32)
        with pytest.raises(ParameterError, match="hint"):
            train(toy_gen_cfg(), toy_train_cfg(crop=32), root, hint_provider=None,
                  extractor=StubExtractor())

    def test_no_nan_in_short_run(self, tmp_path):
        root = write_dataset(tmp_path / "d", n_train=2, n_val=1, size=32)
        cfg = toy_train_cfg(epochs=2, crop=32)
        provider = TeacherHintProvider(toy_teacher())
        _, history, _ = train(toy_gen_cfg(), cfg, root, hint_provider=provider,
                              extractor=StubExtractor())
        for row in history:
            for key, value in row.items():
                if isinstance(value, float):
                    assert not math.isnan(value), key
