import math

import numpy as np
import pytest

from sar2rgb import curation, fixtures
from sar2rgb.sargen import (
    DiscriminatorConfig,
    GeneratorConfig,
    LossConfig,
    Variant,
    build_generator,
)
from sar2rgb.trainer import (
    CheckpointCorruptError,
    CheckpointVersionError,
    NonFiniteLossError,
    OptimConfig,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    infer,
    load_checkpoint,
    restore_generator,
    save_checkpoint,
    train,
    _model_seeds,
)

from dataclasses import replace


def tiny_config(gan=False, max_steps=4, seed=3, deterministic=False, l1_weight=1.0):
    return TrainConfig(
        generator=GeneratorConfig(variant=Variant.SPADE, image_size=16, base_width=4,
                                  n_up_blocks=1, seed_size=8, mod_hidden=8),
        discriminator=DiscriminatorConfig(n_scales=2, n_layers=2, base_width=8),
        loss=LossConfig(gan_weight=1.0 if gan else 0.0,
                        l1_weight=1000.0 if gan else l1_weight),
        optimizer=OptimConfig(learning_rate=2e-4),
        batch_size=3,
        max_steps=max_steps,
        seed=seed,
        eval_every=2,
        deterministic=deterministic,
    )


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    records = fixtures.synth_fixture(8, 16, 0.0, seed=21, out_dir=root)
    return [curation.load_pair_tiles(r, root) for r in records]


def rows_close(a, b, rtol=1e-6, exact=False):
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert ra.step == rb.step
        for fa, fb in [(ra.generator_total, rb.generator_total), (ra.gan_term, rb.gan_term),
                       (ra.l1_term, rb.l1_term), (ra.discriminator_loss, rb.discriminator_loss),
                       (ra.eval_mae, rb.eval_mae), (ra.eval_psnr, rb.eval_psnr)]:
            if fa is None or fb is None:
                assert fa is None and fb is None
            elif exact:
                assert fa == fb
            else:
                assert abs(fa - fb) <= rtol * max(1.0, abs(fa), abs(fb))


class TestTrainBasics:
    def test_zero_steps_checkpoint_is_initialization(self, corpus):
        cfg = tiny_config(max_steps=0)
        ckpt, trace = train(cfg, corpus)
        assert trace.rows == []
        assert ckpt.step == 0
        g_seed, _ = _model_seeds(cfg.seed)
        fresh = build_generator(cfg.generator, g_seed)
        for name, param in fresh.named_parameters():
            assert np.array_equal(ckpt.generator[name], param.detach().numpy())

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            train(tiny_config(), [])

    def test_wrong_tile_size_rejected(self, tmp_path):
        records = fixtures.synth_fixture(1, 32, 0.0, seed=5, out_dir=tmp_path)
        pairs = [curation.load_pair_tiles(r, tmp_path) for r in records]
        with pytest.raises(ValueError, match="image size"):
            train(tiny_config(), pairs)

    def test_l1_only_never_builds_discriminator(self, corpus):
        cfg = tiny_config(gan=False, l1_weight=7.0)
        ckpt, trace = train(cfg, corpus)
        assert ckpt.discriminator is None
        assert ckpt.opt_discriminator is None
        for row in trace.rows:
            assert row.discriminator_loss is None
            assert row.gan_term == 0.0
            # generator_total == l1_weight * l1_term at every step
            assert math.isclose(row.generator_total, 7.0 * row.l1_term, rel_tol=1e-6)

    def test_gan_mode_updates_discriminator(self, corpus):
        cfg = tiny_config(gan=True)
        ckpt, trace = train(cfg, corpus)
        assert ckpt.discriminator is not None
        assert all(row.discriminator_loss is not None for row in trace.rows)
        assert all(math.isfinite(row.generator_total) for row in trace.rows)

    def test_trace_has_eval_points(self, corpus):
        cfg = tiny_config(max_steps=5)
        _, trace = train(cfg, corpus[:6], corpus[6:])
        with_eval = [row.step for row in trace.rows if row.eval_mae is not None]
        assert with_eval == [2, 4, 5]  # eval_every=2 plus the final step

    def test_determinism_same_seed(self, corpus):
        cfg = tiny_config(max_steps=4)
        _, trace_a = train(cfg, corpus[:6], corpus[6:])
        _, trace_b = train(cfg, corpus[:6], corpus[6:])
        rows_close(trace_a.rows, trace_b.rows, rtol=1e-6)

    def test_determinism_bit_exact_with_flag(self, corpus):
        cfg = tiny_config(max_steps=4, deterministic=True)
        _, trace_a = train(cfg, corpus[:6], corpus[6:])
        _, trace_b = train(cfg, corpus[:6], corpus[6:])
        rows_close(trace_a.rows, trace_b.rows, exact=True)

    def test_different_seed_different_trace(self, corpus):
        _, trace_a = train(tiny_config(seed=1), corpus)
        _, trace_b = train(tiny_config(seed=2), corpus)
        assert any(ra.generator_total != rb.generator_total
                   for ra, rb in zip(trace_a.rows, trace_b.rows))

    def test_non_finite_loss_aborts_with_step(self, corpus):
        cfg = replace(tiny_config(max_steps=50), optimizer=OptimConfig(learning_rate=1e20))
        with pytest.raises(NonFiniteLossError, match=r"step \d+"):
            train(cfg, corpus)


class TestCheckpointIO:
    def test_save_load_round_trip(self, corpus, tmp_path):
        ckpt, _ = train(tiny_config(), corpus)
        path = tmp_path / "run.s2ck"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.step == ckpt.step
        assert config_to_dict(loaded.config) == config_to_dict(ckpt.config)
        for name, arr in ckpt.generator.items():
            assert np.array_equal(loaded.generator[name], arr)
        assert loaded.opt_generator.step == ckpt.opt_generator.step
        for name, arr in ckpt.opt_generator.exp_avg.items():
            assert np.array_equal(loaded.opt_generator.exp_avg[name], arr)

    def test_infer_after_load_bit_exact(self, corpus, tmp_path):
        ckpt, _ = train(tiny_config(), corpus)
        sar_tiles = [s1 for s1, _ in corpus[:3]]
        before = infer(ckpt, sar_tiles)
        path = tmp_path / "run.s2ck"
        save_checkpoint(ckpt, path)
        after = infer(load_checkpoint(path), sar_tiles)
        for a, b in zip(before, after):
            assert a.data.tobytes() == b.data.tobytes()

    def test_save_deterministic_bytes(self, corpus, tmp_path):
        ckpt, _ = train(tiny_config(), corpus)
        save_checkpoint(ckpt, tmp_path / "a.s2ck")
        save_checkpoint(ckpt, tmp_path / "b.s2ck")
        assert (tmp_path / "a.s2ck").read_bytes() == (tmp_path / "b.s2ck").read_bytes()

    def test_truncated_file_checksum_error(self, corpus, tmp_path):
        ckpt, _ = train(tiny_config(max_steps=1), corpus)
        path = tmp_path / "run.s2ck"
        save_checkpoint(ckpt, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 20])
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(path)

    def test_corrupt_payload_checksum_error(self, corpus, tmp_path):
        ckpt, _ = train(tiny_config(max_steps=1), corpus)
        path = tmp_path / "run.s2ck"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointCorruptError, match="checksum"):
            load_checkpoint(path)

    def test_higher_version_rejected(self, corpus, tmp_path):
        import struct
        import zlib

        ckpt, _ = train(tiny_config(max_steps=1), corpus)
        path = tmp_path / "run.s2ck"
        save_checkpoint(ckpt, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # version byte lives right after the magic
        body = bytes(blob[4:-4])
        blob[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_config_dict_round_trip(self):
        cfg = tiny_config(gan=True, deterministic=True)
        assert config_to_dict(config_from_dict(config_to_dict(cfg))) == config_to_dict(cfg)

    def test_unknown_config_keys_rejected(self):
        obj = config_to_dict(tiny_config())
        obj["surprise"] = 1
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict(obj)


class TestResume:
    @pytest.mark.parametrize("gan", [False, True])
    def test_resume_matches_uninterrupted(self, corpus, tmp_path, gan):
        full_cfg = tiny_config(gan=gan, max_steps=8)
        _, full_trace = train(full_cfg, corpus)

        half_cfg = replace(full_cfg, max_steps=4)
        half_ckpt, half_trace = train(half_cfg, corpus)
        path = tmp_path / "half.s2ck"
        save_checkpoint(half_ckpt, path)
        resumed_ckpt, resumed_trace = train(
            replace(load_checkpoint(path).config, max_steps=8),
            corpus,
            resume=load_checkpoint(path),
        )
        rows = half_trace.rows + resumed_trace.rows
        rows_close(rows, full_trace.rows, rtol=1e-6)
        assert resumed_ckpt.step == 8

    def test_resume_config_mismatch_rejected(self, corpus):
        ckpt, _ = train(tiny_config(max_steps=2), corpus)
        other = tiny_config(max_steps=4, seed=99)
        with pytest.raises(ValueError, match="different config"):
            train(other, corpus, resume=ckpt)


class TestInfer:
    def test_output_range_and_roles(self, corpus):
        ckpt, _ = train(tiny_config(max_steps=2), corpus)
        preds = infer(ckpt, [s1 for s1, _ in corpus])
        for pred, (s1, _) in zip(preds, corpus):
            assert pred.meta.tile_id == s1.meta.tile_id
            assert pred.data.min() >= 0.0 and pred.data.max() <= 1.0
            assert pred.data.shape == (3, 16, 16)

    def test_deterministic(self, corpus):
        ckpt, _ = train(tiny_config(max_steps=2), corpus)
        tiles = [s1 for s1, _ in corpus[:2]]
        a = infer(ckpt, tiles)
        b = infer(ckpt, tiles)
        for x, y in zip(a, b):
            assert x.data.tobytes() == y.data.tobytes()

    def test_size_mismatch(self, corpus, tmp_path):
        ckpt, _ = train(tiny_config(max_steps=1), corpus)
        records = fixtures.synth_fixture(1, 32, 0.0, seed=5, out_dir=tmp_path)
        s1, _ = curation.load_pair_tiles(records[0], tmp_path)
        with pytest.raises(ValueError, match="expects 16x16"):
            infer(ckpt, [s1])

    def test_restore_generator_matches_training_weights(self, corpus):
        ckpt, _ = train(tiny_config(max_steps=2), corpus)
        gen = restore_generator(ckpt)
        for name, param in gen.named_parameters():
            assert np.array_equal(param.detach().numpy(), ckpt.generator[name])
