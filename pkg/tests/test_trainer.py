import numpy as np
import pytest

import triplanegen.trainer as trainer_mod
from triplanegen.conditioner import DecoderConfig
from triplanegen.guidance import (DiffusionSchedule, GuidanceConfig,
                                  OracleError, SdsInfo, SyntheticOracle)
from triplanegen.prompts import gen_animals, split
from triplanegen.renderer import CameraPose
from triplanegen.trainer import (AdamMoments, CheckpointError, TrainConfig,
                                 Trainer, adam_step, init_moments,
                                 load_trainer, read_checkpoint,
                                 save_checkpoint, write_checkpoint)


def tiny_decoder_config():
    return DecoderConfig(base_channel=8, layers_per_block=1,
                         channel_multipliers=(1,), base_resolution=8, stages=1,
                         style_noise_dim=8, out_channels=4, out_resolution=16,
                         token_reduce_dim=8, style_token_dim=8,
                         attention_heads=2)


def tiny_records(n=4):
    recs = gen_animals()[:n]
    return split(recs, 0.5, seed=0)


def make_trainer(records=None, clip_weight=0.0, lr=1e-3, **over):
    records = records if records is not None else tiny_records()
    cfg = TrainConfig(lr=lr, batch_size=2, total_steps=50, render_hw=16,
                      n_uniform=6, clip_weight=clip_weight, seed=0, **over)
    oracle = SyntheticOracle(records, DiffusionSchedule())
    return Trainer(records, cfg, tiny_decoder_config(), oracle)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(total_steps=0)


class TestAdam:
    def test_zero_grad_is_identity(self):
        cfg = TrainConfig()
        params = {"w": np.ones((3, 3), dtype=np.float32)}
        before = params["w"].copy()
        adam_step(params, {"w": np.zeros((3, 3), dtype=np.float32)},
                  init_moments(params), cfg)
        np.testing.assert_array_equal(params["w"], before)

    def test_first_step_closed_form(self):
        cfg = TrainConfig(lr=0.01)
        params = {"w": np.zeros(4, dtype=np.float64)}
        g = np.array([1.0, -2.0, 0.5, 3.0])
        adam_step(params, {"w": g}, init_moments(params), cfg)
        # bias correction makes m_hat == g and v_hat == g*g on step one
        expected = -cfg.lr * g / (np.abs(g) + cfg.eps)
        np.testing.assert_allclose(params["w"], expected, atol=1e-9)

    def test_shape_mismatch_rejected(self):
        cfg = TrainConfig()
        params = {"w": np.zeros(3, dtype=np.float32)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(4, dtype=np.float32)},
                      init_moments(params), cfg)

    def test_moment_counter_advances(self):
        cfg = TrainConfig()
        params = {"w": np.zeros(2, dtype=np.float32)}
        mom = init_moments(params)
        adam_step(params, {"w": np.ones(2, dtype=np.float32)}, mom, cfg)
        adam_step(params, {"w": np.ones(2, dtype=np.float32)}, mom, cfg)
        assert mom.t == 2


class TestTrainStep:
    def test_metrics_and_state_advance(self):
        tr = make_trainer()
        before = {k: v.copy() for k, v in tr.params.items()}
        m = tr.train_step(tr.sample_batch())
        assert m["step"] == 0
        assert np.isfinite(m["loss"])
        assert m["mean_C"] == 0.0  # severity cache is cold on the first step
        assert 0.0 <= m["mean_w_neg"]
        assert tr.step == 1
        changed = any(not np.array_equal(before[k], tr.params[k])
                      for k in before)
        assert changed

    def test_anneal_advances(self):
        tr = make_trainer()
        a0 = tr.anneal.alpha
        tr.train_step(tr.sample_batch())
        assert tr.anneal.alpha > a0

    def test_severity_cache_filled_after_step(self):
        tr = make_trainer()
        batch = tr.sample_batch()
        tr.train_step(batch)
        for rec in set(r.id for r in batch):
            assert tr.severity.get(rec) is not None

    def test_second_step_sees_warm_cache(self):
        tr = make_trainer()
        b = tr.sample_batch()
        tr.train_step(b)
        m = tr.train_step(b)
        assert m["mean_C"] >= 0.0

    def test_test_split_record_rejected(self):
        tr = make_trainer()
        test_rec = next(r for r in tr.records if r.split == "test")
        with pytest.raises(ValueError):
            tr.train_step([test_rec])

    def test_zero_pixel_grad_means_no_update(self, monkeypatch):
        tr = make_trainer()

        def zero_grad(rendered, pose, rec, oracle, sched, gcfg, sev, feat, rng):
            return (np.zeros_like(rendered),
                    SdsInfo(t=100, C=0.0, w_neg=gcfg.w_min))

        monkeypatch.setattr(trainer_mod, "sds_grad", zero_grad)
        before = {k: v.copy() for k, v in tr.params.items()}
        tr.train_step(tr.sample_batch())
        for k in before:
            np.testing.assert_array_equal(before[k], tr.params[k])

    def test_oracle_failure_leaves_state_untouched(self):
        tr = make_trainer()

        class FailingOracle:
            ignores_guidance_weight = True

            def denoise(self, *a, **kw):
                raise OracleError("backend down")

        tr.oracle = FailingOracle()
        before = {k: v.copy() for k, v in tr.params.items()}
        with pytest.raises(OracleError):
            tr.train_step(tr.sample_batch())
        assert tr.step == 0
        for k in before:
            np.testing.assert_array_equal(before[k], tr.params[k])

    def test_training_reduces_fixed_view_error(self):
        records = split(gen_animals()[:2], 0.5, seed=0)
        for r in records:
            r.split = "train"
        tr = make_trainer(records=records, lr=3e-3)
        from triplanegen.prompts import target_scene
        pose = CameraPose(90.0, 0.0, 3.3, 75.0)

        def err():
            vals = []
            for r in records:
                img = np.clip(tr.render_view(r, pose, 16), 0.0, 1.0)
                vals.append(np.mean((img - target_scene(r, pose, 16, 16)) ** 2))
            return float(np.mean(vals))

        before = err()
        for _ in range(40):
            tr.train_step(tr.sample_batch())
        assert err() < before

    def test_clip_term_reported(self):
        tr = make_trainer(clip_weight=0.1)
        m = tr.train_step(tr.sample_batch())
        assert "clip_loss" in m
        assert 0.0 <= m["clip_loss"] <= 2.0


class TestInference:
    def test_render_view_shape_and_determinism(self):
        tr = make_trainer()
        rec = tr.records[0]
        pose = CameraPose(90.0, 0.0, 3.3, 75.0)
        a = tr.render_view(rec, pose, 16)
        b = tr.render_view(rec, pose, 16)
        assert a.shape == (16, 16, 3)
        assert a.min() >= 0.0
        np.testing.assert_array_equal(a, b)

    def test_free_text_prompt_renderable(self):
        tr = make_trainer()
        img = tr.render_view("a fox wearing a beret",
                             CameraPose(90.0, 45.0, 3.3, 75.0), 8)
        assert img.shape == (8, 8, 3)

    def test_style_seed_changes_output(self):
        tr = make_trainer()
        pose = CameraPose(90.0, 0.0, 3.3, 75.0)
        a = tr.render_view(tr.records[0], pose, 8, style_seed=1)
        b = tr.render_view(tr.records[0], pose, 8, style_seed=2)
        assert not np.array_equal(a, b)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        tr = make_trainer()
        for _ in range(3):
            tr.train_step(tr.sample_batch())
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, tr)
        tr2 = load_trainer(p1, tr.records, tr.oracle)
        save_checkpoint(p2, tr2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_restores_behavior(self, tmp_path):
        tr = make_trainer()
        for _ in range(2):
            tr.train_step(tr.sample_batch())
        p = tmp_path / "c.ckpt"
        save_checkpoint(p, tr)
        tr2 = load_trainer(p, tr.records, tr.oracle)
        assert tr2.step == tr.step
        assert tr2.anneal.alpha == pytest.approx(tr.anneal.alpha, abs=1e-7)
        assert tr2.moments.t == tr.moments.t
        pose = CameraPose(90.0, 10.0, 3.3, 75.0)
        np.testing.assert_array_equal(tr.render_view(tr.records[0], pose, 8),
                                      tr2.render_view(tr.records[0], pose, 8))

    def test_resumed_training_matches_moments(self, tmp_path):
        tr = make_trainer()
        tr.train_step(tr.sample_batch())
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, tr)
        tr2 = load_trainer(p, tr.records, tr.oracle)
        for k in tr.moments.m:
            np.testing.assert_allclose(tr2.moments.m[k], tr.moments.m[k],
                                       atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            read_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        tr = make_trainer()
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, tr)
        blob = p.read_bytes()
        p.write_bytes(blob[:len(blob) - 100])
        with pytest.raises(CheckpointError):
            read_checkpoint(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        tr = make_trainer()
        p = tmp_path / "x.ckpt"
        save_checkpoint(p, tr)
        p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(CheckpointError):
            read_checkpoint(p)

    def test_corrupt_header_rejected(self, tmp_path):
        tr = make_trainer()
        p = tmp_path / "h.ckpt"
        save_checkpoint(p, tr)
        blob = bytearray(p.read_bytes())
        blob[16] = ord("!")  # clobber the opening brace of the JSON header
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            read_checkpoint(p)

    def test_unsupported_version_rejected(self, tmp_path):
        tr = make_trainer()
        p = tmp_path / "v.ckpt"
        save_checkpoint(p, tr)
        blob = bytearray(p.read_bytes())
        blob[4] = 99
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            read_checkpoint(p)

    def test_offset_gap_rejected(self, tmp_path):
        p = tmp_path / "g.ckpt"
        write_checkpoint(p, {"a": np.zeros(2, dtype=np.float32),
                             "b": np.zeros(2, dtype=np.float32)},
                         step=0, adam_t=0, alpha=0.5, config={})
        blob = p.read_bytes()
        # bump b's offset to leave a gap
        bad = blob.replace(b'"offset":8', b'"offset":12')
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            read_checkpoint(p)

    def test_run_writes_metrics_and_checkpoints(self, tmp_path):
        records = tiny_records()
        cfg = TrainConfig(lr=1e-3, batch_size=2, total_steps=4, render_hw=16,
                          n_uniform=6, clip_weight=0.0, seed=0)
        tr = Trainer(records, cfg, tiny_decoder_config(),
                     SyntheticOracle(records, DiffusionSchedule()))
        mfile = tmp_path / "metrics.jsonl"
        with open(mfile, "w") as f:
            saved = tr.run(metrics_file=f, checkpoint_every=2,
                           checkpoint_dir=str(tmp_path))
        assert len(mfile.read_text().strip().splitlines()) == 4
        assert saved == [f"{tmp_path}/ckpt_000002", f"{tmp_path}/ckpt_000004"]
        for s in saved:
            header, _ = read_checkpoint(s)
            assert header["step"] in (2, 4)
