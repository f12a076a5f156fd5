"""Optimizer arithmetic, schedule shape, step determinism/transactionality,
baseline equivalence, and checkpoint round-trips."""

import json
import os

import numpy as np
import pytest

from rgalign import data as D
from rgalign import diffcore as dc
from rgalign import encoders as enc
from rgalign import losses as L
from rgalign import train as T
from rgalign.diffcore import Tensor


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = D.GenConfig(seed=5, n_train=48, n_val=12, n_test=12, n_heldout=12)
    records = D.generate_dataset(cfg)
    D.write_dataset(records, root)
    D.build_vocab(cfg).to_file(os.path.join(root, "vocab.txt"))
    return str(root), cfg


def _tiny_cfg(**over):
    base = dict(epochs=1, batch_size=8, queue_capacity=32, seed=0)
    base.update(over)
    cfg = T.TrainConfig(**base)
    cfg.encoder.vocab_size = 64
    return cfg


def _one_batch(data_dir, batch_size=8, seed=0):
    records = [r for r in D.read_dataset(data_dir) if r.split == "train"]
    vocab = D.load_vocab(data_dir)
    loader = D.BatchLoader(records, vocab)
    return next(loader.epoch(batch_size, np.random.default_rng(seed)))


class TestAdamW:
    def test_zero_grads_no_decay_unchanged(self, rng):
        cfg = enc.EncoderConfig(image_size=16, vocab_size=8, max_text_len=4,
                                max_region_text_len=4, depth=1, fusion_depth=1)
        params = enc.init_params(cfg, rng)
        before = {n: t.data.copy() for n, t in params.items()}
        for _, t in params.items():
            t.grad = np.zeros_like(t.data)
        opt = T.AdamW(weight_decay=0.0)
        opt.step(params, lr=1e-3)
        for n, t in params.items():
            np.testing.assert_array_equal(t.data, before[n])

    def test_decoupled_decay_shrinks_params(self, rng):
        cfg = enc.EncoderConfig(image_size=16, vocab_size=8, max_text_len=4,
                                max_region_text_len=4, depth=1, fusion_depth=1)
        params = enc.init_params(cfg, rng, dtype="f64")
        before = params["proj_v.w"].data.copy()
        for _, t in params.items():
            t.grad = np.zeros_like(t.data)
        opt = T.AdamW(weight_decay=0.01)
        opt.step(params, lr=1e-3)
        np.testing.assert_allclose(params["proj_v.w"].data,
                                   before * (1 - 1e-5), rtol=1e-12)

    def test_matches_scalar_reference_recursion(self):
        # single scalar parameter, constant gradient 1, two steps
        cfg = enc.EncoderConfig(image_size=16, vocab_size=8, max_text_len=4,
                                max_region_text_len=4, depth=1, fusion_depth=1)
        p = Tensor(np.array([0.5]), requires_grad=True, dtype="f64")
        params = enc.ModelParams(cfg, {"w": p})
        opt = T.AdamW(weight_decay=0.0)
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1

        theta, m, v = 0.5, 0.0, 0.0
        for t in range(1, 3):
            p.grad = np.array([1.0])
            opt.step(params, lr=lr)
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            mhat, vhat = m / (1 - b1 ** t), v / (1 - b2 ** t)
            theta -= lr * mhat / (np.sqrt(vhat) + eps)
            assert abs(p.data[0] - theta) < 1e-10


class TestSchedule:
    def test_warmup_start_is_zero(self):
        assert T.lr_schedule(0, 1000, 1e-3) == 0.0

    def test_warmup_end_is_base(self):
        assert abs(T.lr_schedule(50, 1000, 1e-3) - 1e-3) < 1e-12

    def test_cosine_endpoint(self):
        assert abs(T.lr_schedule(1000, 1000, 1e-3) - 1e-4) < 1e-9

    def test_step_beyond_total_rejected(self):
        with pytest.raises(ValueError):
            T.lr_schedule(1001, 1000, 1e-3)

    def test_distillation_alpha_ramp(self):
        assert T.distillation_alpha(0, 1000, 0.4, 0.1) == 0.0
        assert abs(T.distillation_alpha(50, 1000, 0.4, 0.1) - 0.2) < 1e-12
        assert T.distillation_alpha(100, 1000, 0.4, 0.1) == 0.4
        assert T.distillation_alpha(500, 1000, 0.4, 0.1) == 0.4
        assert T.distillation_alpha(0, 1000, 0.4, 0.0) == 0.4  # ramp disabled

    def test_ema_momentum_ramp(self):
        assert T.ema_momentum_schedule(0, 750, 0.9, 0.995) == 0.9
        mid = T.ema_momentum_schedule(375, 750, 0.9, 0.995)
        assert 0.9 < mid < 0.995
        assert abs(T.ema_momentum_schedule(750, 750, 0.9, 0.995) - 0.995) < 1e-12
        # constant shadow coefficient when no ramp is configured
        assert T.ema_momentum_schedule(5, 750, 0.995, 0.995) == 0.995


class TestTrainStep:
    def test_two_trainers_identical_streams(self, tiny_data):
        data_dir, _ = tiny_data
        streams = []
        for _ in range(2):
            trainer = T.Trainer(_tiny_cfg())
            records = [r for r in D.read_dataset(data_dir) if r.split == "train"]
            loader = D.BatchLoader(records, D.load_vocab(data_dir))
            out = []
            for batch in loader.epoch(8, trainer.rng):
                out.append(trainer.train_step(batch, lr=1e-3).to_dict())
            streams.append(out)
        assert streams[0] == streams[1]

    def test_loss_finite_for_200_consecutive_steps(self, tiny_data):
        data_dir, _ = tiny_data
        trainer = T.Trainer(_tiny_cfg(epochs=34))
        records = [r for r in D.read_dataset(data_dir) if r.split == "train"]
        loader = D.BatchLoader(records, D.load_vocab(data_dir))
        steps = 0
        while steps < 200:
            for batch in loader.epoch(8, trainer.rng):
                bd = trainer.train_step(batch, lr=1e-3)
                assert np.isfinite(bd.total), f"non-finite total at step {steps}"
                steps += 1
                if steps >= 200:
                    break
        assert steps == 200

    def test_transactional_abort_restores_state(self, tiny_data, monkeypatch):
        data_dir, _ = tiny_data
        trainer = T.Trainer(_tiny_cfg())
        batch = _one_batch(data_dir)
        trainer.train_step(batch, lr=1e-3)  # one normal step first

        snap_params = {n: t.data.copy() for n, t in trainer.params.items()}
        snap_shadow = {n: t.data.copy() for n, t in trainer.shadow.items()}
        snap_m = {n: a.copy() for n, a in trainer.opt.m.items()}
        snap_qv = trainer.queue_v.state()
        step_before = trainer.step_count

        def poisoned(*args, **kwargs):
            return Tensor(np.nan), L.LossBreakdown(
                itc_mcd=np.nan, itm=0, rg_itc=0, rg_itm=0, box=0,
                total=float("nan"))

        monkeypatch.setattr(trainer, "_losses", poisoned)
        with pytest.raises(T.StepAborted):
            trainer.train_step(batch, lr=1e-3)
        for n, t in trainer.params.items():
            np.testing.assert_array_equal(t.data, snap_params[n])
        for n, t in trainer.shadow.items():
            np.testing.assert_array_equal(t.data, snap_shadow[n])
        for n, a in trainer.opt.m.items():
            np.testing.assert_array_equal(a, snap_m[n])
        np.testing.assert_array_equal(trainer.queue_v.storage, snap_qv["storage"])
        assert trainer.queue_v.valid_count == snap_qv["valid_count"]
        assert trainer.step_count == step_before
        assert all(t.grad is None for _, t in trainer.params.items())

    def test_momentum_shadow_never_has_grads(self, tiny_data):
        data_dir, _ = tiny_data
        trainer = T.Trainer(_tiny_cfg())
        trainer.train_step(_one_batch(data_dir), lr=1e-3)
        assert all(t.grad is None for t in trainer.shadow.tensors().values())

    def test_queue_untouched_when_mc_off(self, tiny_data):
        data_dir, _ = tiny_data
        cfg = _tiny_cfg()
        cfg.toggles.mc = False
        trainer = T.Trainer(cfg)
        trainer.train_step(_one_batch(data_dir), lr=1e-3)
        assert trainer.queue_v.valid_count == 0

    def test_toggles_zero_components(self, tiny_data):
        data_dir, _ = tiny_data
        cfg = _tiny_cfg()
        cfg.toggles.rg_itc = False
        cfg.toggles.rg_itm = False
        trainer = T.Trainer(cfg)
        bd = trainer.train_step(_one_batch(data_dir), lr=1e-3)
        assert bd.rg_itc == 0.0 and bd.rg_itm == 0.0
        assert bd.itc_mcd > 0 and bd.itm > 0 and bd.box > 0


class TestBaselineEquivalence:
    def test_all_toggles_off_matches_independent_itc_itm(self, tiny_data, f64_mode):
        """With every component off and the queue empty, the contrastive
        term is plain InfoNCE over online embeddings and the matching term
        is plain BCE; both are recomputed independently here."""
        data_dir, _ = tiny_data
        cfg = _tiny_cfg()
        cfg.toggles = T.Toggles(mc=False, md=False, rg_itc=False, rg_itm=False)
        trainer = T.Trainer(cfg)
        batch = _one_batch(data_dir)

        rng_clone = np.random.default_rng()
        rng_clone.bit_generator.state = trainer.rng.bit_generator.state

        bd = None
        with dc.Tape():
            total, bd = trainer._losses(batch, None, None)

        # independent InfoNCE over the same (recomputed) online embeddings
        with dc.no_grad():
            v = enc.encode_image(batch.images, trainer.params)
            t = enc.encode_text(batch.cap_ids, batch.cap_mask, trainer.params)
            zv = enc.project(v.cls, "vision", trainer.params).data
            zt = enc.project(t.cls, "text", trainer.params).data
        s = zv @ zt.T / cfg.tau

        def ce(mat):
            mx = mat.max(1, keepdims=True)
            ls = mat - mx - np.log(np.exp(mat - mx).sum(1, keepdims=True))
            return -np.mean(np.diag(ls))

        want_itc = 0.5 * (ce(s) + ce(s.T))
        assert abs(bd.itc_mcd - want_itc) < 1e-6

        # independent BCE from the same sampled negatives and match logits
        tneg, ineg = L.sample_global_negatives(
            Tensor(zv, dtype="f64"), Tensor(zt, dtype="f64"), cfg.tau, rng_clone)
        with dc.no_grad():
            kv = dc.concat([v.seq, v.seq, dc.gather_rows(v.seq, ineg)], axis=0)
            q = dc.concat([t.seq, dc.gather_rows(t.seq, tneg), t.seq], axis=0)
            m = np.concatenate([batch.cap_mask, batch.cap_mask[tneg], batch.cap_mask])
            fused = enc.fuse_batch(kv, q, m, trainer.params)
            logits = enc.match_head(fused.cls, trainer.params).data
        n = batch.n
        labels = np.concatenate([np.ones(n), np.zeros(2 * n)])
        mx = logits.max(1, keepdims=True)
        lsm = logits - mx - np.log(np.exp(logits - mx).sum(1, keepdims=True))
        want_itm = -np.mean(labels * lsm[:, 1] + (1 - labels) * lsm[:, 0])
        assert abs(bd.itm - want_itm) < 1e-6

        want_total = (cfg.weights.itc * want_itc + cfg.weights.itm * want_itm
                      + cfg.weights.box * bd.box)
        assert abs(bd.total - want_total) < 1e-6


class TestCheckpoint:
    def test_round_trip_bit_identical_next_step(self, tiny_data, tmp_path):
        data_dir, _ = tiny_data
        trainer = T.Trainer(_tiny_cfg())
        b1 = _one_batch(data_dir, seed=0)
        b2 = _one_batch(data_dir, seed=1)
        trainer.train_step(b1, lr=1e-3)
        T.save_checkpoint(str(tmp_path / "ck"), trainer)
        loaded = T.load_checkpoint(str(tmp_path / "ck"))
        a = trainer.train_step(b2, lr=1e-3).to_dict()
        b = loaded.train_step(b2, lr=1e-3).to_dict()
        assert a == b
        for n, t in trainer.params.items():
            np.testing.assert_array_equal(t.data, loaded.params[n].data)

    def test_missing_checkpoint_clear_error(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="index.json"):
            T.load_checkpoint(str(tmp_path / "nope"))


class TestFit:
    def test_zero_epochs_returns_initial_checkpoint(self, tiny_data, tmp_path):
        data_dir, _ = tiny_data
        out = str(tmp_path / "run0")
        summary = T.fit(_tiny_cfg(epochs=0), data_dir, out, quiet=True)
        assert summary["steps"] == 0
        assert os.path.exists(os.path.join(summary["best_checkpoint"], "index.json"))

    def test_fit_writes_logs_and_checkpoints(self, tiny_data, tmp_path):
        data_dir, _ = tiny_data
        out = str(tmp_path / "run1")
        summary = T.fit(_tiny_cfg(epochs=1), data_dir, out, quiet=True)
        assert summary["steps"] == 6
        steps = [json.loads(l) for l in open(os.path.join(out, "steps.jsonl"))]
        assert len(steps) == 6
        assert {"step", "itc_mcd", "itm", "rg_itc", "rg_itm", "box", "total",
                "lr"} <= set(steps[0])
        epochs = [json.loads(l) for l in open(os.path.join(out, "epochs.jsonl"))]
        assert epochs[0]["epoch"] == 1 and "val_mR" in epochs[0]

    def test_resume_equivalence(self, tiny_data, tmp_path):
        data_dir, _ = tiny_data
        full_out = str(tmp_path / "full")
        T.fit(_tiny_cfg(epochs=2), data_dir, full_out, quiet=True)
        part_out = str(tmp_path / "part")
        T.fit(_tiny_cfg(epochs=2), data_dir, part_out, quiet=True,
              stop_after_epoch=1)
        T.fit(_tiny_cfg(epochs=2), data_dir, part_out, resume=part_out,
              quiet=True)
        full_steps = open(os.path.join(full_out, "steps.jsonl")).read().splitlines()
        part_steps = open(os.path.join(part_out, "steps.jsonl")).read().splitlines()
        assert full_steps == part_steps
        full_epochs = open(os.path.join(full_out, "epochs.jsonl")).read().splitlines()
        part_epochs = open(os.path.join(part_out, "epochs.jsonl")).read().splitlines()
        assert full_epochs == part_epochs

    def test_dry_run_two_steps(self, tiny_data, tmp_path):
        data_dir, _ = tiny_data
        summary = T.fit(_tiny_cfg(epochs=5), data_dir, str(tmp_path / "dry"),
                        dry_run=True, quiet=True)
        assert summary == {"dry_run": True, "steps": 2}


class TestConfig:
    def test_json_round_trip(self):
        cfg = _tiny_cfg(epochs=4)
        cfg.toggles.rg_itm = False
        cfg.weights.box = 0.2
        again = T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()

    def test_queue_capacity_must_divide(self):
        with pytest.raises(ValueError, match="multiple"):
            T.TrainConfig(batch_size=6, queue_capacity=16).validate()

    def test_tau_positive(self):
        with pytest.raises(ValueError, match="tau"):
            T.TrainConfig(tau=0.0).validate()
