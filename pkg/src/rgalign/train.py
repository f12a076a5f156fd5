"""Optimization loop: decoupled-weight-decay Adam, warmup+cosine schedule,
per-step orchestration of online/momentum passes and all loss terms, and
bit-exact checkpointing.

Fixed step order: (1) shadow EMA update, (2) momentum forward on globals,
(3) online forwards and losses, (4) backward + optimizer apply, (5) enqueue
this step's momentum globals. A step is transactional: parameters,
optimizer state, queues, and the shadow are untouched if anything goes
non-finite before the apply phase.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from . import losses as L
from . import momentum as mom
from .data import BatchLoader, load_vocab, read_dataset
from .diffcore import Tape, Tensor, backward
from .tensorio import read_tensor, write_tensor

__all__ = [
    "Toggles", "TrainConfig", "AdamW", "lr_schedule", "distillation_alpha",
    "ema_momentum_schedule", "Trainer", "StepAborted", "save_checkpoint",
    "load_checkpoint", "fit",
]


class StepAborted(RuntimeError):
    """The step hit a non-finite quantity and rolled back."""


@dataclass
class Toggles:
    mc: bool = True       # queue-extended momentum candidates for global ITC
    md: bool = True       # soft distillation targets (alpha > 0)
    rg_itc: bool = True
    rg_itm: bool = True

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    tau: float = 0.07
    alpha: float = 0.4
    alpha_warmup_frac: float = 0.1  # ramp 0 -> alpha over this step fraction
    beta: float = 0.995             # EMA plateau
    beta_start: float = 0.995      # EMA at step 0 (< beta enables a cosine ramp)
    queue_capacity: int = 1024
    clip_norm: float = 1.0
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.1
    l1_weight: float = 1.0
    giou_weight: float = 1.0
    eval_rerank: int = 0
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    toggles: Toggles = field(default_factory=Toggles)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)

    def validate(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.queue_capacity % self.batch_size:
            raise ValueError(
                f"queue capacity {self.queue_capacity} must be a multiple of "
                f"batch size {self.batch_size}")
        self.weights.validate()
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        d["weights"] = self.weights.to_dict()
        d["toggles"] = self.toggles.to_dict()
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = L.LossWeights.from_dict(d["weights"])
        if "toggles" in d:
            d["toggles"] = Toggles.from_dict(d["toggles"])
        if "encoder" in d:
            d["encoder"] = enc.EncoderConfig.from_dict(d["encoder"])
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adam with decoupled weight decay:
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.step_count = 0

    def step(self, params: enc.ModelParams, lr):
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state(self):
        return {"m": dict(self.m), "v": dict(self.v), "step_count": self.step_count}

    def load_state(self, state):
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
        self.step_count = int(state["step_count"])


def lr_schedule(step, total_steps, base_lr, warmup_frac=0.05, final_frac=0.1):
    """Linear warmup over the first `warmup_frac` of steps, then cosine decay
    to `final_frac * base_lr` at `total_steps`."""
    if step > total_steps:
        raise ValueError(f"step {step} beyond total {total_steps}")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * step / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    lo = final_frac * base_lr
    return lo + (base_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


def distillation_alpha(step, total_steps, base_alpha, warmup_frac):
    """Ramp the distillation coefficient from 0 to its plateau.

    Early shadow predictions are sharply peaked on arbitrary candidates
    (temperature 0.07 over near-random similarities), so blending them at
    full strength from step 0 teaches wrong pairs; the ramp defers
    distillation until the shadow means something.
    """
    if warmup_frac <= 0:
        return base_alpha
    warmup = max(1, int(round(warmup_frac * total_steps)))
    return base_alpha * min(1.0, step / warmup)


def ema_momentum_schedule(step, total_steps, beta_start, beta_end):
    """Cosine ramp of the shadow's EMA coefficient from beta_start to
    beta_end over the run; constant when beta_start >= beta_end.

    Off by default: a fast-moving shadow makes the candidate queue
    internally inconsistent (entries written under different embedding
    geometries), which measurably destabilizes the contrastive loss; the
    high constant coefficient keeps the dictionary coherent.
    """
    if beta_start >= beta_end or total_steps <= 1:
        return beta_end
    progress = min(1.0, step / total_steps)
    cosine = (1.0 + math.cos(math.pi * progress)) / 2.0
    return beta_end - (beta_end - beta_start) * cosine


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, params=None):
        cfg.validate()
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.params = params if params is not None else enc.init_params(cfg.encoder, self.rng)
        self.params.set_requires_grad(True)
        self.shadow = mom.make_shadow(self.params)
        d = cfg.encoder.proj_dim
        self.queue_v = mom.MomentumQueue(cfg.queue_capacity, d)
        self.queue_t = mom.MomentumQueue(cfg.queue_capacity, d)
        self.opt = AdamW(weight_decay=cfg.weight_decay)
        self.step_count = 0
        self.epoch = 0

    # -- forward pieces -----------------------------------------------------

    def _momentum_globals(self, batch):
        v = enc.encode_image(batch.images, self.shadow)
        t = enc.encode_text(batch.cap_ids, batch.cap_mask, self.shadow)
        z_v = enc.project(v.cls, "vision", self.shadow)
        z_t = enc.project(t.cls, "text", self.shadow)
        return z_v.data.copy(), z_t.data.copy()

    def train_step(self, batch, lr=None, alpha=None, beta=None) -> L.LossBreakdown:
        cfg = self.cfg
        tg = cfg.toggles
        if lr is None:
            lr = cfg.lr
        if alpha is None:
            alpha = cfg.alpha
        if beta is None:
            beta = cfg.beta
        shadow_backup = {n: self.shadow[n].data.copy() for n in self.shadow.names()}

        mom.ema_update(self.params, self.shadow, beta)
        need_momentum = tg.mc or tg.md or tg.rg_itc
        z_v_m = z_t_m = None
        if need_momentum:
            z_v_m, z_t_m = self._momentum_globals(batch)

        try:
            with Tape() as tape:
                total, breakdown = self._losses(batch, z_v_m, z_t_m, alpha)
            if not np.isfinite(breakdown.total):
                raise StepAborted(f"non-finite total loss at step {self.step_count}")
            backward(tape, total)
            self._clip_grads(cfg.clip_norm)
        except StepAborted:
            for n, data in shadow_backup.items():
                self.shadow[n].data[:] = data
            self.params.zero_grads()
            raise

        self.opt.step(self.params, lr)
        self.params.zero_grads()
        if tg.mc:
            self.queue_v.enqueue(z_v_m)
            self.queue_t.enqueue(z_t_m)
        self.step_count += 1
        return breakdown

    def _losses(self, batch, z_v_m, z_t_m, alpha=None):
        cfg = self.cfg
        tg = cfg.toggles
        params = self.params
        n = batch.n
        if alpha is None:
            alpha = cfg.alpha

        v_out = enc.encode_image(batch.images, params)
        t_out = enc.encode_text(batch.cap_ids, batch.cap_mask, params)
        z_v = enc.project(v_out.cls, "vision", params)
        z_t = enc.project(t_out.cls, "text", params)

        has_regions = batch.region_owner.size > 0
        if has_regions:
            rv_out = enc.encode_image(batch.region_crops, params)
            rt_out = enc.encode_text(batch.frag_ids, batch.frag_mask, params)
            z_v_r = enc.project(rv_out.cls, "vision", params)
            z_t_r = enc.project(rt_out.cls, "text", params)
        else:
            rv_out = rt_out = z_v_r = z_t_r = None

        emb = L.EmbeddingBatch(
            z_v=z_v, z_t=z_t,
            z_v_m=z_v_m if z_v_m is not None else z_v.data,
            z_t_m=z_t_m if z_t_m is not None else z_t.data,
            z_v_r=z_v_r, z_t_r=z_t_r,
            region_owner=batch.region_owner, tau=cfg.tau)

        terms = {}

        # global contrastive with (optional) queue candidates and soft targets
        if tg.mc:
            cand_v = mom.candidate_set(self.queue_v, z_v_m)
            cand_t = mom.candidate_set(self.queue_t, z_t_m)
            target_cand_v, target_cand_t = cand_v, cand_t
        else:
            cand_v, cand_t = z_v, z_t
            target_cand_v, target_cand_t = z_v_m, z_t_m
        alpha = alpha if tg.md else 0.0
        if alpha > 0.0:
            targets = mom.soft_targets(z_v_m, z_t_m, target_cand_v, target_cand_t,
                                       alpha, cfg.tau)
        else:
            m_v = cand_v.shape[0]
            m_t = cand_t.shape[0]
            eye_t = np.zeros((n, m_t), dtype=z_v.data.dtype)
            eye_t[np.arange(n), np.arange(n)] = 1.0
            eye_v = np.zeros((n, m_v), dtype=z_v.data.dtype)
            eye_v[np.arange(n), np.arange(n)] = 1.0
            targets = mom.SoftTargets(q_i2t=eye_t, q_t2i=eye_v)
        terms["itc_mcd"] = L.itc_mcd_loss(emb, cand_v, cand_t, targets)

        # global matching with sampled in-batch hard negatives
        itm_skipped = n < 2
        if not itm_skipped:
            text_neg, image_neg = L.sample_global_negatives(z_v, z_t, cfg.tau, self.rng)
            kv = dc.concat([v_out.seq, v_out.seq,
                            dc.gather_rows(v_out.seq, image_neg)], axis=0)
            q = dc.concat([t_out.seq, dc.gather_rows(t_out.seq, text_neg),
                           t_out.seq], axis=0)
            mask = np.concatenate([batch.cap_mask, batch.cap_mask[text_neg],
                                   batch.cap_mask], axis=0)
            fused = enc.fuse_batch(kv, q, mask, params)
            labels = np.concatenate([np.ones(n), np.zeros(2 * n)])
            terms["itm"] = L.itm_loss(fused.cls, labels, params)
        else:
            terms["itm"] = None

        # region-global terms
        if has_regions and tg.rg_itc:
            terms["rg_itc"] = L.rg_itc_loss(emb)
        else:
            terms["rg_itc"] = None

        if has_regions:
            feats = L.RegionGlobalFeatures(
                global_v_seq=v_out.seq, global_t_seq=t_out.seq,
                global_t_mask=batch.cap_mask,
                region_v_seq=rv_out.seq, region_t_seq=rt_out.seq,
                region_t_mask=batch.frag_mask, owner=batch.region_owner)
            if tg.rg_itm and n >= 2:
                neg = L.sample_hard_negatives(emb, self.rng)
                bundle = L.build_region_global_fusions(feats, neg, params)
                terms["rg_itm"] = L.rg_itm_bce(bundle, params)
            else:
                bundle = L.build_region_global_fusions(feats, None, params)
                terms["rg_itm"] = None
            pred = enc.box_head(bundle.gv_rt_pos, params)
            terms["box"] = L.box_loss(pred, batch.region_boxes,
                                      cfg.l1_weight, cfg.giou_weight)
        else:
            terms["rg_itm"] = None
            terms["box"] = None

        weights = L.LossWeights(**self.cfg.weights.to_dict())
        if not tg.rg_itc:
            weights.rg_itc = 0.0
        if not tg.rg_itm:
            weights.rg_itm = 0.0
        return L.combine_losses(terms, weights, itm_skipped=itm_skipped)

    def _clip_grads(self, clip_norm):
        sq = 0.0
        for _, p in self.params.items():
            if p.grad is not None:
                sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(sq)
        if not math.isfinite(norm):
            raise StepAborted(f"non-finite gradients at step {self.step_count}")
        if clip_norm and norm > clip_norm:
            scale = clip_norm / norm
            for _, p in self.params.items():
                if p.grad is not None:
                    p.grad *= scale
        return norm


# ---------------------------------------------------------------------------
# checkpointing


def _write_group(tdir, group, arrays):
    for name, arr in arrays.items():
        write_tensor(os.path.join(tdir, f"{group}@{name}.hct"), arr)


def save_checkpoint(out_dir, trainer: Trainer):
    tdir = os.path.join(out_dir, "tensors")
    os.makedirs(tdir, exist_ok=True)
    _write_group(tdir, "param", {n: t.data for n, t in trainer.params.items()})
    _write_group(tdir, "shadow", {n: t.data for n, t in trainer.shadow.items()})
    _write_group(tdir, "opt_m", trainer.opt.m)
    _write_group(tdir, "opt_v", trainer.opt.v)
    write_tensor(os.path.join(tdir, "queue_v.hct"), trainer.queue_v.storage)
    write_tensor(os.path.join(tdir, "queue_t.hct"), trainer.queue_t.storage)
    index = {
        "config": trainer.cfg.to_dict(),
        "step": trainer.step_count,
        "epoch": trainer.epoch,
        "opt_step_count": trainer.opt.step_count,
        "rng_state": trainer.rng.bit_generator.state,
        "param_names": trainer.params.names(),
        "shadow_names": trainer.shadow.names(),
        "opt_names": sorted(trainer.opt.m.keys()),
        "queue_v": {"write_head": trainer.queue_v.write_head,
                    "valid_count": trainer.queue_v.valid_count},
        "queue_t": {"write_head": trainer.queue_t.write_head,
                    "valid_count": trainer.queue_t.valid_count},
    }
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1)


def load_checkpoint(ckpt_dir) -> Trainer:
    index_path = os.path.join(ckpt_dir, "index.json")
    if not os.path.exists(index_path):
        raise FileNotFoundError(f"no checkpoint index at {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    cfg = TrainConfig.from_dict(index["config"])
    tdir = os.path.join(ckpt_dir, "tensors")

    def group(prefix, names):
        return {n: read_tensor(os.path.join(tdir, f"{prefix}@{n}.hct")) for n in names}

    params = enc.ModelParams(cfg.encoder, {
        n: Tensor(a, requires_grad=True, dtype=a.dtype)
        for n, a in group("param", index["param_names"]).items()})
    trainer = Trainer(cfg, params=params)
    trainer.shadow = mom.MomentumParams(cfg.encoder, {
        n: Tensor(a, dtype=a.dtype)
        for n, a in group("shadow", index["shadow_names"]).items()})
    trainer.opt.m = group("opt_m", index["opt_names"])
    trainer.opt.v = group("opt_v", index["opt_names"])
    trainer.opt.step_count = index["opt_step_count"]
    trainer.queue_v = mom.MomentumQueue.from_state({
        "storage": read_tensor(os.path.join(tdir, "queue_v.hct")),
        **index["queue_v"]})
    trainer.queue_t = mom.MomentumQueue.from_state({
        "storage": read_tensor(os.path.join(tdir, "queue_t.hct")),
        **index["queue_t"]})
    trainer.rng.bit_generator.state = index["rng_state"]
    trainer.step_count = index["step"]
    trainer.epoch = index["epoch"]
    return trainer


# ---------------------------------------------------------------------------
# fit


def fit(cfg: TrainConfig, data_dir, out_dir, resume=None, dry_run=False,
        log_every=1, quiet=False, stop_after_epoch=None, init_from=None):
    """Train on the train split, evaluate on val each epoch, keep the best
    checkpoint by mean recall. Returns a summary dict.

    `stop_after_epoch` ends the run early (an interruption); passing the
    run directory back as `resume` continues it bit-identically.
    `init_from` names a checkpoint whose online parameters seed this run
    (fresh shadow/optimizer/queues/RNG) — the common warm start the
    ablation grid uses so every row fine-tunes the same initialization.
    """
    from . import evaluate as ev

    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    records = read_dataset(data_dir)
    vocab = load_vocab(data_dir)
    cfg.encoder.vocab_size = max(cfg.encoder.vocab_size, len(vocab))

    train_records = [r for r in records if r.split == "train"]
    val_records = [r for r in records if r.split == "val"]
    if not train_records:
        raise ValueError(f"no train records found in {data_dir}")

    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)

    loader = BatchLoader(train_records, vocab,
                         max_text_len=cfg.encoder.max_text_len,
                         max_region_text_len=cfg.encoder.max_region_text_len)
    val_loader = None
    if val_records:
        val_loader = BatchLoader(val_records, vocab,
                                 max_text_len=cfg.encoder.max_text_len,
                                 with_regions=False)

    if resume:
        trainer = load_checkpoint(os.path.join(resume, "checkpoints", "last"))
    elif init_from:
        donor = load_checkpoint(init_from)
        if donor.cfg.encoder.to_dict() != cfg.encoder.to_dict():
            raise ValueError("init_from checkpoint has a different encoder config")
        trainer = Trainer(cfg, params=donor.params)
    else:
        trainer = Trainer(cfg)

    steps_per_epoch = len(train_records) // cfg.batch_size
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    best = {"mR": -1.0, "epoch": -1}
    epoch_log_path = os.path.join(out_dir, "epochs.jsonl")
    if resume and os.path.exists(epoch_log_path):
        for line in open(epoch_log_path):
            entry = json.loads(line)
            if entry.get("val_mR", -1.0) > best["mR"]:
                best = {"mR": entry["val_mR"], "epoch": entry["epoch"]}
    step_log = open(os.path.join(out_dir, "steps.jsonl"),
                    "a" if resume else "w")
    epoch_log = open(epoch_log_path, "a" if resume else "w")
    best_path = os.path.join(out_dir, "checkpoints", "best")
    last_path = os.path.join(out_dir, "checkpoints", "last")

    try:
        def scheduled_step(batch):
            lr = lr_schedule(trainer.step_count, total_steps, cfg.lr,
                             cfg.warmup_frac, cfg.final_lr_frac)
            alpha = distillation_alpha(trainer.step_count, total_steps,
                                       cfg.alpha, cfg.alpha_warmup_frac)
            beta = ema_momentum_schedule(trainer.step_count, total_steps,
                                         cfg.beta_start, cfg.beta)
            bd = trainer.train_step(batch, lr=lr, alpha=alpha, beta=beta)
            if trainer.step_count % log_every == 0:
                step_log.write(json.dumps({"step": trainer.step_count,
                                           **bd.to_dict(), "lr": lr}) + "\n")

        if dry_run:
            it = loader.epoch(cfg.batch_size, trainer.rng, shuffle=True)
            for _ in range(2):
                scheduled_step(next(it))
            return {"dry_run": True, "steps": trainer.step_count}

        start_epoch = trainer.epoch
        for epoch in range(start_epoch, cfg.epochs):
            for batch in loader.epoch(cfg.batch_size, trainer.rng, shuffle=True):
                scheduled_step(batch)
            trainer.epoch = epoch + 1

            entry = {"epoch": trainer.epoch, "step": trainer.step_count}
            if val_loader is not None:
                corpus = ev.embed_corpus_loader(val_loader, trainer.params)
                report = ev.retrieval_report(corpus, rerank_top=cfg.eval_rerank,
                                             params=trainer.params)
                entry["val_mR"] = report.mR
                if report.mR > best["mR"]:
                    best = {"mR": report.mR, "epoch": trainer.epoch}
                    save_checkpoint(best_path, trainer)
            epoch_log.write(json.dumps(entry) + "\n")
            epoch_log.flush()
            step_log.flush()
            if not quiet:
                print(f"epoch {trainer.epoch}/{cfg.epochs} "
                      f"val_mR={entry.get('val_mR', float('nan')):.2f}")
            save_checkpoint(last_path, trainer)
            if stop_after_epoch is not None and trainer.epoch >= stop_after_epoch:
                return {"interrupted_after_epoch": trainer.epoch,
                        "steps": trainer.step_count,
                        "last_checkpoint": last_path}

        if best["epoch"] < 0:
            save_checkpoint(best_path, trainer)
        return {"best_val_mR": best["mR"], "best_epoch": best["epoch"],
                "steps": trainer.step_count,
                "best_checkpoint": best_path, "last_checkpoint": last_path}
    finally:
        step_log.close()
        epoch_log.close()
