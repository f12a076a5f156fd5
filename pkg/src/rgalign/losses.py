"""Training objectives: global contrastive with soft targets, global and
region-global matching with hard negatives, region-global contrastive, and
box regression, combined into one weighted total.

Conventions shared by every term: similarities are cosines of unit
embeddings scaled by a temperature; momentum-derived quantities enter as
constants (no gradient flows into the shadow model or into soft targets);
sampling draws via inverse CDF over exact softmax probabilities from an
explicitly seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from . import encoders
from .diffcore import Tensor

__all__ = [
    "EmbeddingBatch", "HardNegIndices", "LossBreakdown", "LossWeights",
    "rg_itc_loss", "itc_mcd_loss", "itm_loss", "match_bce",
    "sample_hard_negatives", "sample_global_negatives",
    "RegionGlobalFeatures", "FusionBundle", "build_region_global_fusions",
    "rg_itm_loss", "giou", "box_loss", "total_loss", "combine_losses",
]


# ---------------------------------------------------------------------------
# carriers


@dataclass
class EmbeddingBatch:
    """All online and momentum unit embeddings of one batch.

    z_v / z_t are the online global embeddings (N x d', on the graph);
    z_v_m / z_t_m the momentum globals (constants); z_v_r / z_t_r the
    online region embeddings (R x d') with region_owner mapping each
    region row to its sample index.
    """

    z_v: Tensor
    z_t: Tensor
    z_v_m: np.ndarray
    z_t_m: np.ndarray
    z_v_r: Optional[Tensor]
    z_t_r: Optional[Tensor]
    region_owner: np.ndarray
    tau: float

    @property
    def n(self):
        return self.z_v.shape[0]

    @property
    def n_regions(self):
        return 0 if self.z_v_r is None else self.z_v_r.shape[0]

    def validate(self, atol=1e-4):
        if self.tau <= 0:
            raise ValueError(f"temperature {self.tau} must be positive")
        for name, z in (("z_v", self.z_v), ("z_t", self.z_t),
                        ("z_v_r", self.z_v_r), ("z_t_r", self.z_t_r)):
            if z is None:
                continue
            arr = z.data if isinstance(z, Tensor) else np.asarray(z)
            norms = np.linalg.norm(arr, axis=-1)
            if np.any(np.abs(norms - 1.0) > atol):
                raise ValueError(f"{name}: rows deviate from unit norm by > {atol}")
        owner = np.asarray(self.region_owner)
        if owner.size and (owner.min() < 0 or owner.max() >= self.n):
            raise ValueError("region_owner indices out of batch range")
        return self


@dataclass
class HardNegIndices:
    """Per-region mismatched global indices, never equal to the owner."""

    text_neg: np.ndarray   # (R,) index j of the hard negative global text
    image_neg: np.ndarray  # (R,) index l of the hard negative global image


@dataclass
class LossWeights:
    itc: float = 0.25
    itm: float = 1.0
    rg_itc: float = 0.25
    rg_itm: float = 0.5
    box: float = 0.1

    def validate(self):
        for name, w in self.__dict__.items():
            if w < 0:
                raise ValueError(f"loss weight {name}={w} must be non-negative")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossBreakdown:
    itc_mcd: float
    itm: float
    rg_itc: float
    rg_itm: float
    box: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    itm_skipped: bool = False

    def to_dict(self):
        return {
            "itc_mcd": self.itc_mcd, "itm": self.itm, "rg_itc": self.rg_itc,
            "rg_itm": self.rg_itm, "box": self.box, "total": self.total,
        }


def total_loss(parts: LossBreakdown) -> float:
    """Recompute and check the weighted sum of the component losses."""
    w = parts.weights.validate()
    tot = (w.itc * parts.itc_mcd + w.itm * parts.itm + w.rg_itc * parts.rg_itc
           + w.rg_itm * parts.rg_itm + w.box * parts.box)
    if abs(tot - parts.total) > 1e-6 * max(1.0, abs(tot)):
        raise ValueError(f"total {parts.total} != weighted sum {tot}")
    return tot


def combine_losses(terms: dict, weights: LossWeights, itm_skipped=False):
    """Weighted Tensor sum of the active terms plus the value breakdown.

    `terms` maps {"itc_mcd","itm","rg_itc","rg_itm","box"} to scalar
    Tensors or None (inactive / zero-weight terms).
    """
    weights.validate()
    wmap = {"itc_mcd": weights.itc, "itm": weights.itm, "rg_itc": weights.rg_itc,
            "rg_itm": weights.rg_itm, "box": weights.box}
    total = None
    values = {}
    for name, w in wmap.items():
        t = terms.get(name)
        if t is None or w == 0.0:
            values[name] = 0.0 if t is None else t.item()
            continue
        values[name] = t.item()
        piece = dc.mul(t, np.asarray(w, dtype=t.data.dtype))
        total = piece if total is None else dc.add(total, piece)
    if total is None:
        total = Tensor(0.0)
    breakdown = LossBreakdown(
        itc_mcd=values["itc_mcd"], itm=values["itm"], rg_itc=values["rg_itc"],
        rg_itm=values["rg_itm"], box=values["box"], total=total.item(),
        weights=weights, itm_skipped=itm_skipped)
    return total, breakdown


# ---------------------------------------------------------------------------
# contrastive terms


def _onehot(rows, cols, hot, dtype):
    m = np.zeros((rows, cols), dtype=dtype)
    m[np.arange(rows), hot] = 1.0
    return m


def rg_itc_loss(batch: EmbeddingBatch) -> Tensor:
    """Region-to-global contrastive loss over all region pairs.

    Each region's vision embedding is scored against the N global momentum
    text embeddings (positive = own sample) and vice versa for the region
    text embedding; both direction terms are averaged over 2R. Candidates
    are the batch only; the queue is never consulted here.
    """
    r = batch.n_regions
    if r < 1:
        raise ValueError("rg_itc_loss: empty region list")
    owner = np.asarray(batch.region_owner)
    inv_tau = 1.0 / batch.tau

    logits_v = dc.mul(dc.matmul(batch.z_v_r, batch.z_t_m.T),
                      np.asarray(inv_tau, dtype=batch.z_v_r.data.dtype))
    logits_t = dc.mul(dc.matmul(batch.z_t_r, batch.z_v_m.T),
                      np.asarray(inv_tau, dtype=batch.z_t_r.data.dtype))
    hot = _onehot(r, batch.n, owner, logits_v.data.dtype)
    pos_v = dc.reduce_sum(dc.mul(dc.log_softmax(logits_v), hot))
    pos_t = dc.reduce_sum(dc.mul(dc.log_softmax(logits_t), hot))
    total = dc.add(pos_v, pos_t)
    return dc.mul(total, np.asarray(-1.0 / (2.0 * r), dtype=total.data.dtype))


def itc_mcd_loss(batch: EmbeddingBatch, cand_v, cand_t, targets) -> Tensor:
    """Global contrastive loss against (possibly queue-extended) candidates.

    Cross-entropy of the online similarity distributions against the given
    row-stochastic targets, averaged over both directions: the target for
    sample i places its ground-truth mass at candidate index i.
    """
    n = batch.n
    q_i2t = np.asarray(targets.q_i2t)
    q_t2i = np.asarray(targets.q_t2i)
    cand_v_t = cand_v if isinstance(cand_v, Tensor) else Tensor(cand_v, dtype=np.asarray(cand_v).dtype)
    cand_t_t = cand_t if isinstance(cand_t, Tensor) else Tensor(cand_t, dtype=np.asarray(cand_t).dtype)
    m_t, m_v = cand_t_t.shape[0], cand_v_t.shape[0]
    if q_i2t.shape != (n, m_t) or q_t2i.shape != (n, m_v):
        raise ValueError(
            f"itc_mcd_loss: target shapes {q_i2t.shape}/{q_t2i.shape} do not match "
            f"batch {n} x candidates {m_t}/{m_v}")
    inv_tau = np.asarray(1.0 / batch.tau, dtype=batch.z_v.data.dtype)
    ls_i2t = dc.log_softmax(dc.mul(dc.matmul(batch.z_v, dc.transpose(cand_t_t, (1, 0))), inv_tau))
    ls_t2i = dc.log_softmax(dc.mul(dc.matmul(batch.z_t, dc.transpose(cand_v_t, (1, 0))), inv_tau))
    ce = dc.add(dc.reduce_sum(dc.mul(ls_i2t, q_i2t)), dc.reduce_sum(dc.mul(ls_t2i, q_t2i)))
    return dc.mul(ce, np.asarray(-1.0 / (2.0 * n), dtype=ce.data.dtype))


# ---------------------------------------------------------------------------
# matching terms


def match_bce(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy of two-way match logits against 0/1 labels."""
    labels = np.asarray(labels, dtype=logits.data.dtype)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"match_bce: {logits.shape[0]} logits vs {labels.shape[0]} labels")
    ls = dc.log_softmax(logits)
    pick = np.stack([1.0 - labels, labels], axis=1).astype(logits.data.dtype)
    return dc.mul(dc.reduce_sum(dc.mul(ls, pick)),
                  np.asarray(-1.0 / labels.shape[0], dtype=logits.data.dtype))


def itm_loss(fused_cls: Tensor, labels, params: encoders.ModelParams) -> Tensor:
    """Global image-text matching BCE over positives and sampled negatives."""
    return match_bce(encoders.match_head(fused_cls, params), labels)


def sample_global_negatives(z_v, z_t, tau, rng):
    """One hard negative text per image and image per text, in batch.

    P(j | i) is proportional to exp(similarity / tau) over j != i, using
    the online global embeddings. Returns (text_neg, image_neg) index
    arrays. Requires a batch of at least two.
    """
    zv = z_v.data if isinstance(z_v, Tensor) else np.asarray(z_v)
    zt = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
    n = zv.shape[0]
    if n < 2:
        raise ValueError("sample_global_negatives: batch size must be >= 2")
    sim = (zv @ zt.T) / tau
    text_neg = _draw_excluding(sim, np.arange(n), rng)
    image_neg = _draw_excluding(sim.T, np.arange(n), rng)
    return text_neg, image_neg


def sample_hard_negatives(batch: EmbeddingBatch, rng) -> HardNegIndices:
    """Similarity-proportional mismatched globals for every region."""
    if batch.n < 2:
        raise ValueError("sample_hard_negatives: batch size must be >= 2")
    if batch.n_regions < 1:
        raise ValueError("sample_hard_negatives: empty region list")
    owner = np.asarray(batch.region_owner)
    sim_vt = (batch.z_v_r.data @ batch.z_t.data.T) / batch.tau   # (R, N)
    sim_tv = (batch.z_t_r.data @ batch.z_v.data.T) / batch.tau
    text_neg = _draw_excluding(sim_vt, owner, rng)
    image_neg = _draw_excluding(sim_tv, owner, rng)
    return HardNegIndices(text_neg=text_neg, image_neg=image_neg)


def _draw_excluding(logit_rows, excluded, rng):
    """Inverse-CDF draw per row from softmax(logits) with one index barred."""
    rows = np.asarray(logit_rows, dtype=np.float64).copy()
    n = rows.shape[1]
    out = np.empty(rows.shape[0], dtype=np.int64)
    rows[np.arange(rows.shape[0]), excluded] = -np.inf
    rows -= rows.max(axis=1, keepdims=True)
    p = np.exp(rows)
    p /= p.sum(axis=1, keepdims=True)
    for r in range(rows.shape[0]):
        cdf = np.cumsum(p[r])
        cdf[-1] = 1.0
        out[r] = np.searchsorted(cdf, rng.random(), side="right")
        if out[r] >= n:  # guard against fp overshoot
            out[r] = n - 1
        if out[r] == excluded[r]:
            out[r] = (out[r] + 1) % n
    return out


# ---------------------------------------------------------------------------
# region-global matching


@dataclass
class RegionGlobalFeatures:
    """Encoder outputs needed to fuse region/global pairs."""

    global_v_seq: Tensor
    global_t_seq: Tensor
    global_t_mask: np.ndarray
    region_v_seq: Tensor
    region_t_seq: Tensor
    region_t_mask: np.ndarray
    owner: np.ndarray


@dataclass
class FusionBundle:
    gv_rt_pos: Tensor            # fuse(global image, region text), matched
    rv_gt_pos: Optional[Tensor]  # fuse(region image, global text), matched
    rv_gt_neg: Optional[Tensor]  # mismatched via sampled text index
    gv_rt_neg: Optional[Tensor]  # mismatched via sampled image index


def build_region_global_fusions(feats: RegionGlobalFeatures,
                                neg: Optional[HardNegIndices],
                                params: encoders.ModelParams) -> FusionBundle:
    """Fuse the positive and (optionally) hard-negative region-global pairs.

    The two pairings batch separately because their query lengths differ:
    global-text queries over region-vision keys, and region-text queries
    over global-vision keys. The matched gv-rt fusion doubles as the box
    head input, so it is always built.
    """
    owner = np.asarray(feats.owner)
    r = owner.shape[0]
    if neg is not None:
        for name, idx in (("text_neg", neg.text_neg), ("image_neg", neg.image_neg)):
            idx = np.asarray(idx)
            if idx.shape[0] != r:
                raise ValueError(f"negative indices {name} cover {idx.shape[0]} of {r} regions")
            if np.any(idx == owner):
                raise ValueError(f"negative indices {name} collide with the anchor sample")

    if neg is None:
        v_kv = dc.gather_rows(feats.global_v_seq, owner)
        fused = encoders.fuse_batch(v_kv, feats.region_t_seq, feats.region_t_mask, params)
        return FusionBundle(gv_rt_pos=fused.cls, rv_gt_pos=None,
                            rv_gt_neg=None, gv_rt_neg=None)

    # region-vision keys, global-text queries: [matched; mismatched]
    t_idx = np.concatenate([owner, np.asarray(neg.text_neg)])
    rv_kv = dc.concat([feats.region_v_seq, feats.region_v_seq], axis=0)
    rv_q = dc.gather_rows(feats.global_t_seq, t_idx)
    rv_mask = np.asarray(feats.global_t_mask)[t_idx]
    rv_fused = encoders.fuse_batch(rv_kv, rv_q, rv_mask, params)

    # global-vision keys, region-text queries: [matched; mismatched]
    v_idx = np.concatenate([owner, np.asarray(neg.image_neg)])
    gv_kv = dc.gather_rows(feats.global_v_seq, v_idx)
    gv_q = dc.concat([feats.region_t_seq, feats.region_t_seq], axis=0)
    gv_mask = np.concatenate([feats.region_t_mask, feats.region_t_mask], axis=0)
    gv_fused = encoders.fuse_batch(gv_kv, gv_q, gv_mask, params)

    return FusionBundle(
        gv_rt_pos=dc.gather_rows(gv_fused.cls, np.arange(r)),
        gv_rt_neg=dc.gather_rows(gv_fused.cls, np.arange(r, 2 * r)),
        rv_gt_pos=dc.gather_rows(rv_fused.cls, np.arange(r)),
        rv_gt_neg=dc.gather_rows(rv_fused.cls, np.arange(r, 2 * r)),
    )


def rg_itm_bce(bundle: FusionBundle, params: encoders.ModelParams) -> Tensor:
    """BCE over the 2R positives and 2R negatives of a fusion bundle."""
    if bundle.rv_gt_pos is None or bundle.rv_gt_neg is None or bundle.gv_rt_neg is None:
        raise ValueError("rg_itm_bce: bundle lacks negatives")
    r = bundle.gv_rt_pos.shape[0]
    cls = dc.concat([bundle.rv_gt_pos, bundle.gv_rt_pos,
                     bundle.rv_gt_neg, bundle.gv_rt_neg], axis=0)
    labels = np.concatenate([np.ones(2 * r), np.zeros(2 * r)])
    return match_bce(encoders.match_head(cls, params), labels)


def rg_itm_loss(feats: RegionGlobalFeatures, neg: HardNegIndices,
                params: encoders.ModelParams) -> Tensor:
    """Region-global matching loss: fuse pairs, judge with the shared head."""
    if neg is None:
        raise ValueError("rg_itm_loss: negative indices are required")
    bundle = build_region_global_fusions(feats, neg, params)
    return rg_itm_bce(bundle, params)


# ---------------------------------------------------------------------------
# box regression


def _columns(t: Tensor):
    return [dc.select(t, 1, i) for i in range(4)]


def giou(a, b) -> Tensor:
    """Generalized IoU of center-size boxes; elementwise over rows.

    IoU minus the normalized dead area of the smallest enclosing box;
    values lie in [-1, 1] with 1 only for identical boxes.
    """
    a = _as_boxes(a)
    b = _as_boxes(b)
    if a.shape != b.shape:
        raise ValueError(f"giou: shape mismatch {a.shape} vs {b.shape}")
    if np.any(a.data[:, 2] * a.data[:, 3] <= 0) or np.any(b.data[:, 2] * b.data[:, 3] <= 0):
        raise ValueError("giou: zero-area box")
    acx, acy, aw, ah = _columns(a)
    bcx, bcy, bw, bh = _columns(b)
    ax0, ax1 = dc.sub(acx, dc.mul(aw, 0.5)), dc.add(acx, dc.mul(aw, 0.5))
    ay0, ay1 = dc.sub(acy, dc.mul(ah, 0.5)), dc.add(acy, dc.mul(ah, 0.5))
    bx0, bx1 = dc.sub(bcx, dc.mul(bw, 0.5)), dc.add(bcx, dc.mul(bw, 0.5))
    by0, by1 = dc.sub(bcy, dc.mul(bh, 0.5)), dc.add(bcy, dc.mul(bh, 0.5))

    iw = dc.relu(dc.sub(dc.minimum(ax1, bx1), dc.maximum(ax0, bx0)))
    ih = dc.relu(dc.sub(dc.minimum(ay1, by1), dc.maximum(ay0, by0)))
    inter = dc.mul(iw, ih)
    union = dc.sub(dc.add(dc.mul(aw, ah), dc.mul(bw, bh)), inter)
    cw = dc.sub(dc.maximum(ax1, bx1), dc.minimum(ax0, bx0))
    ch = dc.sub(dc.maximum(ay1, by1), dc.minimum(ay0, by0))
    c_area = dc.mul(cw, ch)
    return dc.sub(dc.div(inter, union), dc.div(dc.sub(c_area, union), c_area))


def _as_boxes(x):
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64),
                                               dtype=np.float64)
    if t.ndim == 1:
        t = dc.reshape(t, (1, 4))
    if t.ndim != 2 or t.shape[1] != 4:
        raise ValueError(f"expected (R, 4) boxes, got shape {t.shape}")
    return t


def box_loss(predicted: Tensor, truth, l1_weight=1.0, giou_weight=1.0) -> Tensor:
    """Mean per-region L1 distance plus (1 - GIoU), each term weighted."""
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"box_loss: {predicted.shape} predictions vs {truth.shape} truths")
    r = predicted.shape[0]
    dt = predicted.data.dtype
    l1 = dc.reduce_sum(dc.absolute(dc.sub(predicted, Tensor(truth, dtype=truth.dtype))))
    g = dc.reduce_sum(dc.sub(np.asarray(1.0, dtype=dt),
                             giou(predicted, Tensor(truth, dtype=truth.dtype))))
    per_region = dc.add(dc.mul(l1, np.asarray(l1_weight, dtype=dt)),
                        dc.mul(g, np.asarray(giou_weight, dtype=dt)))
    return dc.mul(per_region, np.asarray(1.0 / r, dtype=dt))
