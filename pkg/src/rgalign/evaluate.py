"""Bidirectional retrieval evaluation: Recall@K / mean recall over frozen
embeddings, with optional matching-head re-ranking of the top candidates.

Direction naming: "text_query" ranks the image gallery per caption query;
"image_query" ranks the caption gallery per image query.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import encoders as enc
from .data import BatchLoader
from .diffcore import Tensor, no_grad

__all__ = [
    "CorpusEmbeddings", "RetrievalReport", "embed_corpus",
    "embed_corpus_loader", "recall_at_k", "rerank_itm", "mean_recall",
    "retrieval_report",
]


@dataclass
class CorpusEmbeddings:
    img: np.ndarray          # (G, d') unit rows
    txt: np.ndarray          # (G, d') unit rows
    v_seq: np.ndarray        # (G, Lv, d) encoder features for re-ranking
    t_seq: np.ndarray        # (G, Lt, d)
    t_mask: np.ndarray       # (G, Lt)
    scene_ids: list


def embed_corpus(records, params: enc.ModelParams, vocab, batch_size=64):
    loader = BatchLoader(records, vocab,
                         max_text_len=params.cfg.max_text_len,
                         with_regions=False)
    return embed_corpus_loader(loader, params, batch_size=batch_size)


def embed_corpus_loader(loader: BatchLoader, params: enc.ModelParams,
                        batch_size=64) -> CorpusEmbeddings:
    """Unit embeddings (and raw sequences) for every image and caption."""
    imgs, txts, v_seqs, t_seqs, t_masks, ids = [], [], [], [], [], []
    n = len(loader)
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            batch = loader._gather(idx)
            v = enc.encode_image(batch.images, params)
            t = enc.encode_text(batch.cap_ids, batch.cap_mask, params)
            imgs.append(enc.project(v.cls, "vision", params).data.copy())
            txts.append(enc.project(t.cls, "text", params).data.copy())
            v_seqs.append(v.seq.data.copy())
            t_seqs.append(t.seq.data.copy())
            t_masks.append(batch.cap_mask)
            ids.extend(batch.scene_ids)
    return CorpusEmbeddings(
        img=np.concatenate(imgs), txt=np.concatenate(txts),
        v_seq=np.concatenate(v_seqs), t_seq=np.concatenate(t_seqs),
        t_mask=np.concatenate(t_masks), scene_ids=ids)


def recall_at_k(scores, truth, ks=(1, 5, 10)):
    """Percentage of queries whose true gallery item ranks in the top k.

    Ranking is by descending score with ties broken by ascending gallery
    index.
    """
    scores = np.asarray(scores)
    truth = np.asarray(truth)
    q, g = scores.shape
    for k in ks:
        if k > g:
            raise ValueError(f"recall_at_k: k={k} exceeds gallery size {g}")
    true_vals = scores[np.arange(q), truth][:, None]
    better = (scores > true_vals).sum(axis=1)
    idx = np.arange(g)[None, :]
    ties_before = ((scores == true_vals) & (idx < truth[:, None])).sum(axis=1)
    rank = better + ties_before
    return {k: 100.0 * float(np.mean(rank < k)) for k in ks}


def _top_candidates(row, top_r):
    order = np.lexsort((np.arange(row.shape[0]), -row))
    return order[:top_r]


def rerank_itm(scores, top_r, corpus: CorpusEmbeddings,
               params: enc.ModelParams, direction, chunk=192):
    """Re-score each query's top candidates with the matching head.

    Returns adjusted scores: re-ranked candidates are lifted into [1, 2]
    by match probability; everything else is shifted below them, keeping
    its embedding-score order. `direction` is "text_query" (caption query,
    image gallery) or "image_query".
    """
    scores = np.asarray(scores)
    if top_r <= 0:
        return scores.copy()
    q, g = scores.shape
    top_r = min(top_r, g)
    adjusted = scores - 3.0
    pairs_q = []
    pairs_c = []
    for row in range(q):
        cands = _top_candidates(scores[row], top_r)
        pairs_q.extend([row] * len(cands))
        pairs_c.extend(cands.tolist())
    pairs_q = np.asarray(pairs_q)
    pairs_c = np.asarray(pairs_c)
    probs = np.empty(pairs_q.shape[0])
    with no_grad():
        for start in range(0, pairs_q.shape[0], chunk):
            sl = slice(start, start + chunk)
            if direction == "text_query":
                v = corpus.v_seq[pairs_c[sl]]
                t = corpus.t_seq[pairs_q[sl]]
                m = corpus.t_mask[pairs_q[sl]]
            elif direction == "image_query":
                v = corpus.v_seq[pairs_q[sl]]
                t = corpus.t_seq[pairs_c[sl]]
                m = corpus.t_mask[pairs_c[sl]]
            else:
                raise ValueError(f"unknown direction {direction!r}")
            fused = enc.fuse_batch(Tensor(v, dtype=v.dtype),
                                   Tensor(t, dtype=t.dtype), m, params)
            logits = enc.match_head(fused.cls, params).data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs[sl] = (e[:, 1] / e.sum(axis=1))
    adjusted[pairs_q, pairs_c] = 1.0 + probs
    return adjusted


@dataclass
class RetrievalReport:
    text_query_r1: float
    text_query_r5: float
    text_query_r10: float
    image_query_r1: float
    image_query_r5: float
    image_query_r10: float
    mR: float
    n_queries: int
    n_gallery: int

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self):
        rows = [
            ("text->image", self.text_query_r1, self.text_query_r5, self.text_query_r10),
            ("image->text", self.image_query_r1, self.image_query_r5, self.image_query_r10),
        ]
        lines = [f"{'direction':<14}{'R@1':>8}{'R@5':>8}{'R@10':>8}"]
        for name, r1, r5, r10 in rows:
            lines.append(f"{name:<14}{r1:>8.2f}{r5:>8.2f}{r10:>8.2f}")
        lines.append(f"mean recall (mR): {self.mR:.2f}  "
                     f"[{self.n_queries} queries x {self.n_gallery} gallery]")
        return "\n".join(lines)


def mean_recall(report: RetrievalReport) -> float:
    vals = [report.text_query_r1, report.text_query_r5, report.text_query_r10,
            report.image_query_r1, report.image_query_r5, report.image_query_r10]
    return float(np.mean(vals))


def retrieval_report(corpus: CorpusEmbeddings, rerank_top=0,
                     params=None) -> RetrievalReport:
    """Recall@1/5/10 in both directions plus their mean.

    The true pairing is positional: caption i belongs to image i.
    """
    g = corpus.img.shape[0]
    truth = np.arange(g)
    t2i = corpus.txt @ corpus.img.T
    i2t = corpus.img @ corpus.txt.T
    if rerank_top > 0:
        if params is None:
            raise ValueError("re-ranking needs model parameters")
        t2i = rerank_itm(t2i, rerank_top, corpus, params, "text_query")
        i2t = rerank_itm(i2t, rerank_top, corpus, params, "image_query")
    r_t = recall_at_k(t2i, truth)
    r_i = recall_at_k(i2t, truth)
    report = RetrievalReport(
        text_query_r1=r_t[1], text_query_r5=r_t[5], text_query_r10=r_t[10],
        image_query_r1=r_i[1], image_query_r5=r_i[5], image_query_r10=r_i[10],
        mR=0.0, n_queries=g, n_gallery=g)
    report.mR = mean_recall(report)
    return report
