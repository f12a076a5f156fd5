"""Named invariant suites: gradient checks, loss oracles, sampling
fidelity, and momentum mechanics. Every check prints one PASS/FAIL line;
the runner reports failures by invariant name.

All gradient work runs in 64-bit mode regardless of the session default.
"""

from __future__ import annotations

import collections
import math

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from . import losses
from . import momentum as mom
from .diffcore import Tensor, set_default_dtype, default_dtype
from .gradcheck import finite_difference_check

__all__ = ["run_suite", "SUITES", "Check"]

Check = collections.namedtuple("Check", "name fn")


class _f64_mode:
    def __enter__(self):
        self._old = "f64" if default_dtype() == np.float64 else "f32"
        set_default_dtype("f64")
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._old)
        return False


def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# kernel-level finite differences


def _kernel_cases(rng):
    """(name, f, x) triples: scalar-valued compositions probing one kernel."""
    r = rng.standard_normal
    w = Tensor(r((5, 3)), dtype="f64")
    bias = Tensor(r(4), dtype="f64")
    ln_g = Tensor(r(5), dtype="f64")
    ln_b = Tensor(r(5), dtype="f64")
    idx = rng.integers(0, 4, size=6)
    mask = ((rng.random((1, 1, 1, 4)) > 0.3) - 1.0) * 1e9
    return [
        ("add", lambda x: dc.reduce_sum(dc.mul(dc.add(x, 0.5), pickc(x))), r((3, 4))),
        ("sub", lambda x: dc.reduce_sum(dc.mul(dc.sub(x, 1.5), pickc(x))), r((3, 4))),
        ("mul", lambda x: dc.reduce_sum(dc.mul(x, dc.add(x, 1.0))), r((2, 5))),
        ("div", lambda x: dc.reduce_sum(dc.div(x, dc.add(dc.mul(x, x), 2.0))), r((6,))),
        ("neg", lambda x: dc.reduce_sum(dc.mul(dc.neg(x), x)), r((7,))),
        ("matmul", lambda x: dc.reduce_sum(dc.matmul(x, w)), r((4, 5))),
        ("bias_add", lambda x: dc.reduce_sum(dc.mul(dc.bias_add(x, bias), x)), r((3, 4))),
        ("gelu", lambda x: dc.reduce_sum(dc.gelu(x)), r((9,))),
        ("sigmoid", lambda x: dc.reduce_sum(dc.sigmoid(x)), r((8,))),
        ("relu", lambda x: dc.reduce_sum(dc.mul(dc.relu(x), x)), r((9,)) + 0.2),
        ("absolute", lambda x: dc.reduce_sum(dc.absolute(x)), r((9,)) + 0.2),
        ("log", lambda x: dc.reduce_sum(dc.log(dc.add(dc.mul(x, x), 1.0))), r((6,))),
        ("exp", lambda x: dc.reduce_sum(dc.exp(dc.mul(x, 0.3))), r((6,))),
        ("maximum", lambda x: dc.reduce_sum(dc.maximum(x, dc.mul(x, -1.0))), r((8,)) + 0.3),
        ("minimum", lambda x: dc.reduce_sum(dc.minimum(x, dc.mul(x, -1.0))), r((8,)) + 0.3),
        ("layer_norm", lambda x: dc.reduce_sum(dc.mul(
            dc.layer_norm(x, ln_g, ln_b), pickc(x))), r((3, 5))),
        ("softmax", lambda x: dc.reduce_sum(dc.mul(dc.softmax(x), pickc(x))), r((2, 6))),
        ("log_softmax", lambda x: dc.reduce_sum(dc.mul(dc.log_softmax(x), pickc(x))), r((2, 6))),
        ("l2_normalize", lambda x: dc.reduce_sum(dc.mul(dc.l2_normalize(x), pickc(x))), r((3, 4))),
        ("sdpa", lambda x: dc.reduce_sum(dc.sdpa(
            dc.reshape(x, (1, 2, 3, 4)), dc.reshape(x, (1, 2, 3, 4)),
            dc.reshape(x, (1, 2, 3, 4)), mask=None)), r((24,))),
        ("sdpa_masked", lambda x: dc.reduce_sum(dc.sdpa(
            dc.reshape(x, (1, 1, 4, 3)), dc.reshape(x, (1, 1, 4, 3)),
            dc.reshape(x, (1, 1, 4, 3)), mask=mask)), r((12,))),
        ("gather_rows", lambda x: dc.reduce_sum(dc.mul(dc.gather_rows(x, idx), 1.5)), r((4, 3))),
        ("select", lambda x: dc.reduce_sum(dc.select(x, 1, 1)), r((3, 4))),
        ("concat", lambda x: dc.reduce_sum(dc.mul(dc.concat([x, dc.mul(x, 2.0)], axis=0), 0.5)), r((2, 3))),
        ("stack", lambda x: dc.reduce_sum(dc.stack([x, dc.mul(x, x)], axis=1)), r((4,))),
        ("reshape", lambda x: dc.reduce_sum(dc.mul(dc.reshape(x, (2, 6)), pickd(x))), r((3, 4))),
        ("transpose", lambda x: dc.reduce_sum(dc.mul(dc.transpose(x, (1, 0)), 2.0)), r((3, 4))),
        ("reduce_mean", lambda x: dc.reduce_mean(dc.mul(x, x)), r((5, 3))),
    ]


def pickc(x):
    """Deterministic non-constant weights so reductions expose all inputs."""
    shape = x.shape if isinstance(x, Tensor) else np.asarray(x).shape
    n = int(np.prod(shape))
    return Tensor(np.linspace(0.5, 1.5, n).reshape(shape), dtype="f64")


def pickd(x):
    return Tensor(np.linspace(-1.0, 1.0, 12).reshape(2, 6), dtype="f64")


def check_kernel_gradients(seeds=5, tol=1e-4):
    """Central differences vs analytic gradients for every kernel."""
    worst = ("", 0.0)
    total = 0
    with _f64_mode():
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            for name, f, x in _kernel_cases(rng):
                err = finite_difference_check(f, Tensor(x, dtype="f64"), h=1e-5)
                total += 1
                if err > worst[1]:
                    worst = (name, err)
                if err > tol:
                    return False, f"kernel {name}: fd error {err:.3e} > {tol}"
    return True, f"{total} kernel cases, worst {worst[0]} at {worst[1]:.2e}"


# ---------------------------------------------------------------------------
# loss-level finite differences on a micro-batch


def _micro_world(seed=0):
    """Tiny f64 model plus a 2-sample / 2-region synthetic batch."""
    rng = np.random.default_rng(seed)
    cfg = enc.EncoderConfig(image_size=16, vocab_size=12, max_text_len=6,
                            max_region_text_len=5)
    params = enc.init_params(cfg, rng, dtype="f64")
    images = rng.random((2, 16, 16, 3))
    crops = rng.random((2, 16, 16, 3))
    cap_ids = rng.integers(3, 12, size=(2, 6))
    cap_ids[:, 0] = enc.CLS_ID
    cap_mask = np.ones((2, 6))
    cap_mask[:, 5:] = 0
    frag_ids = rng.integers(3, 12, size=(2, 5))
    frag_ids[:, 0] = enc.CLS_ID
    frag_mask = np.ones((2, 5))
    owner = np.array([0, 1])
    boxes = np.array([[0.4, 0.4, 0.3, 0.35], [0.6, 0.55, 0.25, 0.3]])
    z_v_m = _unit(rng.standard_normal((2, cfg.proj_dim)))
    z_t_m = _unit(rng.standard_normal((2, cfg.proj_dim)))
    return dict(rng=rng, cfg=cfg, params=params, images=images, crops=crops,
                cap_ids=cap_ids, cap_mask=cap_mask, frag_ids=frag_ids,
                frag_mask=frag_mask, owner=owner, boxes=boxes,
                z_v_m=z_v_m, z_t_m=z_t_m)


def _micro_embeddings(w, params):
    v = enc.encode_image(w["images"], params)
    t = enc.encode_text(w["cap_ids"], w["cap_mask"], params)
    rv = enc.encode_image(w["crops"], params)
    rt = enc.encode_text(w["frag_ids"], w["frag_mask"], params)
    batch = losses.EmbeddingBatch(
        z_v=enc.project(v.cls, "vision", params),
        z_t=enc.project(t.cls, "text", params),
        z_v_m=w["z_v_m"], z_t_m=w["z_t_m"],
        z_v_r=enc.project(rv.cls, "vision", params),
        z_t_r=enc.project(rt.cls, "text", params),
        region_owner=w["owner"], tau=0.07)
    feats = losses.RegionGlobalFeatures(
        global_v_seq=v.seq, global_t_seq=t.seq, global_t_mask=w["cap_mask"],
        region_v_seq=rv.seq, region_t_seq=rt.seq, region_t_mask=w["frag_mask"],
        owner=w["owner"])
    return batch, feats


def _loss_builders(w):
    """name -> loss(params) closures with sampling fixed up front."""
    rng = np.random.default_rng(77)
    neg = losses.HardNegIndices(text_neg=np.array([1, 0]), image_neg=np.array([1, 0]))
    tneg, ineg = np.array([1, 0]), np.array([1, 0])
    targets = mom.soft_targets(w["z_v_m"], w["z_t_m"], w["z_v_m"], w["z_t_m"],
                               alpha=0.4, tau=0.07)

    def rg_itc(params):
        batch, _ = _micro_embeddings(w, params)
        return losses.rg_itc_loss(batch)

    def itc_mcd(params):
        batch, _ = _micro_embeddings(w, params)
        return losses.itc_mcd_loss(batch, w["z_v_m"], w["z_t_m"], targets)

    def itm(params):
        v = enc.encode_image(w["images"], params)
        t = enc.encode_text(w["cap_ids"], w["cap_mask"], params)
        kv = dc.concat([v.seq, v.seq, dc.gather_rows(v.seq, ineg)], axis=0)
        q = dc.concat([t.seq, dc.gather_rows(t.seq, tneg), t.seq], axis=0)
        m = np.concatenate([w["cap_mask"], w["cap_mask"][tneg], w["cap_mask"]])
        fused = enc.fuse_batch(kv, q, m, params)
        return losses.itm_loss(fused.cls, np.array([1, 1, 0, 0, 0, 0.0]), params)

    def rg_itm(params):
        _, feats = _micro_embeddings(w, params)
        return losses.rg_itm_loss(feats, neg, params)

    def box(params):
        _, feats = _micro_embeddings(w, params)
        bundle = losses.build_region_global_fusions(feats, None, params)
        pred = enc.box_head(bundle.gv_rt_pos, params)
        return losses.box_loss(pred, w["boxes"])

    return {"rg_itc": rg_itc, "itc_mcd": itc_mcd, "itm": itm,
            "rg_itm": rg_itm, "box": box}


_PROBE_PARAMS = ("vision.patch.b", "text.blk0.ln2.g", "match.b", "box.b",
                 "fusion.blk0.cross.bq")

_LOSS_PROBES = {
    "rg_itc": ("vision.patch.b", "text.blk0.ln2.g"),
    "itc_mcd": ("vision.patch.b", "text.blk0.ln2.g"),
    "itm": ("match.b", "fusion.blk0.cross.bq", "vision.patch.b"),
    "rg_itm": ("match.b", "fusion.blk0.cross.bq"),
    "box": ("box.b", "fusion.blk0.cross.bq"),
}


def check_loss_gradients(tol=1e-4):
    """Every loss term vs central differences, through the full encoders."""
    with _f64_mode():
        w = _micro_world()
        params = w["params"]
        builders = _loss_builders(w)
        worst = ("", 0.0)
        for loss_name, build in builders.items():
            for pname in _LOSS_PROBES[loss_name]:
                def f(x, _pname=pname, _build=build):
                    old = params.tensors()[_pname]
                    params.tensors()[_pname] = x
                    try:
                        return _build(params)
                    finally:
                        params.tensors()[_pname] = old
                err = finite_difference_check(f, Tensor(params[pname].data.copy(),
                                                        dtype="f64"), h=1e-5)
                if err > worst[1]:
                    worst = (f"{loss_name}/{pname}", err)
                if err > tol:
                    return False, f"{loss_name} wrt {pname}: fd error {err:.3e} > {tol}"
    return True, f"five losses through encoders, worst {worst[0]} at {worst[1]:.2e}"


def check_fd_harness():
    """The harness itself: exact for quadratics, zero for constants."""
    with _f64_mode():
        rng = np.random.default_rng(5)
        e1 = finite_difference_check(
            lambda x: dc.reduce_sum(dc.mul(x, x)), Tensor(rng.standard_normal(4), dtype="f64"))
        if e1 > 1e-7:
            return False, f"sum-of-squares fd error {e1:.2e} > 1e-7"
        e2 = finite_difference_check(
            lambda x: dc.reduce_sum(dc.mul(x, 0.0)), Tensor(rng.standard_normal(4), dtype="f64"))
        if e2 != 0.0:
            return False, f"constant function fd error {e2} != 0"
    return True, "harness exact on quadratic and constant"


# ---------------------------------------------------------------------------
# oracles


def _infonce_reference(zv, zt, tau):
    s = zv @ zt.T / tau

    def ce(mat):
        mx = mat.max(axis=1, keepdims=True)
        ls = mat - mx - np.log(np.exp(mat - mx).sum(axis=1, keepdims=True))
        return -np.mean(np.diag(ls))

    return 0.5 * (ce(s) + ce(s.T))


def check_itc_infonce_equivalence(trials=20, tol=1e-6):
    """alpha=0 and an empty queue reduce the stabilized loss to InfoNCE."""
    with _f64_mode():
        for trial in range(trials):
            rng = np.random.default_rng(2000 + trial)
            n, d = int(rng.integers(2, 9)), 16
            zv = _unit(rng.standard_normal((n, d)))
            zt = _unit(rng.standard_normal((n, d)))
            batch = losses.EmbeddingBatch(
                z_v=Tensor(zv, dtype="f64"), z_t=Tensor(zt, dtype="f64"),
                z_v_m=zv, z_t_m=zt, z_v_r=None, z_t_r=None,
                region_owner=np.empty(0, dtype=np.int64), tau=0.07)
            eye = np.eye(n)
            got = losses.itc_mcd_loss(batch, zv, zt, mom.SoftTargets(eye, eye)).item()
            want = _infonce_reference(zv, zt, 0.07)
            if abs(got - want) > tol:
                return False, f"trial {trial}: |{got} - {want}| > {tol}"
    return True, f"{trials} random batches within {tol}"


def _rg_itc_reference(zvr, ztr, zvm, ztm, owner, tau):
    total = 0.0
    for r in range(zvr.shape[0]):
        i = owner[r]
        for query, cands in ((zvr[r], ztm), (ztr[r], zvm)):
            num = math.exp(float(query @ cands[i]) / tau)
            den = sum(math.exp(float(query @ cands[j]) / tau)
                      for j in range(cands.shape[0]))
            total += math.log(num / den)
    return -total / (2.0 * zvr.shape[0])


def check_rg_itc_oracle(trials=100, tol=1e-6):
    """Vectorized loss equals the scalar brute-force recomputation."""
    with _f64_mode():
        for trial in range(trials):
            rng = np.random.default_rng(3000 + trial)
            n = int(rng.integers(2, 7))
            r = int(rng.integers(1, 9))
            d = 8
            zvr = _unit(rng.standard_normal((r, d)))
            ztr = _unit(rng.standard_normal((r, d)))
            zvm = _unit(rng.standard_normal((n, d)))
            ztm = _unit(rng.standard_normal((n, d)))
            owner = rng.integers(0, n, size=r)
            batch = losses.EmbeddingBatch(
                z_v=Tensor(zvm, dtype="f64"), z_t=Tensor(ztm, dtype="f64"),
                z_v_m=zvm, z_t_m=ztm,
                z_v_r=Tensor(zvr, dtype="f64"), z_t_r=Tensor(ztr, dtype="f64"),
                region_owner=owner, tau=0.07)
            got = losses.rg_itc_loss(batch).item()
            want = _rg_itc_reference(zvr, ztr, zvm, ztm, owner, 0.07)
            if abs(got - want) > tol:
                return False, f"trial {trial}: |{got:.9f} - {want:.9f}| > {tol}"
    return True, f"{trials} random batches within {tol}"


def check_giou_invariants():
    """Symmetry, range, identity, hand-computed disjoint and nested cases."""
    from .geometry import corners_to_center
    rng = np.random.default_rng(11)
    a = np.stack([rng.uniform(0.2, 0.8, 64), rng.uniform(0.2, 0.8, 64),
                  rng.uniform(0.05, 0.4, 64), rng.uniform(0.05, 0.4, 64)], axis=1)
    b = np.stack([rng.uniform(0.2, 0.8, 64), rng.uniform(0.2, 0.8, 64),
                  rng.uniform(0.05, 0.4, 64), rng.uniform(0.05, 0.4, 64)], axis=1)
    g_ab = losses.giou(a, b).data
    g_ba = losses.giou(b, a).data
    if not np.allclose(g_ab, g_ba, atol=1e-9):
        return False, "giou symmetry giou(a,b) == giou(b,a) violated"
    if np.any(g_ab < -1 - 1e-9) or np.any(g_ab > 1 + 1e-9):
        return False, "giou range [-1, 1] violated"
    ident = losses.giou(a, a).data
    if np.any(np.abs(ident - 1.0) > 1e-9):
        return False, "giou identity case != 1"
    disjoint = losses.giou(corners_to_center(np.array([[0.0, 0.0, 1.0, 1.0]])),
                           corners_to_center(np.array([[1.0, 1.0, 2.0, 2.0]]))).data[0]
    if abs(disjoint - (-0.5)) > 1e-9:
        return False, f"giou disjoint-corner case {disjoint} != -0.5"
    nested = losses.giou(np.array([[0.5, 0.5, 1.0, 1.0]]),
                         np.array([[0.5, 0.5, 0.5, 0.5]])).data[0]
    if abs(nested - 0.25) > 1e-9:
        return False, f"giou nested quarter-area case {nested} != 0.25"
    return True, "symmetry, range, identity, disjoint -0.5, nested 0.25"


def roi_align_reference(image, box_px, out_h, out_w):
    """Independent scalar sampler: loops over cells, 2x2 points, bilinear."""
    h, w, c = image.shape
    x0, y0, x1, y1 = box_px
    bin_w = (x1 - x0) / out_w
    bin_h = (y1 - y0) / out_h
    out = np.zeros((out_h, out_w, c), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            for ch in range(c):
                acc = 0.0
                for sy in (0.25, 0.75):
                    for sx in (0.25, 0.75):
                        y = y0 + (i + sy) * bin_h - 0.5
                        x = x0 + (j + sx) * bin_w - 0.5
                        y = min(max(y, 0.0), h - 1.0)
                        x = min(max(x, 0.0), w - 1.0)
                        yl = min(int(y), h - 2) if h > 1 else 0
                        xl = min(int(x), w - 2) if w > 1 else 0
                        fy, fx = y - yl, x - xl
                        acc += (image[yl, xl, ch] * (1 - fy) * (1 - fx)
                                + image[yl, xl + 1, ch] * (1 - fy) * fx
                                + image[yl + 1, xl, ch] * fy * (1 - fx)
                                + image[yl + 1, xl + 1, ch] * fy * fx)
                out[i, j, ch] = acc / 4.0
    return out


def check_roi_align_grid(tol=1e-6):
    """Exhaustive 6x6 corner grid on an 8x8 random image vs the oracle."""
    from .geometry import Box
    rng = np.random.default_rng(21)
    image = rng.random((8, 8, 3)).astype(np.float32)
    fracs = np.linspace(0.0, 1.0, 6)
    checked = 0
    for yi in range(6):
        for yj in range(yi + 1, 6):
            for xi in range(6):
                for xj in range(xi + 1, 6):
                    x0, x1 = fracs[xi], fracs[xj]
                    y0, y1 = fracs[yi], fracs[yj]
                    if (x1 - x0) * 8 < 2 or (y1 - y0) * 8 < 2:
                        continue
                    box = Box(cx=(x0 + x1) / 2, cy=(y0 + y1) / 2,
                              w=x1 - x0, h=y1 - y0)
                    got = enc.roi_align(image, box, 4, 4)
                    want = roi_align_reference(
                        image.astype(np.float64), (x0 * 8, y0 * 8, x1 * 8, y1 * 8), 4, 4)
                    if np.max(np.abs(got - want)) > tol:
                        return False, (f"box {box} disagrees with bilinear oracle "
                                       f"by {np.max(np.abs(got - want)):.2e}")
                    checked += 1
    return True, f"{checked} grid boxes agree within {tol}"


def check_recall_oracle(trials=100):
    """Vectorized recall@k equals a brute-force sorter exactly."""
    from .evaluate import recall_at_k
    for trial in range(trials):
        rng = np.random.default_rng(4000 + trial)
        q, g = 50, 200
        scores = np.round(rng.random((q, g)), 1)  # coarse values force ties
        truth = rng.integers(0, g, size=q)
        got = recall_at_k(scores, truth, ks=(1, 5, 10))
        ranks = np.empty(q)
        for i in range(q):
            order = sorted(range(g), key=lambda j: (-scores[i, j], j))
            ranks[i] = order.index(truth[i])
        for k in (1, 5, 10):
            want = 100.0 * float(np.mean(ranks < k))
            if got[k] != want:
                return False, f"trial {trial}: R@{k} {got[k]} != brute {want}"
    return True, f"{trials} random score matrices, exact match"


# ---------------------------------------------------------------------------
# sampling fidelity


def _tv_distance(counts, probs):
    emp = counts / counts.sum()
    return 0.5 * float(np.abs(emp - probs).sum())


def check_hard_negative_sampling(configs=20, draws=10000, tv_tol=0.05):
    """Empirical draw frequencies match the softmax target distribution."""
    worst = 0.0
    for c in range(configs):
        rng = np.random.default_rng(5000 + c)
        n = int(rng.integers(3, 9))
        d = 8
        zv = _unit(rng.standard_normal((n, d)))
        zt = _unit(rng.standard_normal((n, d)))
        zvr = _unit(rng.standard_normal((1, d)))
        ztr = _unit(rng.standard_normal((1, d)))
        owner = np.array([int(rng.integers(0, n))])
        batch = losses.EmbeddingBatch(
            z_v=Tensor(zv, dtype=np.float64), z_t=Tensor(zt, dtype=np.float64),
            z_v_m=zv, z_t_m=zt,
            z_v_r=Tensor(zvr, dtype=np.float64), z_t_r=Tensor(ztr, dtype=np.float64),
            region_owner=owner, tau=0.07)
        logits = (zvr @ zt.T / 0.07)[0].astype(np.float64)
        logits[owner[0]] = -np.inf
        p = np.exp(logits - logits.max())
        p /= p.sum()
        draw_rng = np.random.default_rng(6000 + c)
        counts = np.zeros(n)
        for _ in range(draws):
            neg = losses.sample_hard_negatives(batch, draw_rng)
            counts[neg.text_neg[0]] += 1
        tv = _tv_distance(counts, p)
        worst = max(worst, tv)
        if tv > tv_tol:
            return False, f"config {c}: total variation {tv:.4f} > {tv_tol}"
    return True, f"{configs} configs x {draws} draws, worst TV {worst:.4f}"


def check_sampling_limits(draws=10000):
    """Uniform similarities draw uniformly; tau -> 0 draws the argmax."""
    n = 5
    e = np.eye(n)
    batch_uniform = losses.EmbeddingBatch(
        z_v=Tensor(e, dtype=np.float64), z_t=Tensor(e, dtype=np.float64),
        z_v_m=e, z_t_m=e,
        z_v_r=Tensor(_unit(np.ones((1, n))), dtype=np.float64),
        z_t_r=Tensor(_unit(np.ones((1, n))), dtype=np.float64),
        region_owner=np.array([0]), tau=0.07)
    rng = np.random.default_rng(42)
    counts = np.zeros(n)
    for _ in range(draws):
        counts[losses.sample_hard_negatives(batch_uniform, rng).text_neg[0]] += 1
    target = np.full(n, 1.0 / (n - 1))
    target[0] = 0.0
    tv = _tv_distance(counts, target)
    if tv > 0.05:
        return False, f"uniform-similarity TV {tv:.4f} > 0.05"

    # near-zero temperature concentrates on the unique argmax
    zt = _unit(np.vstack([np.ones(4), np.array([1, 0, 0, 0.0]),
                          np.array([0, 1, 0, 0.0]), np.array([0.9, 0.1, 0, 0])]))
    zvr = _unit(np.array([[0.9, 0.1, 0.0, 0.0]]))
    batch_peak = losses.EmbeddingBatch(
        z_v=Tensor(zt, dtype=np.float64), z_t=Tensor(zt, dtype=np.float64),
        z_v_m=zt, z_t_m=zt,
        z_v_r=Tensor(zvr, dtype=np.float64), z_t_r=Tensor(zvr, dtype=np.float64),
        region_owner=np.array([0]), tau=1e-4)
    sims = (zvr @ zt.T)[0]
    sims[0] = -np.inf
    peak = int(np.argmax(sims))
    rng = np.random.default_rng(43)
    hits = 0
    for _ in range(draws):
        hits += int(losses.sample_hard_negatives(batch_peak, rng).text_neg[0] == peak)
    if hits / draws <= 0.999:
        return False, f"tau->0 argmax frequency {hits / draws:.4f} <= 0.999"
    return True, "uniform and argmax limits hold"


# ---------------------------------------------------------------------------
# momentum mechanics


def check_ema_decay(steps=50, tol=1e-5):
    """Constant online target: ||shadow_k - theta|| = beta^k ||shadow_0 - theta||."""
    rng = np.random.default_rng(9)
    cfg = enc.EncoderConfig(image_size=16, vocab_size=8, max_text_len=4,
                            max_region_text_len=4, depth=1, fusion_depth=1)
    online = enc.init_params(cfg, rng, dtype="f64")
    shadow = mom.make_shadow(online)
    for t in shadow.tensors().values():
        t.data += rng.standard_normal(t.data.shape)
    beta = 0.9
    name = "proj_v.w"
    d0 = np.linalg.norm(shadow[name].data - online[name].data)
    for k in range(1, steps + 1):
        mom.ema_update(online, shadow, beta)
        dk = np.linalg.norm(shadow[name].data - online[name].data)
        if abs(dk - beta ** k * d0) > tol * max(1.0, d0):
            return False, f"step {k}: ||shadow-online|| {dk:.8f} != beta^k d0 {beta**k*d0:.8f}"
    return True, f"geometric decay over {steps} steps within {tol}"


def check_queue_against_deque(sequences=1000):
    """Ring-buffer contents equal a reference deque simulation."""
    for s in range(sequences):
        rng = np.random.default_rng(7000 + s)
        batch = int(rng.integers(1, 5))
        capacity = batch * int(rng.integers(1, 6))
        q = mom.MomentumQueue(capacity, 3)
        ref = collections.deque(maxlen=capacity)
        for _ in range(int(rng.integers(1, 12))):
            rows = _unit(rng.standard_normal((batch, 3))).astype(np.float32)
            q.enqueue(rows)
            ref.extend(rows)
        got = q.valid_rows()
        want = np.array(ref)
        if got.shape != want.shape or not np.array_equal(got, want):
            return False, f"sequence {s}: queue contents diverge from deque"
    return True, f"{sequences} random enqueue sequences match"


def check_soft_target_rows(trials=50, tol=1e-6):
    for t in range(trials):
        rng = np.random.default_rng(8000 + t)
        n, m, d = int(rng.integers(2, 6)), 0, 8
        zv = _unit(rng.standard_normal((n, d)))
        zt = _unit(rng.standard_normal((n, d)))
        extra = int(rng.integers(0, 10))
        cand_v = np.concatenate([zv, _unit(rng.standard_normal((extra, d)))])
        cand_t = np.concatenate([zt, _unit(rng.standard_normal((extra, d)))])
        alpha = float(rng.random())
        tau = float(rng.uniform(0.01, 1.0))
        st = mom.soft_targets(zv, zt, cand_v, cand_t, alpha, tau)
        for mat in (st.q_i2t, st.q_t2i):
            if np.any(mat < 0) or np.any(np.abs(mat.sum(axis=1) - 1) > tol):
                return False, f"trial {t}: target rows not stochastic (alpha={alpha:.3f})"
    return True, f"{trials} random (alpha, tau) configurations row-stochastic"


# ---------------------------------------------------------------------------
# suite registry and runner


SUITES = {
    "gradients": [
        Check("fd_harness_quadratic_constant", check_fd_harness),
        Check("kernel_gradients_vs_central_differences", check_kernel_gradients),
        Check("loss_gradients_micro_batch", check_loss_gradients),
    ],
    "oracles": [
        Check("itc_mcd_alpha0_equals_infonce", check_itc_infonce_equivalence),
        Check("rg_itc_equals_scalar_brute_force", check_rg_itc_oracle),
        Check("giou_symmetry_range_cases", check_giou_invariants),
        Check("roi_align_equals_bilinear_oracle", check_roi_align_grid),
        Check("recall_at_k_equals_brute_sorter", check_recall_oracle),
    ],
    "sampling": [
        Check("hard_negative_softmax_fidelity", check_hard_negative_sampling),
        Check("sampling_uniform_and_argmax_limits", check_sampling_limits),
    ],
    "momentum": [
        Check("ema_geometric_decay", check_ema_decay),
        Check("queue_matches_reference_deque", check_queue_against_deque),
        Check("soft_target_rows_stochastic", check_soft_target_rows),
    ],
}


def run_suite(name, out=print):
    """Run one suite ("all" for everything); returns True when all pass."""
    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        raise ValueError(f"unknown suite {name!r} (expected one of "
                         f"{sorted(SUITES)} or 'all')")
    ok = True
    for suite in names:
        for check in SUITES[suite]:
            try:
                passed, detail = check.fn()
            except Exception as exc:  # a crash is a failure with a name
                passed, detail = False, f"raised {type(exc).__name__}: {exc}"
            ok &= passed
            out(f"[{suite}] {'PASS' if passed else 'FAIL'} {check.name}: {detail}")
    return ok
