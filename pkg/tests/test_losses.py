"""Loss terms against hand arithmetic and independent recomputations."""

import math

import numpy as np
import pytest

from rgalign import diffcore as dc
from rgalign import encoders as enc
from rgalign import losses as L
from rgalign import momentum as mom
from rgalign.diffcore import Tape, Tensor, backward
from rgalign.geometry import corners_to_center


def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _batch(rng, n=3, r=4, d=8, tau=0.07, dtype="f64"):
    owner = rng.integers(0, n, size=r)
    return L.EmbeddingBatch(
        z_v=Tensor(_unit(rng.standard_normal((n, d))), dtype=dtype),
        z_t=Tensor(_unit(rng.standard_normal((n, d))), dtype=dtype),
        z_v_m=_unit(rng.standard_normal((n, d))),
        z_t_m=_unit(rng.standard_normal((n, d))),
        z_v_r=Tensor(_unit(rng.standard_normal((r, d))), dtype=dtype),
        z_t_r=Tensor(_unit(rng.standard_normal((r, d))), dtype=dtype),
        region_owner=owner, tau=tau)


class TestRgItc:
    def test_single_sample_single_region_is_zero(self, rng):
        b = _batch(rng, n=1, r=1)
        assert abs(L.rg_itc_loss(b).item()) < 1e-9

    def test_identical_embeddings_give_log_n(self, rng):
        n, r, d = 5, 3, 8
        row = _unit(np.ones((1, d)))
        same = np.repeat(row, n, axis=0)
        b = L.EmbeddingBatch(
            z_v=Tensor(same, dtype="f64"), z_t=Tensor(same, dtype="f64"),
            z_v_m=same, z_t_m=same,
            z_v_r=Tensor(np.repeat(row, r, axis=0), dtype="f64"),
            z_t_r=Tensor(np.repeat(row, r, axis=0), dtype="f64"),
            region_owner=np.zeros(r, dtype=np.int64), tau=0.07)
        assert abs(L.rg_itc_loss(b).item() - math.log(n)) < 1e-9

    def test_matches_brute_force(self, rng, f64_mode):
        from rgalign.verify import check_rg_itc_oracle
        ok, detail = check_rg_itc_oracle(trials=25)
        assert ok, detail

    def test_empty_region_list_rejected(self, rng):
        b = _batch(rng, r=2)
        b.z_v_r = None
        b.z_t_r = None
        with pytest.raises(ValueError, match="empty region"):
            L.rg_itc_loss(b)

    def test_region_permutation_invariance(self, rng):
        b = _batch(rng, n=4, r=5)
        base = L.rg_itc_loss(b).item()
        perm = rng.permutation(5)
        b2 = L.EmbeddingBatch(
            z_v=b.z_v, z_t=b.z_t, z_v_m=b.z_v_m, z_t_m=b.z_t_m,
            z_v_r=Tensor(b.z_v_r.data[perm], dtype="f64"),
            z_t_r=Tensor(b.z_t_r.data[perm], dtype="f64"),
            region_owner=b.region_owner[perm], tau=b.tau)
        assert abs(L.rg_itc_loss(b2).item() - base) < 1e-9

    def test_batch_permutation_equivariance(self, rng):
        b = _batch(rng, n=4, r=5)
        base = L.rg_itc_loss(b).item()
        perm = rng.permutation(4)
        inv = np.argsort(perm)
        b2 = L.EmbeddingBatch(
            z_v=Tensor(b.z_v.data[perm], dtype="f64"),
            z_t=Tensor(b.z_t.data[perm], dtype="f64"),
            z_v_m=b.z_v_m[perm], z_t_m=b.z_t_m[perm],
            z_v_r=b.z_v_r, z_t_r=b.z_t_r,
            region_owner=inv[b.region_owner], tau=b.tau)
        assert abs(L.rg_itc_loss(b2).item() - base) < 1e-9

    def test_queue_is_not_consulted(self, rng):
        # the loss signature admits no queue input; candidates are the batch
        b = _batch(rng, n=3, r=2)
        got = L.rg_itc_loss(b).item()
        assert np.isfinite(got)


class TestItcMcd:
    def test_alpha_zero_empty_queue_is_infonce(self, f64_mode):
        from rgalign.verify import check_itc_infonce_equivalence
        ok, detail = check_itc_infonce_equivalence(trials=10)
        assert ok, detail

    def test_target_equal_prediction_gives_entropy(self, rng):
        b = _batch(rng, n=4, r=1)
        logits = b.z_v.data @ b.z_t.data.T / b.tau
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        logits_t = b.z_t.data @ b.z_v.data.T / b.tau
        q = np.exp(logits_t - logits_t.max(1, keepdims=True))
        q /= q.sum(1, keepdims=True)
        targets = mom.SoftTargets(q_i2t=p, q_t2i=q)
        got = L.itc_mcd_loss(b, b.z_v, b.z_t, targets).item()
        entropy = 0.5 * (-np.sum(p * np.log(p), axis=1).mean()
                         - np.sum(q * np.log(q), axis=1).mean())
        assert got >= 0
        assert abs(got - entropy) < 1e-6

    def test_single_candidate_zero_loss(self):
        z = _unit(np.ones((1, 4)))
        b = L.EmbeddingBatch(z_v=Tensor(z, dtype="f64"), z_t=Tensor(z, dtype="f64"),
                             z_v_m=z, z_t_m=z, z_v_r=None, z_t_r=None,
                             region_owner=np.empty(0, dtype=np.int64), tau=0.07)
        targets = mom.SoftTargets(q_i2t=np.ones((1, 1)), q_t2i=np.ones((1, 1)))
        assert abs(L.itc_mcd_loss(b, z, z, targets).item()) < 1e-9

    def test_candidate_count_mismatch_rejected(self, rng):
        b = _batch(rng, n=3, r=1)
        targets = mom.SoftTargets(q_i2t=np.eye(3), q_t2i=np.eye(3))
        extra = _unit(rng.standard_normal((5, 8)))
        with pytest.raises(ValueError, match="target shapes"):
            L.itc_mcd_loss(b, extra, extra, targets)

    def test_gradient_reaches_online_side_only(self, rng):
        b = _batch(rng, n=3, r=1)
        b.z_v.requires_grad = True
        b.z_t.requires_grad = True
        targets = mom.SoftTargets(q_i2t=np.eye(3), q_t2i=np.eye(3))
        with Tape() as tape:
            out = L.itc_mcd_loss(b, b.z_v_m, b.z_t_m, targets)
        backward(tape, out)
        # gradients reach the online side; momentum side is a plain ndarray
        assert b.z_v.grad is not None and np.abs(b.z_v.grad).sum() > 0
        assert b.z_t.grad is not None and np.abs(b.z_t.grad).sum() > 0


class TestItmAndSampling:
    def test_uniform_head_gives_ln2(self, rng):
        cfg = enc.EncoderConfig(image_size=16, vocab_size=8, max_text_len=4,
                                max_region_text_len=4)
        params = enc.init_params(cfg, rng)
        params.tensors()["match.w"] = Tensor(np.zeros_like(params["match.w"].data))
        params.tensors()["match.b"] = Tensor(np.zeros(2))
        fused = Tensor(rng.standard_normal((6, cfg.width)))
        labels = np.array([1, 1, 0, 0, 1, 0.0])
        got = L.itm_loss(fused, labels, params).item()
        assert abs(got - math.log(2)) < 1e-6

    def test_perfect_predictions_near_zero(self, rng):
        logits = Tensor(np.array([[0.0, 30.0], [30.0, 0.0]]))
        got = L.match_bce(logits, np.array([1.0, 0.0])).item()
        assert got < 1e-6

    def test_normalization_constant_is_3n(self, rng):
        # |positives| = N and |negatives| = 2N: uniform head -> exactly ln 2,
        # and one mislabeled example shifts the loss by its single term / 3N
        n = 4
        logits = np.zeros((3 * n, 2), dtype=np.float64)
        logits[0] = [0.0, 5.0]
        labels = np.concatenate([np.ones(n), np.zeros(2 * n)])
        base = L.match_bce(Tensor(logits, dtype="f64"), labels).item()
        flipped = labels.copy()
        flipped[0] = 0.0
        swapped = L.match_bce(Tensor(logits, dtype="f64"), flipped).item()
        p1 = 1.0 / (1.0 + math.exp(-5.0))
        want_delta = (-math.log(1 - p1) + math.log(p1)) / (3 * n)
        assert abs((swapped - base) - want_delta) < 1e-9

    def test_global_negative_sampler_excludes_self(self, rng):
        z_v = Tensor(_unit(rng.standard_normal((6, 8))))
        z_t = Tensor(_unit(rng.standard_normal((6, 8))))
        for _ in range(50):
            tneg, ineg = L.sample_global_negatives(z_v, z_t, 0.07, rng)
            assert np.all(tneg != np.arange(6))
            assert np.all(ineg != np.arange(6))

    def test_batch_of_one_rejected(self, rng):
        z = Tensor(_unit(rng.standard_normal((1, 8))))
        with pytest.raises(ValueError, match=">= 2"):
            L.sample_global_negatives(z, z, 0.07, rng)

    def test_hard_negative_never_anchor(self, rng):
        b = _batch(rng, n=4, r=6)
        for _ in range(50):
            neg = L.sample_hard_negatives(b, rng)
            assert np.all(neg.text_neg != b.region_owner)
            assert np.all(neg.image_neg != b.region_owner)

    def test_sampling_distribution(self):
        from rgalign.verify import check_hard_negative_sampling
        ok, detail = check_hard_negative_sampling(configs=3, draws=4000)
        assert ok, detail

    def test_hand_set_similarities_match_softmax(self):
        """N=3, candidate similarities {0.9, 0.1} after ruling out the
        anchor: draw frequencies match softmax([0.9, 0.1]/tau)."""
        tau = 0.07
        # construct embeddings with exact dot products: anchor region vs
        # global texts 1 and 2 give cosines 0.9 and 0.1
        z_t = np.array([[1.0, 0.0, 0.0],
                        [0.9, np.sqrt(1 - 0.81), 0.0],
                        [0.1, 0.0, np.sqrt(1 - 0.01)]])
        z_v_r = np.array([[1.0, 0.0, 0.0]])
        filler = np.eye(3)
        batch = L.EmbeddingBatch(
            z_v=Tensor(filler, dtype="f64"), z_t=Tensor(z_t, dtype="f64"),
            z_v_m=filler, z_t_m=z_t,
            z_v_r=Tensor(z_v_r, dtype="f64"), z_t_r=Tensor(z_v_r, dtype="f64"),
            region_owner=np.array([0]), tau=tau)
        rng = np.random.default_rng(99)
        counts = np.zeros(3)
        draws = 10000
        for _ in range(draws):
            counts[L.sample_hard_negatives(batch, rng).text_neg[0]] += 1
        e = np.exp(np.array([0.9, 0.1]) / tau)
        want = e / e.sum()
        emp = counts[1:] / draws
        tv = 0.5 * np.abs(emp - want).sum()
        assert counts[0] == 0
        assert tv < 0.05, f"TV {tv:.4f}"


class TestRgItm:
    @pytest.fixture
    def world(self, rng):
        cfg = enc.EncoderConfig(image_size=16, vocab_size=10, max_text_len=6,
                                max_region_text_len=5)
        params = enc.init_params(cfg, rng)
        n, r = 3, 4
        owner = np.array([0, 1, 1, 2])
        v = enc.encode_image(rng.random((n, 16, 16, 3)), params)
        t_ids = rng.integers(3, 10, size=(n, 6))
        t_mask = np.ones((n, 6))
        t = enc.encode_text(t_ids, t_mask, params)
        rv = enc.encode_image(rng.random((r, 16, 16, 3)), params)
        rt_ids = rng.integers(3, 10, size=(r, 5))
        rt_mask = np.ones((r, 5))
        rt = enc.encode_text(rt_ids, rt_mask, params)
        feats = L.RegionGlobalFeatures(
            global_v_seq=v.seq, global_t_seq=t.seq, global_t_mask=t_mask,
            region_v_seq=rv.seq, region_t_seq=rt.seq, region_t_mask=rt_mask,
            owner=owner)
        neg = L.HardNegIndices(text_neg=np.array([1, 0, 2, 1]),
                               image_neg=np.array([2, 2, 0, 0]))
        return params, feats, neg

    def test_counts_two_r_positive_two_r_negative(self, world):
        params, feats, neg = world
        bundle = L.build_region_global_fusions(feats, neg, params)
        r = feats.owner.shape[0]
        assert bundle.rv_gt_pos.shape[0] == r
        assert bundle.gv_rt_pos.shape[0] == r
        assert bundle.rv_gt_neg.shape[0] == r
        assert bundle.gv_rt_neg.shape[0] == r

    def test_uniform_head_ln2(self, world):
        params, feats, neg = world
        params = params.copy()
        params.tensors()["match.w"] = Tensor(np.zeros_like(params["match.w"].data))
        params.tensors()["match.b"] = Tensor(np.zeros(2))
        got = L.rg_itm_loss(feats, neg, params).item()
        assert abs(got - math.log(2)) < 1e-6

    def test_missing_region_in_negatives_rejected(self, world):
        params, feats, _ = world
        short = L.HardNegIndices(text_neg=np.array([1, 0, 2]),
                                 image_neg=np.array([2, 2, 0, 0]))
        with pytest.raises(ValueError, match="cover"):
            L.rg_itm_loss(feats, short, params)

    def test_anchor_collision_rejected(self, world):
        params, feats, _ = world
        bad = L.HardNegIndices(text_neg=np.array([0, 0, 2, 1]),
                               image_neg=np.array([2, 2, 0, 0]))
        with pytest.raises(ValueError, match="anchor"):
            L.rg_itm_loss(feats, bad, params)

    def test_positive_only_bundle_for_box_head(self, world):
        params, feats, _ = world
        bundle = L.build_region_global_fusions(feats, None, params)
        assert bundle.gv_rt_pos.shape[0] == feats.owner.shape[0]
        assert bundle.rv_gt_pos is None

    def test_shared_matching_head(self, world):
        """Global ITM and region-global ITM score through the same head
        parameters: gradients from both accumulate on one tensor."""
        params, feats, neg = world
        head = params["match.w"]
        head.requires_grad = True
        from rgalign.diffcore import Tape, backward
        with Tape() as tape:
            rg = L.rg_itm_loss(feats, neg, params)
        backward(tape, rg)
        g_rg = head.grad.copy()
        head.grad = None
        fused = Tensor(np.random.default_rng(0).standard_normal((4, 64)))
        with Tape() as tape:
            itm = L.itm_loss(fused, np.array([1, 0, 1, 0.0]), params)
        backward(tape, itm)
        g_itm = head.grad.copy()
        assert params["match.w"] is head  # one shared instance
        assert np.abs(g_rg).sum() > 0 and np.abs(g_itm).sum() > 0

    def test_pairings_match_definition(self, world):
        """Positives fuse region features with the owner's global features;
        negatives use the sampled indices."""
        params, feats, neg = world
        bundle = L.build_region_global_fusions(feats, neg, params)
        r0 = 0
        own = feats.owner[r0]
        one_pos = enc.fuse_batch(
            dc.gather_rows(feats.region_v_seq, np.array([r0])),
            dc.gather_rows(feats.global_t_seq, np.array([own])),
            feats.global_t_mask[[own]], params).cls.data[0]
        np.testing.assert_allclose(bundle.rv_gt_pos.data[r0], one_pos, atol=1e-5)
        one_neg = enc.fuse_batch(
            dc.gather_rows(feats.global_v_seq, np.array([neg.image_neg[r0]])),
            dc.gather_rows(feats.region_t_seq, np.array([r0])),
            feats.region_t_mask[[r0]], params).cls.data[0]
        np.testing.assert_allclose(bundle.gv_rt_neg.data[r0], one_neg, atol=1e-5)


class TestGiouAndBox:
    def test_identical_boxes(self):
        b = np.array([[0.4, 0.6, 0.2, 0.3]])
        assert abs(L.giou(b, b).item() - 1.0) < 1e-12

    def test_disjoint_corner_case(self):
        a = corners_to_center(np.array([[0.0, 0.0, 1.0, 1.0]]))
        b = corners_to_center(np.array([[1.0, 1.0, 2.0, 2.0]]))
        assert abs(L.giou(a, b).item() - (-0.5)) < 1e-12

    def test_nested_quarter_area(self):
        outer = np.array([[0.5, 0.5, 1.0, 1.0]])
        inner = np.array([[0.5, 0.5, 0.5, 0.5]])
        assert abs(L.giou(outer, inner).item() - 0.25) < 1e-12

    def test_symmetry_and_range(self, rng):
        from rgalign.verify import check_giou_invariants
        ok, detail = check_giou_invariants()
        assert ok, detail

    def test_zero_area_rejected(self):
        with pytest.raises(ValueError, match="zero-area"):
            L.giou(np.array([[0.5, 0.5, 0.0, 0.2]]), np.array([[0.5, 0.5, 0.2, 0.2]]))

    def test_box_loss_zero_for_exact_prediction(self):
        truth = np.array([[0.5, 0.5, 0.4, 0.4], [0.2, 0.3, 0.1, 0.2]])
        got = L.box_loss(Tensor(truth, dtype="f64"), truth).item()
        assert abs(got) < 1e-9

    def test_pure_l1_offset(self):
        truth = np.array([[0.5, 0.5, 0.4, 0.4]])
        pred = truth.copy()
        pred[0, 0] += 0.1
        got = L.box_loss(Tensor(pred, dtype="f64"), truth, l1_weight=1.0,
                         giou_weight=0.0).item()
        assert abs(got - 0.1) < 1e-9

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="predictions"):
            L.box_loss(Tensor(np.zeros((2, 4)) + 0.4), np.zeros((3, 4)) + 0.4)

    def test_box_loss_gradient_finite_difference(self, f64_mode, rng):
        from rgalign.gradcheck import finite_difference_check
        truth = np.array([[0.5, 0.5, 0.4, 0.4], [0.3, 0.6, 0.2, 0.25]])
        raw = rng.standard_normal((2, 4)) * 0.5

        def f(x):
            return L.box_loss(dc.sigmoid(x), truth)

        err = finite_difference_check(f, Tensor(raw, dtype="f64"), h=1e-5)
        assert err < 1e-4


class TestTotals:
    def test_default_weights_weighted_sum(self):
        parts = L.LossBreakdown(itc_mcd=1.0, itm=1.0, rg_itc=1.0, rg_itm=1.0,
                                box=1.0, total=2.1)
        assert abs(L.total_loss(parts) - 2.1) < 1e-9

    def test_all_zero_weights(self):
        w = L.LossWeights(itc=0, itm=0, rg_itc=0, rg_itm=0, box=0)
        parts = L.LossBreakdown(itc_mcd=3.0, itm=2.0, rg_itc=1.0, rg_itm=1.0,
                                box=1.0, total=0.0, weights=w)
        assert L.total_loss(parts) == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            L.LossWeights(itm=-1.0).validate()

    def test_combine_matches_breakdown(self, rng):
        terms = {"itc_mcd": Tensor(1.5, dtype="f64"), "itm": Tensor(0.5, dtype="f64"),
                 "rg_itc": None, "rg_itm": Tensor(2.0, dtype="f64"),
                 "box": Tensor(1.0, dtype="f64")}
        total, bd = L.combine_losses(terms, L.LossWeights())
        assert abs(bd.total - (0.25 * 1.5 + 1 * 0.5 + 0.5 * 2.0 + 0.1 * 1.0)) < 1e-9
        assert bd.rg_itc == 0.0
        assert abs(L.total_loss(bd) - bd.total) < 1e-9

    def test_mismatched_total_rejected(self):
        parts = L.LossBreakdown(itc_mcd=1.0, itm=1.0, rg_itc=1.0, rg_itm=1.0,
                                box=1.0, total=99.0)
        with pytest.raises(ValueError, match="weighted sum"):
            L.total_loss(parts)
