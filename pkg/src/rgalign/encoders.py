"""Toy vision-language encoder stack.

A patch-embedding vision transformer and a token-embedding text
transformer share one width; a fusion encoder runs text queries over the
vision sequence with cross-attention. CLS rows are projected per modality
onto the unit sphere for similarity computation. All parameters live in a
flat name->Tensor map so the momentum machinery and checkpoints can
address them stably.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffcore as dc
from .accel import pool_regions
from .diffcore import Tensor
from .geometry import Box

CLS_ID, PAD_ID, UNK_ID = 0, 1, 2
RESERVED_TOKENS = ("[CLS]", "[PAD]", "[UNK]")

_MASK_FILL = -1e9
_WORD_RE = re.compile(r"[^a-z0-9]+")


# ---------------------------------------------------------------------------
# vocabulary and tokenizer


class Vocab:
    """Token list where the line number is the id; ids 0..2 are reserved."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self._index.get(token, UNK_ID)

    def token(self, idx):
        return self.tokens[idx]

    def to_file(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="ascii") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass
class TokenSeq:
    ids: np.ndarray     # (max_len,) int64, [CLS] at position 0, [PAD]-filled
    mask: np.ndarray    # (max_len,) float, 1 for real positions incl [CLS]

    @property
    def length(self):
        return int(self.mask.sum())


def tokenize(text, vocab, max_len):
    """Lowercase, split on non-alphanumerics, map to ids, pad/truncate."""
    words = [w for w in _WORD_RE.split(text.lower()) if w]
    if not words:
        raise ValueError(f"tokenize: empty text after normalization: {text!r}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.float64)
    ids[0] = CLS_ID
    mask[0] = 1.0
    for pos, w in enumerate(words[: max_len - 1], start=1):
        ids[pos] = vocab.id(w)
        mask[pos] = 1.0
    return TokenSeq(ids=ids, mask=mask)


def detokenize(ids, vocab):
    words = [vocab.token(int(i)) for i in np.asarray(ids).reshape(-1)
             if int(i) not in (CLS_ID, PAD_ID)]
    return " ".join(words)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class EncoderConfig:
    width: int = 64
    proj_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 8
    image_size: int = 64
    fusion_depth: int = 2
    max_text_len: int = 32
    max_region_text_len: int = 16
    vocab_size: int = 64

    @property
    def seq_len_image(self):
        side = self.image_size // self.patch
        return 1 + side * side

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModelParams:
    """Flat, ordered name->Tensor map for one full model."""

    def __init__(self, cfg: EncoderConfig, tensors: dict):
        self.cfg = cfg
        self._t = dict(tensors)

    def __getitem__(self, name) -> Tensor:
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def names(self):
        return list(self._t.keys())

    def items(self):
        return self._t.items()

    def tensors(self):
        return self._t

    def set_requires_grad(self, flag):
        for t in self._t.values():
            t.requires_grad = flag
        return self

    def zero_grads(self):
        for t in self._t.values():
            t.grad = None

    def copy(self):
        return ModelParams(self.cfg, {k: Tensor(v.data.copy(), dtype=v.data.dtype)
                                      for k, v in self._t.items()})


def _attn_names(prefix):
    for side in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        yield f"{prefix}.{side}"


def _block_shapes(prefix, d, mlp):
    shapes = {f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,)}
    for n in _attn_names(f"{prefix}.attn"):
        shapes[n] = (d, d) if n.rsplit(".", 1)[1].startswith("w") else (d,)
    shapes.update({
        f"{prefix}.ln2.g": (d,), f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.w1": (d, mlp), f"{prefix}.mlp.b1": (mlp,),
        f"{prefix}.mlp.w2": (mlp, d), f"{prefix}.mlp.b2": (d,),
    })
    return shapes


def _fusion_block_shapes(prefix, d, mlp):
    shapes = _block_shapes(prefix, d, mlp)
    shapes.update({f"{prefix}.lnx.g": (d,), f"{prefix}.lnx.b": (d,)})
    for n in _attn_names(f"{prefix}.cross"):
        shapes[n] = (d, d) if n.rsplit(".", 1)[1].startswith("w") else (d,)
    return shapes


def param_shapes(cfg: EncoderConfig):
    d, mlp = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = {
        "vision.patch.w": (cfg.patch * cfg.patch * 3, d),
        "vision.patch.b": (d,),
        "vision.cls": (d,),
        "vision.pos": (cfg.seq_len_image, d),
    }
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"vision.blk{i}", d, mlp))
    shapes.update({"vision.ln_f.g": (d,), "vision.ln_f.b": (d,)})

    shapes.update({
        "text.tok": (cfg.vocab_size, d),
        "text.pos": (cfg.max_text_len, d),
    })
    for i in range(cfg.depth):
        shapes.update(_block_shapes(f"text.blk{i}", d, mlp))
    shapes.update({"text.ln_f.g": (d,), "text.ln_f.b": (d,)})

    for i in range(cfg.fusion_depth):
        shapes.update(_fusion_block_shapes(f"fusion.blk{i}", d, mlp))
    shapes.update({"fusion.ln_f.g": (d,), "fusion.ln_f.b": (d,)})

    shapes.update({
        "proj_v.w": (d, cfg.proj_dim),
        "proj_t.w": (d, cfg.proj_dim),
        "match.w": (d, 2), "match.b": (2,),
        "box.w": (d, 4), "box.b": (4,),
    })
    return shapes


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=None) -> ModelParams:
    """Uniform fan-in-scaled init; layer-norm gains at 1, biases at 0."""
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan = shape[0] if len(shape) > 1 else shape[0]
            bound = 1.0 / np.sqrt(fan)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# transformer pieces


@dataclass
class EncoderOutput:
    seq: Tensor                      # (B, L, d)
    cls: Tensor                      # (B, d), exactly seq[:, 0]
    mask: Optional[np.ndarray] = None  # (B, L) key mask, 1 = real token


def _linear(x, p, name):
    return dc.bias_add(dc.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _split_heads(x, heads):
    b, l, d = x.shape
    return dc.transpose(dc.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, l, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def _attention(q_src, kv_src, params, prefix, heads, add_mask=None):
    p = params
    q = dc.bias_add(dc.matmul(q_src, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = dc.bias_add(dc.matmul(kv_src, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = dc.bias_add(dc.matmul(kv_src, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    out = dc.sdpa(_split_heads(q, heads), _split_heads(k, heads),
                  _split_heads(v, heads), mask=add_mask)
    return dc.bias_add(dc.matmul(_merge_heads(out), p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _ffn(x, params, prefix):
    h = dc.gelu(dc.bias_add(dc.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return dc.bias_add(dc.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _encoder_block(x, params, prefix, heads, add_mask):
    h = dc.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = dc.add(x, _attention(h, h, params, f"{prefix}.attn", heads, add_mask))
    h = dc.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return dc.add(x, _ffn(h, params, f"{prefix}.mlp"))


def _key_mask(mask, dtype):
    """(B, L) 1/0 mask -> additive (B, 1, 1, L) bias for attention scores."""
    return ((1.0 - np.asarray(mask)) * _MASK_FILL)[:, None, None, :].astype(dtype)


def _finish(seq, params, scope):
    seq = dc.layer_norm(seq, params[f"{scope}.ln_f.g"], params[f"{scope}.ln_f.b"])
    return seq, dc.select(seq, 1, 0)


def patchify(images, patch):
    """(B, S, S, 3) -> (B, (S/p)^2, p*p*3) raw patch rows (plain numpy)."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)


def encode_image(images, params: ModelParams) -> EncoderOutput:
    """Patch-embed + positions + CLS, then pre-norm self-attention blocks."""
    cfg = params.cfg
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, h, w, _ = images.shape
    if h % cfg.patch or w % cfg.patch:
        raise ValueError(f"encode_image: dims {h}x{w} not divisible by patch {cfg.patch}")
    if h != cfg.image_size or w != cfg.image_size:
        raise ValueError(f"encode_image: dims {h}x{w} do not match configured size {cfg.image_size}")
    patches = Tensor(patchify(images, cfg.patch))
    emb = dc.bias_add(dc.matmul(patches, params["vision.patch.w"]), params["vision.patch.b"])
    cls_row = dc.add(dc.reshape(params["vision.cls"], (1, 1, cfg.width)),
                     Tensor(np.zeros((b, 1, cfg.width))))
    seq = dc.concat([cls_row, emb], axis=1)
    seq = dc.add(seq, params["vision.pos"])
    for i in range(cfg.depth):
        seq = _encoder_block(seq, params, f"vision.blk{i}", cfg.heads, None)
    seq, cls = _finish(seq, params, "vision")
    return EncoderOutput(seq=seq, cls=cls, mask=np.ones((b, seq.shape[1])))


def encode_text(ids, mask, params: ModelParams) -> EncoderOutput:
    """Token + position embeddings, bidirectional blocks, padded keys masked."""
    cfg = params.cfg
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
        mask = np.asarray(mask)[None]
    mask = np.asarray(mask)
    b, l = ids.shape
    if l > cfg.max_text_len:
        raise ValueError(f"encode_text: length {l} exceeds max {cfg.max_text_len}")
    emb = dc.gather_rows(params["text.tok"], ids)
    pos = dc.gather_rows(params["text.pos"], np.arange(l))
    seq = dc.add(emb, pos)
    add_mask = _key_mask(mask, seq.data.dtype)
    for i in range(cfg.depth):
        seq = _encoder_block(seq, params, f"text.blk{i}", cfg.heads, add_mask)
    seq, cls = _finish(seq, params, "text")
    return EncoderOutput(seq=seq, cls=cls, mask=mask)


def fuse(vision: EncoderOutput, text: EncoderOutput, params: ModelParams) -> EncoderOutput:
    """Fuse a text sequence (queries) with a vision sequence (keys/values)."""
    return fuse_batch(vision.seq, text.seq, text.mask, params)


def fuse_batch(v_seq, t_seq, t_mask, params: ModelParams) -> EncoderOutput:
    cfg = params.cfg
    if v_seq.shape[-1] != t_seq.shape[-1]:
        raise dc.ShapeError(
            f"fuse: vision width {v_seq.shape} != text width {t_seq.shape}")
    add_mask = _key_mask(t_mask, t_seq.data.dtype) if t_mask is not None else None
    x = t_seq
    for i in range(cfg.fusion_depth):
        pre = f"fusion.blk{i}"
        h = dc.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        x = dc.add(x, _attention(h, h, params, f"{pre}.attn", cfg.heads, add_mask))
        h = dc.layer_norm(x, params[f"{pre}.lnx.g"], params[f"{pre}.lnx.b"])
        x = dc.add(x, _attention(h, v_seq, params, f"{pre}.cross", cfg.heads, None))
        h = dc.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        x = dc.add(x, _ffn(h, params, f"{pre}.mlp"))
    seq, cls = _finish(x, params, "fusion")
    return EncoderOutput(seq=seq, cls=cls, mask=t_mask)


def project(cls, modality, params: ModelParams):
    """Bias-free linear map to the shared space, L2-normalized."""
    if modality not in ("vision", "text"):
        raise ValueError(f"project: unknown modality {modality!r}")
    w = params["proj_v.w" if modality == "vision" else "proj_t.w"]
    return dc.l2_normalize(dc.matmul(cls, w))


def match_head(fused_cls, params: ModelParams):
    """Two logits per fused representation; softmax gives match probability."""
    return _linear(fused_cls, params, "match")


def box_head(fused_cls, params: ModelParams):
    """Sigmoid-squashed (cx, cy, w, h) regressed from a fused CLS row."""
    return dc.sigmoid(_linear(fused_cls, params, "box"))


def as_box(vec) -> Box:
    v = np.asarray(vec.data if isinstance(vec, Tensor) else vec).reshape(4)
    return Box(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


# ---------------------------------------------------------------------------
# region extraction


def roi_align(image, box: Box, out_h, out_w):
    """Crop `box` from one image via 4-point bilinear pooling."""
    image = np.asarray(image)
    if out_h < 1 or out_w < 1:
        raise ValueError("roi_align: output dims must be >= 1")
    h, w = image.shape[0], image.shape[1]
    box.validate()
    if box.w * w < 2.0 or box.h * h < 2.0:
        raise ValueError(
            f"roi_align: degenerate box ({box.w:.4f} x {box.h:.4f}) under 2 pixels")
    x0, y0, x1, y1 = box.corners()
    px = np.array([[x0 * w, y0 * h, x1 * w, y1 * h]], dtype=image.dtype)
    out = pool_regions(image[None], px, np.zeros(1, dtype=np.int64), out_h, out_w)
    return out[0]


def roi_align_batch(images, boxes, owners, out_h, out_w):
    """Vector form: boxes (R, 4) center-size fractions, owners (R,) image idx."""
    images = np.asarray(images)
    boxes = np.asarray(boxes, dtype=np.float64)
    h, w = images.shape[1], images.shape[2]
    if np.any(boxes[:, 2] * w < 2.0) or np.any(boxes[:, 3] * h < 2.0):
        bad = int(np.argmax((boxes[:, 2] * w < 2.0) | (boxes[:, 3] * h < 2.0)))
        raise ValueError(f"roi_align: degenerate box at index {bad}: {boxes[bad]}")
    corners = np.empty_like(boxes)
    corners[:, 0] = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0.0, 1.0) * w
    corners[:, 1] = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0.0, 1.0) * h
    corners[:, 2] = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0.0, 1.0) * w
    corners[:, 3] = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0.0, 1.0) * h
    return pool_regions(images, corners.astype(images.dtype), owners, out_h, out_w)
