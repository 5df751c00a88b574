"""Toy frozen dual encoder: a patch transformer and a token transformer
projecting into a shared space, plus zero-shot scoring and contrastive
pretraining."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import DegenerateInputError, Graph, ShapeError, Tensor

SOS_ID = 0
EOS_ID = 1

# Template words of the toy language.  Ids follow SOS/EOS in this order;
# the remaining ids up to vocab_size are class-name tokens.
LEXICON = (
    "a", "photo", "of", "the", "picture", "image", "one", "this", "is", "my",
    "small", "large", "good", "bad", "bright", "dark", "close", "up", "clean",
    "blurry", "cropped", "sketch", "drawing", "painting", "rendering", "toy",
    "plastic", "origami", "tattoo", "sculpture", "black", "white", "art",
    "pixelated", "low", "resolution", "nice", "weird", "cool", "doodle",
    "many", "in",
)


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    layers_f: int = 4
    layers_g: int = 4
    heads: int = 4
    M: int = 16
    patch_dim: int = 12
    vocab_size: int = 64
    L: int = 4
    max_seq: int = 16
    tau: float = 10.0
    width: int | None = None
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("d", "layers_f", "layers_g", "heads", "M", "patch_dim", "L", "max_seq", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.width_ % self.heads:
            raise ValueError(f"width {self.width_} not divisible by heads {self.heads}")
        if self.max_seq < self.L + 3:
            raise ValueError(f"max_seq {self.max_seq} leaves no room for SOS, template, class, EOS")
        if self.vocab_size <= 2 + len(LEXICON):
            raise ValueError(f"vocab_size {self.vocab_size} leaves no class tokens")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def width_(self):
        return self.d if self.width is None else self.width

    @property
    def n_class_tokens(self):
        return self.vocab_size - 2 - len(LEXICON)

    def to_dict(self):
        return dataclasses.asdict(self)


def word_id(word):
    try:
        return 2 + LEXICON.index(word)
    except ValueError:
        raise KeyError(f"word {word!r} is not in the toy lexicon") from None


def class_token(config, k):
    if not 0 <= k < config.n_class_tokens:
        raise ValueError(f"class {k} outside the {config.n_class_tokens} class tokens")
    return 2 + len(LEXICON) + k


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 2 or ids[0] != SOS_ID or ids[-1] != EOS_ID:
            raise ValueError("token sequence must start with SOS and end with EOS")

    def __len__(self):
        return len(self.ids)

    def validate(self, config):
        if len(self.ids) > config.max_seq:
            raise ShapeError(f"sequence length {len(self.ids)} exceeds max_seq {config.max_seq}")
        if any(not 0 <= i < config.vocab_size for i in self.ids):
            raise ValueError("token id outside vocabulary")


def make_sequence(config, words, class_id):
    """SOS, template words, class token, EOS."""
    seq = TokenSequence((SOS_ID, *(word_id(w) for w in words), class_token(config, class_id), EOS_ID))
    seq.validate(config)
    return seq


# ---------------------------------------------------------------- weights


def _block_shapes(w, hidden):
    return {
        "ln1_g": (w,), "ln1_b": (w,),
        "wq": (w, w), "bq": (w,), "wk": (w, w), "bk": (w,), "wv": (w, w), "bv": (w,),
        "wo": (w, w), "bo": (w,),
        "ln2_g": (w,), "ln2_b": (w,),
        "w1": (w, hidden), "b1": (hidden,), "w2": (hidden, w), "b2": (w,),
    }


def _init_block(rng, prefix, w, hidden):
    out = {}
    for name, shape in _block_shapes(w, hidden).items():
        if name.endswith("_g"):
            arr = np.ones(shape)
        elif name.startswith("b") or name.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        out[f"{prefix}.{name}"] = arr
    return out


def init_weights(config, rng):
    """Random weights as two ``{name: ndarray}`` dicts (image, text)."""
    w, d = config.width_, config.d
    hidden = w * config.mlp_ratio
    img = {
        "patch_proj": rng.normal(0.0, 1.0 / math.sqrt(config.patch_dim), size=(config.patch_dim, w)),
        "cls": rng.normal(0.0, 1.0 / math.sqrt(w), size=(1, w)),
        "pos": rng.normal(0.0, 0.02, size=(1 + config.M, w)),
    }
    for l in range(config.layers_f):
        img.update(_init_block(rng, f"block{l}", w, hidden))
    img.update({"ln_post_g": np.ones(w), "ln_post_b": np.zeros(w),
                "proj": rng.normal(0.0, 1.0 / math.sqrt(w), size=(w, d))})
    txt = {
        "tok_emb": rng.normal(0.0, 0.5, size=(config.vocab_size, w)),
        "pos": rng.normal(0.0, 0.02, size=(config.max_seq, w)),
    }
    for l in range(config.layers_g):
        txt.update(_init_block(rng, f"block{l}", w, hidden))
    txt.update({"ln_final_g": np.ones(w), "ln_final_b": np.zeros(w),
                "proj": rng.normal(0.0, 1.0 / math.sqrt(w), size=(w, d))})
    return img, txt


def _checksum(weights):
    h = hashlib.sha256()
    for name in sorted(weights):
        h.update(name.encode())
        h.update(np.ascontiguousarray(weights[name].data).tobytes())
    return h.hexdigest()


@dataclass
class FrozenEncoderPair:
    theta_f: dict
    theta_g: dict
    config: EncoderConfig
    history: tuple = field(default=())

    @classmethod
    def from_arrays(cls, img, txt, config, history=()):
        freeze = lambda ws: {k: Tensor(v) for k, v in ws.items()}  # noqa: E731
        return cls(freeze(img), freeze(txt), config, tuple(history))

    def checksum(self):
        return _checksum(self.theta_f) + _checksum(self.theta_g)

    def token_embedding(self, ids):
        return self.theta_g["tok_emb"].data[list(ids)].copy()


# ---------------------------------------------------------------- forward


def transformer_block(x, w, prefix, heads):
    """Pre-LN block: x + Attn(LN(x)), then x + MLP(LN(x)); no attention mask."""
    p = lambda name: w[f"{prefix}.{name}"]  # noqa: E731
    B, n, width = x.shape
    dh = width // heads

    h = nc.layer_norm(x) * p("ln1_g") + p("ln1_b")

    def split(t):
        return nc.permute(nc.reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(h @ p("wq") + p("bq"))
    k = split(h @ p("wk") + p("bk"))
    v = split(h @ p("wv") + p("bv"))
    att = nc.softmax_rows(nc.scalar_mul(q @ nc.transpose(k), 1.0 / math.sqrt(dh)))
    ctx = nc.reshape(nc.permute(att @ v, (0, 2, 1, 3)), (B, n, width))
    x = x + (ctx @ p("wo") + p("bo"))

    h = nc.layer_norm(x) * p("ln2_g") + p("ln2_b")
    h = nc.gelu(h @ p("w1") + p("b1"))
    return x + (h @ p("w2") + p("b2"))


def _as_batch(arr, tail_ndim):
    t = arr if isinstance(arr, Tensor) else Tensor(arr)
    single = t.ndim == tail_ndim
    if single:
        t = nc.reshape(t, (1, *t.shape))
    return t, single


def _apply_prompt(x, layer, prompts, offset, count, propagate):
    """Splice prompt rows into ``x`` at ``[offset, offset+count)``."""
    if prompts is None or layer >= len(prompts):
        return x
    P = prompts[layer]
    n = x.shape[-2]
    if layer == 0:
        parts = [nc.slice_rows(x, 0, offset)] if offset else []
        return nc.concat_rows(*parts, P, nc.slice_rows(x, offset, n))
    cur = nc.slice_rows(x, offset, offset + count)
    new = cur + P if propagate else P
    parts = [nc.slice_rows(x, 0, offset)] if offset else []
    parts.append(new)
    if offset + count < n:
        parts.append(nc.slice_rows(x, offset + count, n))
    return nc.concat_rows(*parts)


def image_forward(pair, patches, prompts=None, propagate=False):
    """Image branch on a (B, M, patch_dim) Tensor; ``prompts`` is a list of
    (V, width) tensors, one per prompted layer."""
    cfg, w = pair.config, pair.theta_f
    if patches.ndim != 3 or patches.shape[1:] != (cfg.M, cfg.patch_dim):
        raise ShapeError(f"patches shape {list(patches.shape)[-2:]} != [{cfg.M}, {cfg.patch_dim}]")
    x = nc.concat_rows(w["cls"], patches @ w["patch_proj"]) + w["pos"]
    V = prompts[0].shape[0] if prompts else 0
    for l in range(cfg.layers_f):
        x = _apply_prompt(x, l, prompts, 0, V, propagate)
        x = transformer_block(x, w, f"block{l}", cfg.heads)
    pooled = nc.reshape(nc.slice_rows(x, V, V + 1), (x.shape[0], x.shape[-1]))
    pooled = nc.layer_norm(pooled) * w["ln_post_g"] + w["ln_post_b"]
    return pooled @ w["proj"]


def _one_hot(ids, vocab):
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (vocab,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return Tensor(out)


def text_forward(pair, ids, prompts=None, propagate=False):
    """Text branch on a (B, n) integer array of equal-length sequences."""
    cfg, w = pair.config, pair.theta_g
    ids = np.asarray(ids)
    B, n = ids.shape
    T = prompts[0].shape[0] if prompts else 0
    if n + T > cfg.max_seq:
        raise ShapeError(f"sequence length {n + T} exceeds max_seq {cfg.max_seq}")
    x = _one_hot(ids, cfg.vocab_size) @ w["tok_emb"] + nc.slice_rows(w["pos"], 0, n)
    for l in range(cfg.layers_g):
        x = _apply_prompt(x, l, prompts, 1, T, propagate)
        x = transformer_block(x, w, f"block{l}", cfg.heads)
    last = n + T - 1
    pooled = nc.reshape(nc.slice_rows(x, last, last + 1), (B, x.shape[-1]))
    pooled = nc.layer_norm(pooled) * w["ln_final_g"] + w["ln_final_b"]
    return pooled @ w["proj"]


def _ids_batches(seqs, config):
    """Group sequences by length; yields (positions, id matrix)."""
    groups = {}
    for i, s in enumerate(seqs):
        s.validate(config)
        groups.setdefault(len(s), []).append(i)
    for length in sorted(groups):
        idx = groups[length]
        yield idx, np.array([seqs[i].ids for i in idx])


def encode_texts(pair, seqs, prompts=None, propagate=False):
    """Encode a list of TokenSequences to a (len(seqs), d) Tensor, in order."""
    seqs = list(seqs)
    chunks, order = [], []
    for idx, ids in _ids_batches(seqs, pair.config):
        chunks.append(text_forward(pair, ids, prompts, propagate))
        order.extend(idx)
    out = chunks[0] if len(chunks) == 1 else nc.concat_rows(*chunks)
    if order != sorted(order):
        perm = np.zeros((len(order), len(order)))
        perm[np.arange(len(order)), order] = 1.0
        # rows of out are in `order`; permutation matrix restores input order
        out = Tensor(perm.T) @ out
    return out


def encode_image(pair, patches):
    """Frozen image feature: d-vector for one (M, patch_dim) input, (B, d) for a batch."""
    t, single = _as_batch(patches, 2)
    out = image_forward(pair, t)
    return nc.reshape(out, (pair.config.d,)) if single else out


def encode_text(pair, seq):
    """Frozen text feature for one TokenSequence (d-vector) or a list ((B, d))."""
    if isinstance(seq, TokenSequence):
        return nc.reshape(encode_texts(pair, [seq]), (pair.config.d,))
    return encode_texts(pair, seq)


def cosine_logits(feats, class_feats, tau):
    f = feats if feats.ndim == 2 else nc.reshape(feats, (1, feats.shape[0]))
    for name, t in (("image feature", f), ("class feature", class_feats)):
        if np.any(np.sqrt((t.data * t.data).sum(axis=-1)) == 0.0):
            raise DegenerateInputError(f"zero-norm {name}")
    return nc.scalar_mul(nc.l2_normalize_rows(f) @ nc.transpose(nc.l2_normalize_rows(class_feats)), tau)


def zero_shot_probs(feat, class_feats, tau):
    """Softmax over classes of tau * cosine(feature, class feature)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if class_feats.ndim != 2 or class_feats.shape[0] < 1:
        raise ShapeError(f"class features must be C x d, got {list(class_feats.shape)}")
    probs = nc.softmax_rows(cosine_logits(feat, class_feats, tau))
    return nc.reshape(probs, (class_feats.shape[0],)) if feat.ndim == 1 else probs


# ---------------------------------------------------------------- pretraining


def contrastive_loss(img_feats, txt_feats, tau):
    """Symmetric in-batch cross-entropy, image->text and text->image averaged."""
    B = img_feats.shape[0]
    logits = cosine_logits(img_feats, txt_feats, tau)
    eye = Tensor(np.eye(B))
    i2t = nc.log(nc.softmax_rows(logits))
    t2i = nc.log(nc.softmax_rows(nc.transpose(logits)))
    total = nc.sum(i2t * eye) + nc.sum(t2i * eye)
    return nc.scalar_mul(total, -0.5 / B)


def _distractors(rng, config, tok_emb, max_count):
    """Random prompt-shaped token stacks for both branches (or None)."""
    if not max_count or rng.random() < 0.5:
        return None, None
    n = int(rng.integers(1, max_count + 1))
    depth = int(rng.integers(1, min(config.layers_f, config.layers_g) + 1))
    w = config.width_
    vis = [Tensor(rng.normal(0.0, 0.02, size=(n, w))) for _ in range(depth)]
    txt = [Tensor(rng.normal(0.0, 0.02, size=(n, w))) for _ in range(depth)]
    if rng.random() < 0.5:
        # word embeddings, as a template-initialised text prompt would be
        txt[0] = Tensor(tok_emb[rng.integers(2, 2 + len(LEXICON), size=n)])
    return vis, txt


def pretrain_contrastive(config, dataset, epochs, seed, batch_size=20, lr=2e-3, distractors=0):
    """Adam-train both towers on (patches, TokenSequence) pairs, then freeze.

    With ``distractors > 0`` half the batches get up to that many random
    extra tokens spliced in at the prompt positions of the first few layers,
    so the frozen model tolerates inserted tokens.  Returns a
    FrozenEncoderPair whose ``history`` holds the mean loss per epoch.
    """
    if batch_size < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    rng = np.random.default_rng(seed)
    img, txt = init_weights(config, rng)
    if epochs == 0:
        return FrozenEncoderPair.from_arrays(img, txt, config)
    pairs = list(dataset)
    if len(pairs) < 2:
        raise ValueError("contrastive pretraining needs at least two pairs")
    batch_size = min(batch_size, len(pairs))

    params_f = {k: Tensor(v, requires_grad=True) for k, v in img.items()}
    params_g = {k: Tensor(v, requires_grad=True) for k, v in txt.items()}
    live = FrozenEncoderPair(params_f, params_g, config)
    params = list(params_f.values()) + list(params_g.values())
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order) - batch_size + 1, batch_size):
            batch = [pairs[i] for i in order[start:start + batch_size]]
            # sort by text length so grouping keeps image/text rows aligned
            batch.sort(key=lambda pr: len(pr[1]))
            patches = Tensor(np.stack([pr[0] for pr in batch]))
            vis, txt = _distractors(rng, config, params_g["tok_emb"].data, distractors)
            with Graph():
                loss = contrastive_loss(image_forward(live, patches, vis),
                                        encode_texts(live, [pr[1] for pr in batch], txt),
                                        config.tau)
                grads = nc.backward(loss)
            step += 1
            for i, p in enumerate(params):
                g = grads[p]
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                mh = m[i] / (1 - b1 ** step)
                vh = v[i] / (1 - b2 ** step)
                p.data = p.data - lr * mh / (np.sqrt(vh) + eps)
                p.grad = None
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return FrozenEncoderPair.from_arrays(
        {k: p.data for k, p in params_f.items()},
        {k: p.data for k, p in params_g.items()},
        config, history)
