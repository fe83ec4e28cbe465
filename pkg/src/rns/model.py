"""The review-driven sequential recommender network.

Users and items are encoded from their review documents by aspect-aware CNNs
(one per side). A user's recent items, shifted by learned position
embeddings, are attended to twice for every candidate: a softmax-weighted
union and a pointer to the single most-attended item. A second softmax mixes
those two short-term vectors, the result is added to the long-term user
vector with weight ``alpha`` and the candidate is scored with a sigmoid.

Everything here works on batches of "rows" (one row = one candidate scored
for one instance); the single-instance helpers wrap a batch of one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .corpus import NULL_ITEM, Corpus
from .tensor import Tensor

CKPT_MAGIC = b"RNSM"
CKPT_VERSION = 1
SIDES = ("user", "item")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 2
    doc_len: int = 300
    d: int = 25
    K: int = 5
    n: int = 10
    filter_heights: tuple[int, ...] = (1, 3, 5, 7, 9)
    L: int = 5
    alpha: float = 0.1
    use_union: bool = True
    use_individual: bool = True
    use_position: bool = True
    use_aspects: bool = True
    shared_word_emb: bool = False

    def __post_init__(self):
        object.__setattr__(self, "filter_heights", tuple(int(h) for h in self.filter_heights))

    @property
    def aspects(self) -> int:
        """Channel count seen by the filters: K, or 1 without aspect transforms."""
        return self.K if self.use_aspects else 1

    @property
    def filters_per_height(self) -> int:
        return self.n // len(self.filter_heights)

    def validate(self) -> "ModelConfig":
        for name in ("d", "K", "n", "L", "vocab_size", "doc_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        hs = self.filter_heights
        if not hs or len(set(hs)) != len(hs) or min(hs) < 1:
            raise ConfigError("filter_heights must be distinct positive integers")
        if self.n % len(hs):
            raise ConfigError(f"n={self.n} is not divisible by {len(hs)} filter heights")
        if self.doc_len <= max(hs):
            raise ConfigError(f"doc_len={self.doc_len} must exceed the largest filter height {max(hs)}")
        if not (self.use_union or self.use_individual):
            raise ConfigError("at least one of use_union / use_individual must be on")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter_heights"] = list(self.filter_heights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["filter_heights"] = tuple(d.get("filter_heights", cls.filter_heights))
        return cls(**d)


ABLATIONS = {
    "full": {},
    "no-individual": {"use_individual": False},
    "no-union": {"use_union": False},
    "no-position": {"use_position": False},
    "no-aspect": {"use_aspects": False},
}


def ablate(config: ModelConfig, variant: str) -> ModelConfig:
    try:
        return replace(config, **ABLATIONS[variant])
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(ABLATIONS)}") from None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _emb_name(config: ModelConfig, side: str) -> str:
    return "word_emb" if config.shared_word_emb else f"{side}_word_emb"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable tensor, in a fixed order."""
    config.validate()
    d, K, c = config.d, config.aspects, config.filters_per_height
    shapes: dict[str, tuple[int, ...]] = {}
    if config.shared_word_emb:
        shapes["word_emb"] = (config.vocab_size, d)
    for side in SIDES:
        if not config.shared_word_emb:
            shapes[f"{side}_word_emb"] = (config.vocab_size, d)
        if config.use_aspects:
            shapes[f"{side}_aspect"] = (config.K, d, d)
        for h in config.filter_heights:
            shapes[f"{side}_filter_h{h}"] = (c, h, d, K)
            shapes[f"{side}_bias_h{h}"] = (c,)
    if config.use_position:
        shapes["position"] = (config.L, config.n)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: ModelConfig, seed=0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, zero position embeddings."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if "_bias_" in name or name == "position":
            data = np.zeros(shape)
        else:
            if "_filter_" in name:
                c, h, d, K = shape
                fan_in, fan_out = h * d * K, c
            else:
                fan_in, fan_out = shape[-2], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# A-CNN document encoder
# ---------------------------------------------------------------------------


def aspect_stack(emb: Tensor, params: dict[str, Tensor], config: ModelConfig, side: str) -> Tensor:
    """B x l x d word embeddings -> B x l x (d*K) aspect-stacked channels.

    Channel ``j*K + a`` holds column j of ``M @ T_a``; this matches a filter
    laid out as h x d x K.
    """
    B, l, d = emb.shape
    if not config.use_aspects:
        return emb
    stacked = T.einsum("blm,amj->blja", emb, params[f"{side}_aspect"])
    return T.reshape(stacked, (B, l, d * config.K))


def encode_documents(docs, side: str, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Encode a B x l array of token ids into B x n representations."""
    docs = np.asarray(docs, dtype=np.int64)
    if docs.ndim != 2 or docs.shape[1] != config.doc_len:
        raise T.DimensionError(f"documents must be B x {config.doc_len}, got {docs.shape}")
    emb = T.embedding(params[_emb_name(config, side)], docs)
    x = aspect_stack(emb, params, config, side)
    B = docs.shape[0]
    C = config.d * config.aspects
    pooled = []
    for h in config.filter_heights:
        f = params[f"{side}_filter_h{h}"]
        filt = T.reshape(f, (f.shape[0], h, C))
        z = T.relu(T.correlate(x, filt, params[f"{side}_bias_h{h}"]))
        m, _ = T.max_axis(z, axis=1)
        pooled.append(m)
    out = pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=1)
    assert out.shape == (B, config.n)
    return out


def encode_document(doc, side: str, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Single document of length l -> vector of length n."""
    doc = np.asarray(doc, dtype=np.int64)
    if doc.shape != (config.doc_len,):
        raise T.DimensionError(f"document length {doc.shape} != {config.doc_len}")
    return T.reshape(encode_documents(doc[None, :], side, params, config), (config.n,))


# ---------------------------------------------------------------------------
# hierarchical attention
# ---------------------------------------------------------------------------


def add_positions(history: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """R x L x n history plus the m-th position embedding on slot m."""
    if not config.use_position:
        return history
    R, L, _ = history.shape
    pos = T.embedding(params["position"], np.broadcast_to(np.arange(L), (R, L)))
    return T.add(history, pos)


def union_weights(history: Tensor, mask: np.ndarray, cand: Tensor) -> Tensor:
    logits = T.einsum("rln,rn->rl", history, cand)
    return T.softmax(logits, mask=mask)


def pointer_index(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax over unmasked slots, ties to the most recent (last) slot."""
    w = np.where(mask, weights, -np.inf)
    L = w.shape[-1]
    return L - 1 - np.argmax(w[..., ::-1], axis=-1)


def select_slot(history: Tensor, idx: np.ndarray) -> Tensor:
    R, L, n = history.shape
    flat = T.reshape(history, (R * L, n))
    return T.embedding(flat, np.arange(R) * L + idx)


def level_mix(p_s1: Tensor, p_s2: Tensor, cand: Tensor) -> tuple[Tensor, Tensor]:
    levels = T.stack([p_s1, p_s2], axis=1)
    beta = T.softmax(T.einsum("rkn,rn->rk", levels, cand))
    return T.einsum("rk,rkn->rn", beta, levels), beta


@dataclass
class Trace:
    """Attention internals of a scored batch (used by ``inspect``)."""
    union: np.ndarray | None = None
    pointer: np.ndarray | None = None
    beta: np.ndarray | None = None


def short_term(history: Tensor, mask: np.ndarray, cand: Tensor, params, config: ModelConfig,
               trace: Trace | None = None) -> Tensor:
    """R x L x n history (positions not yet added), R x L mask, R x n candidates -> R x n."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("history has no unmasked position")
    hist = add_positions(history, params, config)
    w = union_weights(hist, mask, cand)
    p_s1 = T.einsum("rl,rln->rn", w, hist)
    idx = T.selection(lambda: pointer_index(w.data, mask))
    p_s2 = select_slot(hist, idx)
    beta = None
    if config.use_union and config.use_individual:
        p_s, beta = level_mix(p_s1, p_s2, cand)
    elif config.use_union:
        p_s = p_s1
    else:
        p_s = p_s2
    if trace is not None:
        trace.union = w.data.copy()
        trace.pointer = np.asarray(idx).copy()
        trace.beta = None if beta is None else beta.data.copy()
    return p_s


def fuse_and_score(p_l: Tensor, p_s: Tensor, cand: Tensor, alpha: float) -> Tensor:
    p_u = T.add(p_l, T.scale(p_s, alpha))
    return T.sigmoid(T.einsum("rn,rn->r", p_u, cand))


# single-instance surface -----------------------------------------------------


def _vec(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_position(history_vecs, params, config: ModelConfig) -> Tensor:
    h = _vec(history_vecs)
    L, n = h.shape
    return T.reshape(add_positions(T.reshape(h, (1, L, n)), params, config), (L, n))


def union_attention(history, mask, cand) -> tuple[Tensor, Tensor]:
    """Weights over the L history slots and their weighted sum."""
    h, q = _vec(history), _vec(cand)
    L, n = h.shape
    m = np.asarray(mask, dtype=bool).reshape(1, L)
    if not m.any():
        raise ValueError("all history positions are masked")
    w = union_weights(T.reshape(h, (1, L, n)), m, T.reshape(q, (1, n)))
    p = T.einsum("rl,rln->rn", w, T.reshape(h, (1, L, n)))
    return T.reshape(w, (L,)), T.reshape(p, (n,))


def individual_pointer(history, weights, mask=None) -> tuple[int, Tensor]:
    """0-based slot of the largest weight and that slot's vector."""
    h = _vec(history)
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    m = np.ones_like(w, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = int(pointer_index(w, m))
    L, n = h.shape
    return idx, T.reshape(select_slot(T.reshape(h, (1, L, n)), np.array([idx])), (n,))


def level_attention(p_s1, p_s2, cand, use_union: bool = True, use_individual: bool = True) -> Tensor:
    if not use_individual:
        return _vec(p_s1)
    if not use_union:
        return _vec(p_s2)
    a, b, q = _vec(p_s1), _vec(p_s2), _vec(cand)
    n = a.shape[0]
    p, _ = level_mix(T.reshape(a, (1, n)), T.reshape(b, (1, n)), T.reshape(q, (1, n)))
    return T.reshape(p, (n,))


def score(p_l, p_s, q_j, alpha: float) -> Tensor:
    a, b, q = _vec(p_l), _vec(p_s), _vec(q_j)
    n = a.shape[0]
    s = fuse_and_score(T.reshape(a, (1, n)), T.reshape(b, (1, n)), T.reshape(q, (1, n)), alpha)
    return T.reshape(s, ())


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------


@dataclass
class Encoded:
    """Representation tables: row u of ``users``; row i of ``items`` (row 0 zero)."""
    users: Tensor
    items: Tensor
    user_rows: dict = field(default_factory=dict)
    item_rows: dict = field(default_factory=dict)

    def user_index(self, users: np.ndarray) -> np.ndarray:
        return np.array([self.user_rows[int(u)] for u in users.reshape(-1)]).reshape(users.shape)

    def item_index(self, items: np.ndarray) -> np.ndarray:
        return np.array([self.item_rows[int(i)] for i in items.reshape(-1)]).reshape(items.shape)


def encode_needed(corpus: Corpus, users, items, params, config: ModelConfig) -> Encoded:
    """Encode just the listed users and items (plus the zero null item)."""
    users = sorted({int(u) for u in np.asarray(users).reshape(-1)})
    items = sorted({int(i) for i in np.asarray(items).reshape(-1)} - {NULL_ITEM})
    u_vecs = encode_documents(corpus.user_docs[users], "user", params, config)
    zero = Tensor(np.zeros((1, config.n)))
    if items:
        i_vecs = T.concat([zero, encode_documents(corpus.item_docs[items], "item", params, config)], axis=0)
    else:
        i_vecs = zero
    return Encoded(
        users=u_vecs, items=i_vecs,
        user_rows={u: r for r, u in enumerate(users)},
        item_rows={NULL_ITEM: 0, **{i: r + 1 for r, i in enumerate(items)}},
    )


def encode_all(corpus: Corpus, params, config: ModelConfig, chunk: int = 512) -> Encoded:
    """Encode every user and item, chunked; meant for evaluation (no tape)."""
    u_parts = [encode_documents(corpus.user_docs[s:s + chunk], "user", params, config).data
               for s in range(0, corpus.n_users, chunk)]
    i_parts = [np.zeros((1, config.n))]
    i_parts += [encode_documents(corpus.item_docs[s:s + chunk], "item", params, config).data
                for s in range(1, corpus.n_items + 1, chunk)]
    return Encoded(
        users=Tensor(np.concatenate(u_parts)), items=Tensor(np.concatenate(i_parts)),
        user_rows={u: u for u in range(corpus.n_users)},
        item_rows={i: i for i in range(corpus.n_items + 1)},
    )


def score_rows(enc: Encoded, users, histories, candidates, params, config: ModelConfig,
               trace: Trace | None = None) -> Tensor:
    """Score B instances against C candidates each; returns a B x C tensor.

    ``users`` has length B, ``histories`` is B x L (0 = null item) and
    ``candidates`` is B x C, all in dense ids.
    """
    users = np.asarray(users, dtype=np.int64)
    hist_ids = np.asarray(histories, dtype=np.int64)
    cand_ids = np.asarray(candidates, dtype=np.int64)
    B, C = cand_ids.shape
    L = config.L
    if hist_ids.shape != (B, L):
        raise T.DimensionError(f"histories must be {B} x {L}, got {hist_ids.shape}")
    R = B * C
    rep_users = np.repeat(users, C)
    rep_hist = np.repeat(hist_ids, C, axis=0)
    p_l = T.embedding(enc.users, enc.user_index(rep_users))
    hist = T.embedding(enc.items, enc.item_index(rep_hist))
    cand = T.embedding(enc.items, enc.item_index(cand_ids.reshape(R)))
    mask = rep_hist != NULL_ITEM
    p_s = short_term(hist, mask, cand, params, config, trace)
    return T.reshape(fuse_and_score(p_l, p_s, cand, config.alpha), (B, C))


def forward(corpus: Corpus, users, histories, candidates, params, config: ModelConfig,
            trace: Trace | None = None) -> Tensor:
    """Encode the needed documents and score; differentiable end to end."""
    enc = encode_needed(corpus, users, np.concatenate([np.ravel(histories), np.ravel(candidates)]),
                        params, config)
    return score_rows(enc, users, histories, candidates, params, config, trace)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], config: ModelConfig, extra: dict | None = None) -> None:
    """``RNSM`` + u32 version + u64 JSON size + JSON config, then per tensor:
    u16 name size, name, u32 ndim, u64 dims, row-major little-endian f64."""
    meta = json.dumps({"config": config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, mlen = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(blob[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        params[name] = Tensor(data.copy(), requires_grad=True)
    config = ModelConfig.from_dict(meta["config"])
    expected = param_shapes(config)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: parameter shapes do not match the stored config")
    return params, config, meta.get("extra", {})
