"""Review corpora: parsing, filtering, splitting, documents and instances.

Dense ids: users are ``0..U-1``; items are ``1..I`` because item id 0 is the
null item used to left-pad short histories.
"""

from __future__ import annotations

import gzip
import json
import logging
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
OOV = 1
NULL_ITEM = 0

CACHE_MAGIC = b"RNSC"
CACHE_VERSION = 1

_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    review_text: str = ""

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("interaction ids must be non-empty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def read_reviews(path) -> tuple[list[Interaction], int]:
    """Parse a JSON-lines review dump; return interactions and the skip count."""
    path = Path(path)
    out: list[Interaction] = []
    skipped = 0
    total = 0
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            total += 1
            try:
                rec = json.loads(line)
                text = rec.get("reviewText")
                out.append(Interaction(
                    user_id=str(rec["reviewerID"]),
                    item_id=str(rec["asin"]),
                    timestamp=int(rec["unixReviewTime"]),
                    review_text="" if text is None else str(text),
                ))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                skipped += 1
                logger.warning("%s:%d: skipping malformed review (%s)", path, lineno, exc)
    if total and skipped * 2 > total:
        raise CorpusError(f"{path}: {skipped} of {total} lines malformed")
    return out, skipped


def parse_reviews(path) -> list[Interaction]:
    return read_reviews(path)[0]


def write_reviews(interactions: Iterable[Interaction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in interactions:
            fh.write(json.dumps({
                "reviewerID": it.user_id,
                "asin": it.item_id,
                "unixReviewTime": it.timestamp,
                "reviewText": it.review_text,
            }) + "\n")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return [w for w in _SPLIT.split(text.lower()) if w]


@dataclass
class Vocabulary:
    tokens: list[str]
    min_count: int = 5
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != ["<pad>", "<oov>"]:
            raise ValueError("vocabulary must start with <pad>, <oov>")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 5) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        kept = sorted((w for w, c in counts.items() if c >= min_count),
                      key=lambda w: (-counts[w], w))
        return cls(["<pad>", "<oov>"] + kept, min_count)

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, word: str) -> int:
        return self.index.get(word, OOV)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on non-alphanumeric runs, map with OOV fallback."""
    return [vocab.lookup(w) for w in split_words(text)]


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    users: int
    items: int
    interactions: int
    sparsity: float
    avg_actions: float

    @classmethod
    def from_counts(cls, users: int, items: int, interactions: int) -> "CorpusStats":
        return cls(users, items, interactions,
                   1.0 - interactions / (users * items), interactions / users)

    def as_dict(self) -> dict:
        return {
            "users": self.users,
            "items": self.items,
            "interactions": self.interactions,
            "sparsity": self.sparsity,
            "avg_actions_per_user": self.avg_actions,
        }


def train_length(n: int, train_ratio: float) -> int:
    # rounding guards against 0.7 * 10 landing on 7.000000000000001
    return math.ceil(round(train_ratio * n, 9))


@dataclass
class Corpus:
    user_ids: list[str]
    item_ids: list[str]            # item_ids[0] is the null item ""
    sequences: list[np.ndarray]    # dense item ids, chronological
    train_lengths: np.ndarray
    user_docs: np.ndarray          # U x doc_len token ids
    item_docs: np.ndarray          # (I+1) x doc_len token ids; row 0 all PAD
    vocab: Vocabulary
    params: dict = field(default_factory=dict)
    _user_index: dict = field(init=False, repr=False, default=None)
    _item_index: dict = field(init=False, repr=False, default=None)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        """Number of real items (excludes the null item)."""
        return len(self.item_ids) - 1

    @property
    def doc_len(self) -> int:
        return self.user_docs.shape[1]

    @property
    def stats(self) -> CorpusStats:
        n = int(sum(len(s) for s in self.sequences))
        return CorpusStats.from_counts(self.n_users, self.n_items, n)

    def user_index(self, external: str) -> int:
        if self._user_index is None:
            self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        return self._user_index[external]

    def item_index(self, external: str) -> int:
        if self._item_index is None:
            self._item_index = {it: i for i, it in enumerate(self.item_ids) if i}
        return self._item_index[external]

    def train_sequence(self, u: int) -> np.ndarray:
        return self.sequences[u][: self.train_lengths[u]]

    def test_sequence(self, u: int) -> np.ndarray:
        return self.sequences[u][self.train_lengths[u]:]


def _pad(tokens: list[int], doc_len: int) -> np.ndarray:
    out = np.zeros(doc_len, dtype=np.int64)
    tokens = tokens[:doc_len]
    out[: len(tokens)] = tokens
    return out


def build_corpus(interactions: Sequence[Interaction], min_user_interactions: int = 10,
                 train_ratio: float = 0.7, doc_len: int = 300, min_count: int = 5) -> Corpus:
    """Filter, sort, split and tokenize a list of interactions.

    Users with fewer than ``min_user_interactions`` rows are dropped in a
    single pass. Documents and vocabulary use train-period reviews only.
    """
    if not interactions:
        raise CorpusError("no interactions")
    if not 0 < train_ratio <= 1:
        raise CorpusError("train_ratio must be in (0, 1]")
    if doc_len < 1:
        raise CorpusError("doc_len must be positive")

    by_user: dict[str, list[tuple[int, int]]] = {}
    for pos, it in enumerate(interactions):
        by_user.setdefault(it.user_id, []).append((it.timestamp, pos))
    kept_users = sorted(u for u, rows in by_user.items() if len(rows) >= min_user_interactions)
    if not kept_users:
        raise CorpusError("empty corpus: every user was filtered out")

    # stable chronological order: ties keep input order
    ordered = {u: [pos for _, pos in sorted(by_user[u])] for u in kept_users}
    item_ids = [""] + sorted({interactions[p].item_id for rows in ordered.values() for p in rows})
    item_index = {it: i for i, it in enumerate(item_ids) if i}

    sequences, train_lengths = [], []
    train_rows: list[int] = []
    for u in kept_users:
        rows = ordered[u]
        sequences.append(np.array([item_index[interactions[p].item_id] for p in rows], dtype=np.int64))
        n_train = train_length(len(rows), train_ratio)
        train_lengths.append(n_train)
        train_rows.extend(rows[:n_train])

    vocab = Vocabulary.build((interactions[p].review_text for p in train_rows), min_count)

    user_docs = np.zeros((len(kept_users), doc_len), dtype=np.int64)
    for ui, u in enumerate(kept_users):
        toks: list[int] = []
        for p in ordered[u][: train_lengths[ui]]:
            toks.extend(tokenize(interactions[p].review_text, vocab))
            if len(toks) >= doc_len:
                break
        user_docs[ui] = _pad(toks, doc_len)

    # item documents read train-period reviews in global chronological order
    item_rows: dict[int, list[tuple[int, int]]] = {}
    for p in train_rows:
        it = interactions[p]
        item_rows.setdefault(item_index[it.item_id], []).append((it.timestamp, p))
    item_docs = np.zeros((len(item_ids), doc_len), dtype=np.int64)
    for i, rows in item_rows.items():
        toks = []
        for _, p in sorted(rows):
            toks.extend(tokenize(interactions[p].review_text, vocab))
            if len(toks) >= doc_len:
                break
        item_docs[i] = _pad(toks, doc_len)

    return Corpus(
        user_ids=kept_users,
        item_ids=item_ids,
        sequences=sequences,
        train_lengths=np.array(train_lengths, dtype=np.int64),
        user_docs=user_docs,
        item_docs=item_docs,
        vocab=vocab,
        params={"min_user_interactions": min_user_interactions, "train_ratio": train_ratio,
                "doc_len": doc_len, "min_count": min_count},
    )


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingInstance:
    user: int
    history: tuple[int, ...]
    target: int
    negatives: tuple[int, ...]


@dataclass(frozen=True)
class TestInstance:
    __test__ = False  # keep pytest from collecting it

    user: int
    history: tuple[int, ...]
    relevant: tuple[int, ...]
    candidates: tuple[int, ...]
    position: int = -1     # index into the full sequence (per-step only)


def _window(seq: np.ndarray, t: int, L: int) -> tuple[int, ...]:
    hist = seq[max(0, t - L):t].tolist()
    return (NULL_ITEM,) * (L - len(hist)) + tuple(hist)


def _sample_excluding(rng: np.random.Generator, n_items: int, k: int, exclude: set) -> list[int]:
    """k distinct item ids from 1..n_items avoiding ``exclude``."""
    eligible = n_items - len(exclude)
    if k > eligible:
        raise CorpusError(f"need {k} negatives but only {eligible} eligible items")
    if 2 * k > eligible:
        pool = np.array([i for i in range(1, n_items + 1) if i not in exclude])
        return rng.choice(pool, size=k, replace=False).tolist()
    out: list[int] = []
    seen = set(exclude)
    while len(out) < k:
        i = int(rng.integers(1, n_items + 1))
        if i not in seen:
            seen.add(i)
            out.append(i)
    return out


def make_training_instances(corpus: Corpus, L: int, x: int, seed) -> list[TrainingInstance]:
    """One instance per train position t >= 1 with x fresh negatives."""
    if L < 1 or x < 1:
        raise CorpusError("L and x must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for u in range(corpus.n_users):
        train = corpus.train_sequence(u)
        if x >= corpus.n_items - len(corpus.sequences[u]):
            raise CorpusError(f"x={x} negatives impossible for user {corpus.user_ids[u]}")
        exclude = set(train.tolist())
        for t in range(1, len(train)):
            negs = _sample_excluding(rng, corpus.n_items, x, exclude)
            out.append(TrainingInstance(u, _window(train, t, L), int(train[t]), tuple(negs)))
    return out


def make_test_instances(corpus: Corpus, L: int, num_negatives: int = 100, seed=0,
                        protocol: str = "per-user") -> list[TestInstance]:
    """Candidate sets for ranking: relevant items plus sampled negatives.

    ``per-step`` yields one instance per test position whose history may reach
    back into the train period; ``per-user`` yields one instance per user with
    every test item relevant. Negatives never come from the user's sequence.
    """
    if protocol not in ("per-step", "per-user"):
        raise ValueError(f"unknown protocol {protocol!r}")
    rng = np.random.default_rng(seed)
    out = []
    for u in range(corpus.n_users):
        seq = corpus.sequences[u]
        n_train = int(corpus.train_lengths[u])
        if n_train >= len(seq):
            raise CorpusError(f"user {corpus.user_ids[u]} has no test items")
        exclude = set(seq.tolist())
        if protocol == "per-step":
            for t in range(n_train, len(seq)):
                negs = _sample_excluding(rng, corpus.n_items, num_negatives, exclude)
                target = int(seq[t])
                out.append(TestInstance(u, _window(seq, t, L), (target,), (target, *negs), t))
        else:
            relevant = tuple(dict.fromkeys(seq[n_train:].tolist()))
            negs = _sample_excluding(rng, corpus.n_items, num_negatives, exclude)
            out.append(TestInstance(u, _window(seq, n_train, L), relevant, relevant + tuple(negs)))
    return out


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, path) -> None:
    """Write the ``RNSC`` cache: magic, u32 version, u64 header size, JSON
    header describing each array section, then the raw little-endian arrays."""
    lengths = np.array([len(s) for s in corpus.sequences], dtype=np.int64)
    flat = np.concatenate(corpus.sequences) if corpus.sequences else np.zeros(0, np.int64)
    arrays = {
        "sequence_lengths": lengths,
        "sequences": flat.astype(np.int64),
        "train_lengths": corpus.train_lengths.astype(np.int64),
        "user_docs": corpus.user_docs.astype(np.int64),
        "item_docs": corpus.item_docs.astype(np.int64),
    }
    sections, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).astype("<i8").tobytes()
        sections.append({"name": name, "dtype": "<i8", "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "user_ids": corpus.user_ids,
        "item_ids": corpus.item_ids,
        "vocab": corpus.vocab.tokens,
        "vocab_min_count": corpus.vocab.min_count,
        "params": corpus.params,
        "sections": sections,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IQ", CACHE_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CACHE_MAGIC:
        raise CorpusError(f"{path}: not a corpus cache")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != CACHE_VERSION:
        raise CorpusError(f"{path}: unsupported cache version {version}")
    start = 16
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for sec in header["sections"]:
        lo = base + sec["offset"]
        arr = np.frombuffer(blob[lo:lo + sec["nbytes"]], dtype=sec["dtype"])
        arrays[sec["name"]] = arr.astype(np.int64).reshape(sec["shape"])
    bounds = np.cumsum(arrays["sequence_lengths"])[:-1]
    return Corpus(
        user_ids=header["user_ids"],
        item_ids=header["item_ids"],
        sequences=list(np.split(arrays["sequences"], bounds)),
        train_lengths=arrays["train_lengths"],
        user_docs=arrays["user_docs"],
        item_docs=arrays["item_docs"],
        vocab=Vocabulary(header["vocab"], header["vocab_min_count"]),
        params=header["params"],
    )
