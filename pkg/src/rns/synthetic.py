"""Planted-pattern review corpora for desk-scale verification.

Items are partitioned into groups and the groups are chained into a single
cycle (each group has one fixed successor group). A user starts on a random
item; each step follows the chain from the previous purchase with probability
``pattern_strength`` and otherwise buys a uniformly random unused item.
Reviews of an item are drawn from its own group's words and its successor
group's words, so consecutive items on the chain share vocabulary and
documents carry the signal.
"""

from __future__ import annotations

import math

import numpy as np

from .corpus import Interaction

BASE_TIME = 1_300_000_000
DAY = 86_400


def default_seq_len(L: int) -> int:
    return max(10, 14 * L)


def generate_synthetic(users: int, items: int, L: int, pattern_strength: float, seed,
                       *, seq_len: int | None = None, group_size: int = 1, review_len: int = 10,
                       words_per_group: int = 2, filler_words: int = 20,
                       follow_noise: bool = True) -> list[Interaction]:
    """Return raw interactions (with review text) following a planted chain.

    By default the chain continues from whatever was bought last, so the
    successor depends only on the most recent item (a first-order Markov
    rule). With ``follow_noise=False`` a random purchase does not move the
    user along the chain: the next chained item follows the last chained item,
    so the signal may sit a few slots back in the history.
    """
    if items < 2 * users * L:
        raise ValueError(f"need items >= 2*users*L = {2 * users * L}, got {items}")
    if not 0.0 <= pattern_strength <= 1.0:
        raise ValueError("pattern_strength must be in [0, 1]")
    if group_size < 1 or items < 2 * group_size:
        raise ValueError("need at least two groups")
    seq_len = default_seq_len(L) if seq_len is None else seq_len
    if seq_len > items:
        raise ValueError("seq_len exceeds the catalog size")
    rng = np.random.default_rng(seed)

    n_groups = items // group_size
    group_of = np.minimum(np.arange(items) // group_size, n_groups - 1)
    members = [np.flatnonzero(group_of == g) for g in range(n_groups)]
    cycle = rng.permutation(n_groups)
    successor = np.empty(n_groups, dtype=np.int64)
    successor[cycle] = np.roll(cycle, -1)

    item_ids = [f"item{k:05d}" for k in range(items)]
    fillers = [f"filler{k}" for k in range(filler_words)]

    def review(k: int) -> str:
        own, nxt = group_of[k], successor[group_of[k]]
        words = []
        for r in rng.random(review_len):
            if r < 0.4:
                words.append(f"g{own}w{rng.integers(words_per_group)}")
            elif r < 0.8:
                words.append(f"g{nxt}w{rng.integers(words_per_group)}")
            else:
                words.append(fillers[rng.integers(filler_words)])
        return " ".join(words)

    # A random purchase (or a start) lands where the chain ahead is still
    # unbought, so the realized follow rate matches ``pattern_strength``
    # instead of dropping whenever a user runs into items they already own.
    if pattern_strength == 0.0:
        span = 0
    elif pattern_strength == 1.0:
        span = seq_len
    else:
        span = min(seq_len, math.ceil(1.0 / (1.0 - pattern_strength)))

    def chain_groups(g: int, ahead: int) -> list[int]:
        path = []
        for _ in range(ahead):
            g = successor[g]
            path.append(g)
        return path

    def random_item(used: set, left: np.ndarray, ahead: int, state: int | None) -> int:
        free = [k for k in range(items) if k not in used]
        while ahead > 0:
            if state is None:
                ok = [k for k in free if all(left[g] > 0 for g in chain_groups(group_of[k], ahead))]
            else:
                # the chain resumes from ``state``; keep off its path
                blocked = set(chain_groups(group_of[state], ahead))
                ok = [k for k in free if group_of[k] not in blocked]
            if ok:
                return int(rng.choice(ok))
            ahead //= 2
        return int(rng.choice(free))

    out: list[Interaction] = []
    for u in range(users):
        left = np.array([len(m) for m in members])
        used: set = set()
        state = random_item(used, left, min(span, seq_len - 1), None)
        seq = [state]
        used.add(state)
        left[group_of[state]] -= 1
        for step in range(1, seq_len):
            ahead = min(span, seq_len - step)
            fresh = []
            if rng.random() < pattern_strength:
                fresh = [k for k in members[successor[group_of[state]]] if k not in used]
            if fresh:
                nxt = int(rng.choice(fresh))
                state = nxt
            elif follow_noise:
                nxt = state = random_item(used, left, ahead, None)
            else:
                nxt = random_item(used, left, ahead, state)
            seq.append(nxt)
            used.add(nxt)
            left[group_of[nxt]] -= 1
        t0 = BASE_TIME + 37 * u
        for step, k in enumerate(seq):
            out.append(Interaction(f"user{u:04d}", item_ids[k], t0 + step * DAY, review(k)))
    return out


def successor_groups(items: int, seed, group_size: int = 1) -> np.ndarray:
    """The successor-group table ``generate_synthetic`` builds for this seed."""
    rng = np.random.default_rng(seed)
    n_groups = items // group_size
    cycle = rng.permutation(n_groups)
    successor = np.empty(n_groups, dtype=np.int64)
    successor[cycle] = np.roll(cycle, -1)
    return successor
