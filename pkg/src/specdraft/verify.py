"""Lossless acceptance of drafted tokens.

The per-node rule is multi-round residual rejection.  Children are tried in
turn against a running target ``p'`` and running proposal ``q'``.  A child
``c`` is accepted with probability ``min(1, p'(c) / q'(c))``.  On rejection,
``p'`` becomes ``norm(max(0, p' - q'))`` and ``c`` is removed from ``q'``.

``q'`` is whatever actually produced the children.  For sampled drafts it is
the draft distribution at the parent, with siblings drawn without
replacement.  For deterministic drafts it is a point mass on the child, so
acceptance reduces to ``p'(c)`` and a rejection just zeroes ``c`` in ``p'``.
Both cases keep the emitted token distributed exactly as ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import InvalidInputError, argmax_token
from .tree import ROOT, FlatDraft, ancestor_mask


class ZeroResidualError(ValueError):
    """The residual ``max(0, p - q)`` vanished: acceptance was certain."""


class RandomStream:
    """Buffered uniform draws from a seeded numpy generator."""

    def __init__(self, seed=0, block: int = 4096):
        self.gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.block = block
        self._buf: list[float] = []
        self._i = 0

    def random(self) -> float:
        if self._i >= len(self._buf):
            self._buf = self.gen.random(self.block).tolist()
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return u

    def choice(self, probs) -> int:
        return sample_index(probs, self.random())


def as_stream(rng) -> RandomStream:
    return rng if isinstance(rng, RandomStream) else RandomStream(rng)


def sample_index(probs: Sequence[float], u: float) -> int:
    """Inverse-CDF draw; skips zero-probability entries."""
    total = 0.0
    for x in probs:
        total += x
    target = u * total
    acc = 0.0
    last = -1
    for i, x in enumerate(probs):
        if x > 0:
            acc += x
            last = i
            if target < acc:
                return i
    if last < 0:
        raise ZeroResidualError("cannot sample from an all-zero vector")
    return last


def accept_probability(p, q, t: int) -> float:
    qt = float(q[t])
    if qt <= 0:
        raise InvalidInputError(f"token {t} has zero draft probability and cannot have been drafted")
    return min(1.0, float(p[t]) / qt)


def residual(p, q) -> np.ndarray:
    r = np.maximum(0.0, np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))
    total = r.sum()
    if total <= 0:
        raise ZeroResidualError("p - q has no positive part; the drafted token is always accepted")
    return r / total


@dataclass
class VerificationOutcome:
    accepted: list[int]
    bonus: int
    accepted_positions: list[int]
    # (flat position, accepted?, attempt index among its siblings) for every
    # drafted token actually put to the test
    tested: list[tuple[int, bool, int]] = field(default_factory=list)

    @property
    def cycle_length(self) -> int:
        return len(self.accepted) + 1

    @property
    def emitted(self) -> list[int]:
        return self.accepted + [self.bonus]


def _normalize(xs: list[float]) -> list[float]:
    total = sum(xs)
    if total <= 0:
        raise ZeroResidualError("residual target vanished")
    return [x / total for x in xs]


class TreeVerifier:
    """A draft plus its target distributions, preprocessed for repeated runs."""

    def __init__(self, root_dist, target_dists, draft: FlatDraft, bias: float = 0.0):
        m = len(draft)
        if len(target_dists) != m:
            raise InvalidInputError(f"{len(target_dists)} target distributions for a draft of {m} tokens")
        if draft.mask.shape != (m, m) or not np.array_equal(draft.mask, ancestor_mask(draft.parents)):
            raise InvalidInputError("draft mask does not match the ancestor relation")
        for i, par in enumerate(draft.parents):
            if par != ROOT and not 0 <= par < i:
                raise InvalidInputError(f"position {i} has parent {par}; parents must precede children")
        self.draft = draft
        self.bias = bias
        self.tokens = list(draft.tokens)
        self.p = [list(map(float, root_dist))] + [list(map(float, d)) for d in target_dists]
        kids = draft.children()
        if draft.sampled:
            order = lambda i: i  # noqa: E731 - sampling order is position order
        else:
            order = lambda i: (-draft.values[i], i)  # noqa: E731
        # node ids are shifted by one so that ROOT becomes 0
        self.children = [sorted(kids[ROOT], key=order)] + [sorted(kids[i], key=order) for i in range(m)]
        self.q = [list(map(float, d)) if draft.sampled else None for d in draft.draft_dists]

    def run(self, rng) -> VerificationOutcome:
        u = as_stream(rng).random
        tokens, bias = self.tokens, self.bias
        accepted, positions, tested = [], [], []
        node = 0
        while True:
            kids = self.children[node]
            p = self.p[node]
            if not kids:
                return VerificationOutcome(accepted, sample_index(p, u()), positions, tested)
            q = None
            nxt = None
            attempt = 0
            for c in kids:
                t = tokens[c]
                if self.q[c] is not None:
                    if q is None:
                        q = list(self.q[c])
                    qt = q[t]
                else:
                    qt = 1.0
                if qt <= 0:
                    continue
                a = min(1.0, p[t] / qt) if bias == 0 else min(1.0, p[t] / qt + bias)
                if u() < a:
                    tested.append((c, True, attempt))
                    nxt = c
                    break
                tested.append((c, False, attempt))
                attempt += 1
                if q is not None:
                    p = _normalize([max(0.0, x - y) for x, y in zip(p, q)])
                    q[t] = 0.0
                    qs = sum(q)
                    q = [x / qs for x in q] if qs > 0 else q
                else:
                    p = list(p)
                    p[t] = 0.0
                    p = _normalize(p)
            if nxt is None:
                return VerificationOutcome(accepted, sample_index(p, u()), positions, tested)
            accepted.append(tokens[nxt])
            positions.append(nxt)
            node = nxt + 1

    def run_greedy(self) -> VerificationOutcome:
        tokens = self.tokens
        accepted, positions, tested = [], [], []
        node = 0
        while True:
            best = argmax_token(self.p[node])
            nxt = None
            for attempt, c in enumerate(self.children[node]):
                ok = tokens[c] == best
                tested.append((c, ok, attempt))
                if ok:
                    nxt = c
                    break
            if nxt is None:
                return VerificationOutcome(accepted, best, positions, tested)
            accepted.append(tokens[nxt])
            positions.append(nxt)
            node = nxt + 1


def verify_tree(root_dist, target_dists, draft: FlatDraft, rng, bias: float = 0.0) -> VerificationOutcome:
    """Walk the draft from the root, accepting at most one child per level.

    ``target_dists[i]`` is the target distribution after flat position ``i``
    (conditioned on its ancestors and itself); ``root_dist`` is the one after
    the committed context.  ``bias`` is added to every acceptance probability
    and exists only to check that certification catches a lossy rule.
    """
    return TreeVerifier(root_dist, target_dists, draft, bias).run(rng)


def verify_chain(root_dist, target_dists, draft: FlatDraft, rng, bias: float = 0.0) -> VerificationOutcome:
    if not draft.is_chain():
        raise InvalidInputError("verify_chain needs a linear draft")
    return TreeVerifier(root_dist, target_dists, draft, bias).run(rng)


def verify_greedy(root_dist, target_dists, draft: FlatDraft) -> VerificationOutcome:
    """Temperature-0 acceptance: a child survives iff it is the target argmax."""
    return TreeVerifier(root_dist, target_dists, draft).run_greedy()
