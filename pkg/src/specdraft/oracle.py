"""Brute-force ground truth for losslessness.

Everything here is computed by enumerating outcomes rather than sampling
them, so the results can be compared against the verifier and the engine
at tight tolerances.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .models import apply_temperature
from .tree import ROOT, FlatDraft, ancestor_mask

ENUMERATION_LIMIT = 10**6
MAX_TREE_NODES = 7
MAX_TREE_VOCAB = 4


class EnumerationGuardError(ValueError):
    pass


class InsufficientSamplesError(ValueError):
    def __init__(self, msg: str, required_n: int):
        super().__init__(msg)
        self.required_n = required_n


@dataclass
class ExactSequenceDistribution:
    horizon: int
    probs: dict[tuple[int, ...], float]

    def total(self) -> float:
        return math.fsum(self.probs.values())

    def marginalize_last(self) -> "ExactSequenceDistribution":
        out: dict[tuple[int, ...], float] = defaultdict(float)
        for seq, pr in self.probs.items():
            out[seq[:-1]] += pr
        return ExactSequenceDistribution(self.horizon - 1, dict(out))

    def max_abs_diff(self, other: "ExactSequenceDistribution") -> float:
        keys = set(self.probs) | set(other.probs)
        return max((abs(self.probs.get(k, 0.0) - other.probs.get(k, 0.0)) for k in keys), default=0.0)


def exact_autoregressive(target, prompt: Sequence[int], L: int, temperature: float = 1.0) -> ExactSequenceDistribution:
    """Probability of every length-``L`` continuation under plain sampling."""
    v = target.vocab_size
    if v**L > ENUMERATION_LIMIT:
        raise EnumerationGuardError(f"V^L = {v}^{L} exceeds the enumeration bound {ENUMERATION_LIMIT}")
    probs: dict[tuple[int, ...], float] = {(): 1.0}
    for _ in range(L):
        nxt: dict[tuple[int, ...], float] = {}
        for seq, pr in probs.items():
            row = apply_temperature(target.next_distribution(tuple(prompt) + seq), temperature)
            for t in range(v):
                if row[t] > 0:
                    nxt[seq + (t,)] = pr * float(row[t])
        probs = nxt
    return ExactSequenceDistribution(L, probs)


# ---------------------------------------------------------------------------
# per-node enumeration of the acceptance procedure, in exact rationals


def _frac_dist(d) -> list[Fraction]:
    xs = [Fraction(float(x)) for x in d]
    s = sum(xs)
    return [x / s for x in xs]


def _emission(p: list[Fraction], kids: Sequence[int], q: list[Fraction] | None) -> list[Fraction]:
    """Exact law of the token emitted at one node.

    ``kids`` are the drafted tokens in trial order.  ``q`` is the shared
    proposal they were sampled from, or None for deterministic children.
    """
    out = [Fraction(0)] * len(p)
    alive = Fraction(1)
    for c in kids:
        qc = Fraction(1) if q is None else q[c]
        if qc == 0:
            continue
        a = min(Fraction(1), p[c] / qc)
        out[c] += alive * a
        alive *= 1 - a
        if alive == 0:
            return out
        if q is None:
            p = [Fraction(0) if t == c else x for t, x in enumerate(p)]
        else:
            p = [max(Fraction(0), x - y) for x, y in zip(p, q)]
            q = [Fraction(0) if t == c else x for t, x in enumerate(q)]
            qs = sum(q)
            if qs:
                q = [x / qs for x in q]
        s = sum(p)
        p = [x / s for x in p]
    for t, x in enumerate(p):
        out[t] += alive * x
    return out


def _sampled_emission(p: list[Fraction], q: list[Fraction], n_kids: int) -> list[Fraction]:
    """Average of :func:`_emission` over every ordered draw of ``n_kids`` siblings."""
    out = [Fraction(0)] * len(p)
    support = [t for t, x in enumerate(q) if x > 0]
    for seq in itertools.permutations(support, min(n_kids, len(support))):
        w = Fraction(1)
        left = Fraction(1)
        for t in seq:
            w *= q[t] / left
            left -= q[t]
        if w == 0:
            continue
        for t, x in enumerate(_emission(p, seq, q)):
            out[t] += w * x
    return out


def _trial_order(draft: FlatDraft, kids: list[int]) -> list[int]:
    if draft.sampled:
        return sorted(kids)
    return sorted(kids, key=lambda i: (-draft.values[i], i))


def exact_tree_verification_marginal(root_dist, target_dists, draft: FlatDraft) -> list[np.ndarray]:
    """Exact law of the token emitted right after each node is reached.

    Entry 0 is for the root and entry ``i + 1`` for flat position ``i``.  A
    verifier is lossless iff each entry equals the target distribution at
    that node.  For sampled drafts the sibling draws are enumerated as well,
    so the drafted tokens themselves are treated as random.
    """
    m = len(draft)
    if m > MAX_TREE_NODES or len(root_dist) > MAX_TREE_VOCAB:
        raise EnumerationGuardError(
            f"oracle handles at most {MAX_TREE_NODES} drafted tokens over {MAX_TREE_VOCAB} symbols"
        )
    if not np.array_equal(draft.mask, ancestor_mask(draft.parents)):
        raise ValueError("draft mask does not match its parents")
    kids: dict[int, list[int]] = {ROOT: []}
    for i, par in enumerate(draft.parents):
        kids.setdefault(par, []).append(i)
    out = []
    for node, dist in [(ROOT, root_dist)] + list(enumerate(target_dists)):
        p = _frac_dist(dist)
        children = _trial_order(draft, kids.get(node, []))
        if not children:
            law = p
        elif draft.sampled:
            law = _sampled_emission(p, _frac_dist(draft.draft_dists[children[0]]), len(children))
        else:
            law = _emission(p, [draft.tokens[c] for c in children], None)
        out.append(np.array([float(x) for x in law]))
    return out


def exact_cycle_distribution(root_dist, target_dists, draft: FlatDraft) -> dict[tuple[int, ...], float]:
    """Exact law of the whole emitted block (accepted path plus bonus) of a deterministic draft."""
    if draft.sampled:
        raise ValueError("cycle enumeration needs a deterministic draft")
    kids: dict[int, list[int]] = {ROOT: []}
    for i, par in enumerate(draft.parents):
        kids.setdefault(par, []).append(i)
    dists = {ROOT: np.asarray(root_dist, dtype=float)}
    for i, d in enumerate(target_dists):
        dists[i] = np.asarray(d, dtype=float)
    out: dict[tuple[int, ...], float] = defaultdict(float)

    def walk(node, prefix, mass):
        p = dists[node] / dists[node].sum()
        alive = mass
        for c in _trial_order(draft, kids.get(node, [])):
            t = draft.tokens[c]
            a = min(1.0, p[t])
            if a > 0:
                walk(c, prefix + (t,), alive * a)
            alive *= 1 - a
            if alive <= 0:
                return
            p = p.copy()
            p[t] = 0.0
            p = p / p.sum()
        for b in np.flatnonzero(p):
            out[prefix + (int(b),)] += alive * float(p[b])

    walk(ROOT, (), 1.0)
    return dict(out)


def _sampled_chain_cycle(engine, ctx: tuple[int, ...], depth: int) -> dict[tuple[int, ...], float]:
    p = np.asarray(engine.target.next_distribution(ctx), dtype=float)
    q = np.asarray(engine.draft.next_distribution(ctx), dtype=float)
    out: dict[tuple[int, ...], float] = defaultdict(float)
    reject = 0.0
    for c in np.flatnonzero(q):
        c = int(c)
        a = min(1.0, p[c] / q[c])
        if a > 0:
            if depth > 1:
                sub = _sampled_chain_cycle(engine, ctx + (c,), depth - 1)
            else:
                nxt = engine.target.next_distribution(ctx + (c,))
                sub = {(int(b),): float(nxt[b]) for b in np.flatnonzero(nxt)}
            for seq, pr in sub.items():
                out[(c,) + seq] += q[c] * a * pr
        reject += q[c] * (1 - a)
    if reject > 0:
        r = np.maximum(0.0, p - q)
        r /= r.sum()
        for b in np.flatnonzero(r):
            out[(int(b),)] += reject * float(r[b])
    return out


def exact_generation_distribution(engine, prompt: Sequence[int], L: int) -> ExactSequenceDistribution:
    """Exact law of the first ``L`` tokens an engine emits, by enumerating cycles."""
    v = engine.target.vocab_size
    if v**L > ENUMERATION_LIMIT:
        raise EnumerationGuardError(f"V^L = {v}^{L} exceeds the enumeration bound {ENUMERATION_LIMIT}")
    cfg = engine.cfg
    memo: dict = {}

    def cycle_law(ctx: tuple[int, ...]) -> dict[tuple[int, ...], float]:
        if cfg.mode == "vanilla":
            p = engine.target.next_distribution(ctx)
            if engine.greedy:
                return {(int(np.argmax(p)),): 1.0}
            return {(int(t),): float(p[t]) for t in np.flatnonzero(p)}
        if cfg.mode == "chain_sps" and not engine.greedy:
            return _sampled_chain_cycle(engine, ctx, min(cfg.depth, cfg.m))
        prepared = engine._prepare(list(ctx), None)
        verifier = prepared.verifier
        if engine.greedy:
            return {tuple(verifier.run_greedy().emitted): 1.0}
        root = verifier.p[0]
        return exact_cycle_distribution(root, verifier.p[1:], prepared.draft)

    def law(ctx: tuple[int, ...], remaining: int) -> dict[tuple[int, ...], float]:
        key = (ctx[-engine._window:] if engine._window else () if engine._window == 0 else ctx, remaining)
        if key in memo:
            return memo[key]
        out: dict[tuple[int, ...], float] = defaultdict(float)
        for block, pr in cycle_law(ctx).items():
            head = block[:remaining]
            if len(head) == remaining:
                out[head] += pr
            else:
                for tail, pr2 in law(ctx + block, remaining - len(block)).items():
                    out[head + tail] += pr * pr2
        memo[key] = dict(out)
        return memo[key]

    return ExactSequenceDistribution(L, law(tuple(prompt), L) if L > 0 else {(): 1.0})


# ---------------------------------------------------------------------------
# statistical comparison


@dataclass
class EquivalenceVerdict:
    statistic: float
    p_value: float
    tv_distance: float
    n_samples: int
    alpha: float
    dof: int

    @property
    def passed(self) -> bool:
        return self.p_value > self.alpha

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "tv_distance": self.tv_distance,
            "n_samples": self.n_samples,
            "alpha": self.alpha,
            "dof": self.dof,
            "pass": self.passed,
        }


def chi_square_equivalence(observed: Mapping[tuple[int, ...], int], expected: ExactSequenceDistribution,
                           alpha: float = 0.01, min_expected: float = 5.0) -> EquivalenceVerdict:
    """Pearson goodness-of-fit of observed sequence counts against an exact law.

    Cells whose expected count falls below ``min_expected`` are pooled into a
    single remainder cell; if the remainder is itself too small it is folded
    into the smallest regular cell.
    """
    n = int(sum(observed.values()))
    if n <= 0:
        raise InsufficientSamplesError("no samples", required_n=1)
    exp_probs = {k: v for k, v in expected.probs.items() if v > 0}
    tv = 0.5 * sum(abs(observed.get(k, 0) / n - exp_probs.get(k, 0.0)) for k in set(observed) | set(exp_probs))
    impossible = sum(c for k, c in observed.items() if k not in exp_probs)
    if impossible:
        return EquivalenceVerdict(math.inf, 0.0, tv, n, alpha, 0)
    if len(exp_probs) == 1:
        return EquivalenceVerdict(0.0, 1.0, tv, n, alpha, 0)

    ranked = sorted(exp_probs.items(), key=lambda kv: -kv[1])
    cells = [[k] for k, pr in ranked if n * pr >= min_expected]
    rest = [k for k, pr in ranked if n * pr < min_expected]
    if rest:
        rest_mass = sum(exp_probs[k] for k in rest)
        if n * rest_mass >= min_expected:
            cells.append(rest)
        elif cells:
            cells[-1].extend(rest)
        else:
            cells.append(rest)
    if len(cells) < 2:
        top = ranked[0][1]
        need = math.ceil(min_expected / min(top, 1.0 - top))
        raise InsufficientSamplesError(f"{n} samples give fewer than two valid cells; need about {need}", need)
    obs = np.array([sum(observed.get(k, 0) for k in cell) for cell in cells], dtype=float)
    exp = np.array([n * sum(exp_probs[k] for k in cell) for cell in cells])
    exp *= n / exp.sum()
    statistic = float(((obs - exp) ** 2 / exp).sum())
    dof = len(cells) - 1
    return EquivalenceVerdict(statistic, float(stats.chi2.sf(statistic, dof)), tv, n, alpha, dof)


# ---------------------------------------------------------------------------
# exhaustive small-tree suite


def ordered_forests(n: int):
    """Every ordered forest with ``n`` nodes, as nested child lists."""
    if n == 0:
        yield []
        return
    for first in range(1, n + 1):
        for sub in ordered_forests(first - 1):
            for rest in ordered_forests(n - first):
                yield [sub] + rest


def forest_parents(forest) -> list[int]:
    """Breadth-first parent positions of a forest hung under ROOT."""
    parents: list[int] = []
    queue = [(ROOT, forest)]
    while queue:
        nxt = []
        for par, kids in queue:
            for sub in kids:
                parents.append(par)
                nxt.append((len(parents) - 1, sub))
        queue = nxt
    return parents


def tree_shapes(max_nodes: int = MAX_TREE_NODES):
    for n in range(1, max_nodes + 1):
        for forest in ordered_forests(n):
            yield forest_parents(forest)


def random_flat_draft(parents: Sequence[int], vocab_size: int, rng: np.random.Generator, sampled: bool):
    """Label a tree shape with tokens and random distributions.

    Returns ``(root_dist, target_dists, draft)`` or None when some node has
    more children than the vocabulary allows.
    """
    m = len(parents)
    n_kids: dict[int, int] = defaultdict(int)
    for par in parents:
        n_kids[par] += 1
    if max(n_kids.values()) > vocab_size:
        return None

    def dist():
        d = rng.dirichlet(np.full(vocab_size, 0.7))
        if rng.random() < 0.3:
            d[rng.integers(vocab_size)] = 0.0
            if d.sum() == 0:
                d[0] = 1.0
        return d / d.sum()

    p_root = dist()
    p = [dist() for _ in range(m)]
    # sampled siblings need full support to be drawable without replacement
    q_at = {node: rng.dirichlet(np.ones(vocab_size)) if sampled else dist() for node in [ROOT, *range(m)]}
    tokens = [0] * m
    for par in set(parents):
        kids = [i for i in range(m) if parents[i] == par]
        q = q_at[par]
        if sampled:
            support = np.flatnonzero(q)
            labels = rng.choice(support, size=len(kids), replace=False, p=q[support] / q[support].sum())
        else:
            labels = rng.choice(vocab_size, size=len(kids), replace=False)
        for i, t in zip(kids, labels):
            tokens[i] = int(t)
    conf = [float(q_at[parents[i]][tokens[i]]) for i in range(m)]
    values: list[float] = []
    for i in range(m):
        values.append(conf[i] * (1.0 if parents[i] == ROOT else values[parents[i]]))
    depths: list[int] = []
    for i in range(m):
        depths.append(1 if parents[i] == ROOT else depths[parents[i]] + 1)
    draft = FlatDraft(
        tokens=tokens,
        parents=list(parents),
        draft_dists=[q_at[parents[i]] for i in range(m)],
        confidences=conf,
        values=values,
        depths=depths,
        ranks=[1] * m,
        mask=ancestor_mask(parents),
        sampled=sampled,
    )
    return p_root, p, draft


def tree_marginal_suite(max_nodes: int = MAX_TREE_NODES, vocab_sizes=(2, 3, 4), seed: int = 0,
                        sampled_modes=(False, True)) -> dict:
    """Run the exact marginal check over every tree shape up to ``max_nodes`` drafted tokens."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for parents in tree_shapes(max_nodes):
        for v in vocab_sizes:
            for sampled in sampled_modes:
                case = random_flat_draft(parents, v, rng, sampled)
                if case is None:
                    continue
                root, dists, draft = case
                laws = exact_tree_verification_marginal(root, dists, draft)
                for law, p in zip(laws, [root] + dists):
                    worst = max(worst, float(np.max(np.abs(law - p / p.sum()))))
                cases += 1
    return {"cases": cases, "max_abs_deviation": worst}
