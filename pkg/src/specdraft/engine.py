"""Draft-then-verify generation loop with ablation modes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tree as tr
from .models import InvalidInputError, apply_temperature, argmax_token, check_context
from .tree import FlatDraft
from .verify import RandomStream, TreeVerifier, VerificationOutcome

MODES = ("eagle2", "no_value", "no_rerank", "no_both", "chain_sps", "vanilla")
TREE_MODES = MODES[:5]


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "eagle2"
    depth: int = 6
    k: int = 10
    branch: int = 10
    m: int = 60
    temperature: float = 0.0
    max_tokens: int = 32
    seed: int = 0
    # layer widths for no_both; None means the breadth-first prefix of m nodes
    static_shape: tuple[int, ...] | None = None
    inject_bias: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.depth < 1 or self.k < 1 or self.branch < 1 or self.m < 1:
            raise InvalidInputError("depth, k, branch and m must all be at least 1")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be non-negative")
        if self.max_tokens < 0:
            raise InvalidInputError("max_tokens must be non-negative")
        if self.static_shape is not None:
            object.__setattr__(self, "static_shape", tuple(int(w) for w in self.static_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["static_shape"] = list(self.static_shape) if self.static_shape is not None else None
        return d


@dataclass
class Cycle:
    draft: FlatDraft
    outcome: VerificationOutcome

    @property
    def cycle_length(self) -> int:
        return self.outcome.cycle_length


@dataclass
class GenerationTrace:
    prompt: tuple[int, ...]
    emitted: list[int]
    cycles: list[Cycle]
    config: EngineConfig

    def to_dict(self, dump_tree: bool = False) -> dict:
        d = {
            "prompt": list(self.prompt),
            "emitted": list(self.emitted),
            "cycle_lengths": [c.cycle_length for c in self.cycles],
        }
        if dump_tree:
            d["cycles"] = [
                {
                    "draft": c.draft.to_dict(),
                    "accepted": list(c.outcome.accepted),
                    "accepted_positions": list(c.outcome.accepted_positions),
                    "bonus": c.outcome.bonus,
                }
                for c in self.cycles
            ]
        return d


class TemperedModel:
    """View of a model whose rows are passed through a sampling temperature."""

    def __init__(self, model, temperature: float):
        self.model = model
        self.temperature = temperature
        self.vocab_size = model.vocab_size
        self.order = getattr(model, "order", None)
        self._memo: dict = {}

    def next_distribution(self, ctx):
        key = tuple(ctx[-self.order:]) if self.order else (() if self.order == 0 else tuple(ctx))
        out = self._memo.get(key)
        if out is None:
            out = self.model.next_distribution(ctx)
            if self.temperature != 1:
                out = apply_temperature(out, self.temperature)
            self._memo[key] = out
        return out


def compute_masked_target_dists(target, ctx: Sequence[int], draft: FlatDraft) -> list[np.ndarray]:
    """Target distribution after every flat position, seeing only its ancestors."""
    ctx = tuple(ctx)
    paths: list[tuple[int, ...]] = []
    for i, par in enumerate(draft.parents):
        prefix = () if par == tr.ROOT else paths[par]
        paths.append(prefix + (draft.tokens[i],))
    return [target.next_distribution(ctx + path) for path in paths]


class _Prepared:
    __slots__ = ("draft", "verifier")

    def __init__(self, draft, verifier):
        self.draft = draft
        self.verifier = verifier


class SpeculativeEngine:
    def __init__(self, target, draft_model, cfg: EngineConfig):
        if draft_model is None:
            draft_model = target
        if target.vocab_size != draft_model.vocab_size:
            raise InvalidInputError(
                f"target vocabulary {target.vocab_size} differs from draft vocabulary {draft_model.vocab_size}"
            )
        self.cfg = cfg
        self.target_model = target
        self.draft_model = draft_model
        t = cfg.temperature
        self.target = TemperedModel(target, t if t > 0 else 1.0)
        self.draft = TemperedModel(draft_model, t if t > 0 else 1.0)
        orders = [getattr(target, "order", None), getattr(draft_model, "order", None)]
        self._window = None if None in orders else max(orders)
        self._cache: dict = {}

    @property
    def greedy(self) -> bool:
        return self.cfg.temperature == 0

    def build_draft(self, ctx: Sequence[int], stream: RandomStream | None = None) -> FlatDraft:
        cfg, draft = self.cfg, self.draft
        if cfg.mode == "eagle2":
            return tr.rerank_and_flatten(tr.build_tree(ctx, draft, cfg.depth, cfg.k, cfg.branch), cfg.m)
        if cfg.mode == "no_value":
            tree = tr.build_tree(ctx, draft, cfg.depth, cfg.k, cfg.branch, by="confidence")
            return tr.flatten(tree, tr.rerank(tree, cfg.m))
        if cfg.mode == "no_rerank":
            tree = tr.build_tree(ctx, draft, cfg.depth, cfg.k, cfg.branch)
            return tr.flatten(tree, tr.expansion_selection(tree, cfg.m, cfg.k))
        if cfg.mode == "no_both":
            shape = cfg.static_shape or (cfg.m,) * cfg.depth
            return tr.static_tree(ctx, draft, shape, cfg.branch, budget=cfg.m)
        if cfg.mode == "chain_sps":
            sample = None if stream is None else stream.choice
            return tr.chain_draft(ctx, draft, min(cfg.depth, cfg.m), sample)
        raise InvalidInputError(f"mode {cfg.mode!r} does not draft")

    def _prepare(self, ctx: list[int], stream) -> _Prepared:
        sampled = self.cfg.mode == "chain_sps" and not self.greedy
        key = None
        if not sampled and self._window is not None:
            key = tuple(ctx[-self._window:]) if self._window else ()
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        draft = self.build_draft(ctx, stream if sampled else None)
        dists = compute_masked_target_dists(self.target, ctx, draft)
        prepared = _Prepared(draft, TreeVerifier(self.target.next_distribution(ctx), dists, draft,
                                                 self.cfg.inject_bias))
        if key is not None:
            self._cache[key] = prepared
        return prepared

    def step(self, ctx: list[int], stream: RandomStream) -> Cycle:
        if self.cfg.mode == "vanilla":
            p = self.target.next_distribution(ctx)
            tok = argmax_token(p) if self.greedy else stream.choice(p)
            return Cycle(tr.empty_draft(), VerificationOutcome([], tok, [], []))
        prepared = self._prepare(ctx, stream)
        outcome = prepared.verifier.run_greedy() if self.greedy else prepared.verifier.run(stream)
        return Cycle(prepared.draft, outcome)

    def generate(self, prompt: Sequence[int], rng=None, max_tokens: int | None = None) -> GenerationTrace:
        """Emit up to ``max_tokens`` tokens after ``prompt``.

        ``rng`` may be a :class:`RandomStream`, a numpy generator or a seed;
        by default the config seed is used.
        """
        check_context(prompt, self.target.vocab_size)
        limit = self.cfg.max_tokens if max_tokens is None else max_tokens
        stream = rng if isinstance(rng, RandomStream) else RandomStream(self.cfg.seed if rng is None else rng)
        ctx = [int(t) for t in prompt]
        emitted: list[int] = []
        cycles: list[Cycle] = []
        while len(emitted) < limit:
            cycle = self.step(ctx, stream)
            cycles.append(cycle)
            toks = cycle.outcome.emitted
            emitted.extend(toks[: limit - len(emitted)])
            ctx.extend(toks)
        return GenerationTrace(tuple(prompt), emitted, cycles, self.cfg)


def generate(target, draft_model, prompt: Sequence[int], cfg: EngineConfig) -> GenerationTrace:
    return SpeculativeEngine(target, draft_model, cfg).generate(prompt)


def greedy_decode(target, prompt: Sequence[int], n: int) -> list[int]:
    """Plain argmax decoding, used as the reference for temperature 0."""
    ctx = list(prompt)
    out = []
    for _ in range(n):
        t = argmax_token(target.next_distribution(ctx))
        out.append(t)
        ctx.append(t)
    return out
