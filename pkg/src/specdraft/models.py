"""Exact tabular language models used as target and draft.

A :class:`TabularModel` is an order-N Markov chain over a finite vocabulary:
the next-token distribution depends only on the last ``order`` tokens of the
context, with a mandatory fallback row for windows missing from the table.
:class:`DerivedDraftModel` wraps a base model and distorts its rows so that
draft quality and calibration can be dialed in.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SUM_TOL = 1e-9
FILE_SUM_TOL = 1e-6


class InvalidInputError(ValueError):
    """Raised when a context or distribution violates an operation's contract."""


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed or fails validation."""


def context_key(tokens: Sequence[int]) -> str:
    return ",".join(str(int(t)) for t in tokens)


def _frozen(probs) -> np.ndarray:
    arr = np.array(probs, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def check_distribution(probs: np.ndarray, vocab_size: int | None = None, tol: float = SUM_TOL) -> None:
    if probs.ndim != 1:
        raise InvalidInputError("distribution must be one-dimensional")
    if vocab_size is not None and probs.shape[0] != vocab_size:
        raise InvalidInputError(f"distribution has {probs.shape[0]} entries, expected {vocab_size}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise InvalidInputError("distribution has negative or non-finite entries")
    if abs(float(probs.sum()) - 1.0) > tol:
        raise InvalidInputError(f"distribution sums to {float(probs.sum())!r}")


def argmax_token(probs) -> int:
    """Index of the largest entry; ties go to the lowest token id."""
    return int(np.argmax(probs))


def apply_temperature(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Sharpen or flatten a distribution; temperature 0 gives the argmax one-hot."""
    if temperature < 0:
        raise InvalidInputError("temperature must be non-negative")
    if temperature == 0:
        out = np.zeros_like(probs)
        out[argmax_token(probs)] = 1.0
        return out
    if temperature == 1:
        return probs
    out = np.zeros_like(probs)
    pos = probs > 0
    logits = np.log(probs[pos]) / temperature
    logits -= logits.max()
    w = np.exp(logits)
    out[pos] = w / w.sum()
    return out


@dataclass(frozen=True)
class TabularModel:
    vocab_size: int
    order: int
    table: Mapping[tuple[int, ...], np.ndarray]
    fallback: np.ndarray

    def __post_init__(self):
        if self.vocab_size < 1:
            raise InvalidInputError("vocab_size must be positive")
        if self.order < 0:
            raise InvalidInputError("order must be non-negative")
        fallback = _frozen(self.fallback)
        check_distribution(fallback, self.vocab_size)
        table = {}
        for key, row in self.table.items():
            key = tuple(int(t) for t in key)
            if len(key) != self.order or any(t < 0 or t >= self.vocab_size for t in key):
                raise InvalidInputError(f"bad context window {key!r} for order {self.order}")
            row = _frozen(row)
            check_distribution(row, self.vocab_size)
            table[key] = row
        object.__setattr__(self, "fallback", fallback)
        object.__setattr__(self, "table", table)

    def window(self, ctx: Sequence[int]) -> tuple[int, ...]:
        if self.order == 0:
            return ()
        return tuple(ctx[-self.order:])

    def next_distribution(self, ctx: Sequence[int]) -> np.ndarray:
        check_context(ctx, self.vocab_size)
        return self.table.get(self.window(ctx), self.fallback)


def check_context(ctx: Sequence[int], vocab_size: int) -> None:
    for t in ctx:
        if not 0 <= t < vocab_size:
            raise InvalidInputError(f"token {t} outside vocabulary of size {vocab_size}")


@dataclass(frozen=True)
class Distortion:
    """How a draft row is derived from its base row.

    kind is one of ``none``, ``temperature``, ``mix`` (blend with uniform,
    weight ``param`` on the uniform part) or ``swap_mass`` (move ``param``
    probability from the top token to the runner-up).
    """

    kind: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.kind == "none":
            return
        if self.kind == "temperature":
            if not self.param > 0:
                raise InvalidInputError("temperature distortion needs gamma > 0")
        elif self.kind == "mix":
            if not 0.0 <= self.param <= 1.0:
                raise InvalidInputError("mix weight must lie in [0, 1]")
        elif self.kind == "swap_mass":
            if not 0.0 <= self.param <= 0.5:
                raise InvalidInputError("swap_mass epsilon must lie in [0, 0.5]")
        else:
            raise InvalidInputError(f"unknown distortion {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Distortion":
        """Parse ``none``, ``temperature:0.5``, ``mix:0.3`` or ``swap_mass:0.1``."""
        name, _, arg = text.strip().partition(":")
        name = {"swap": "swap_mass", "temp": "temperature"}.get(name, name)
        if name == "none":
            return cls()
        if not arg:
            raise InvalidInputError(f"distortion {name!r} needs a parameter")
        return cls(name, float(arg))

    def __str__(self):
        return "none" if self.kind == "none" else f"{self.kind}:{self.param:g}"

    def apply(self, probs: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return probs
        if self.kind == "temperature":
            return apply_temperature(probs, self.param)
        if self.kind == "mix":
            v = probs.shape[0]
            return (1.0 - self.param) * probs + self.param / v
        # swap_mass
        out = np.array(probs, dtype=np.float64)
        if out.shape[0] < 2:
            return out
        order = np.argsort(-out, kind="stable")
        top, second = order[0], order[1]
        moved = min(self.param, out[top])
        out[top] -= moved
        out[second] += moved
        return out


@dataclass(frozen=True)
class DerivedDraftModel:
    base: TabularModel
    distortion: Distortion = field(default_factory=Distortion)

    @property
    def vocab_size(self) -> int:
        return self.base.vocab_size

    @property
    def order(self) -> int:
        return self.base.order

    def window(self, ctx: Sequence[int]) -> tuple[int, ...]:
        return self.base.window(ctx)

    def next_distribution(self, ctx: Sequence[int]) -> np.ndarray:
        out = self.distortion.apply(self.base.next_distribution(ctx))
        if out.flags.writeable:
            out.setflags(write=False)
        return out


def next_distribution(model, ctx: Sequence[int]) -> np.ndarray:
    return model.next_distribution(ctx)


def random_model(vocab_size: int, order: int, seed: int, concentration: float = 1.0) -> TabularModel:
    """Tabular model with every row drawn from a symmetric Dirichlet.

    Rows are filled in lexicographic window order, then the fallback row, so
    the table is a pure function of the arguments.
    """
    if vocab_size < 2:
        raise InvalidInputError("vocab_size must be at least 2")
    if order < 0:
        raise InvalidInputError("order must be non-negative")
    if not concentration > 0:
        raise InvalidInputError("concentration must be positive")
    rng = np.random.default_rng(seed)
    alpha = np.full(vocab_size, float(concentration))

    def draw():
        row = rng.dirichlet(alpha)
        return row / row.sum()

    table = {key: draw() for key in itertools.product(range(vocab_size), repeat=order)}
    return TabularModel(vocab_size, order, table, draw())


def model_to_dict(model: TabularModel) -> dict:
    return {
        "vocab_size": model.vocab_size,
        "order": model.order,
        "fallback": [float(x) for x in model.fallback],
        "rows": {context_key(k): [float(x) for x in row] for k, row in sorted(model.table.items())},
    }


def save_model(model: TabularModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def _parse_row(values, vocab_size: int, where: str) -> np.ndarray:
    if not isinstance(values, list) or len(values) != vocab_size:
        raise ModelFormatError(f"{where}: expected a list of {vocab_size} probabilities")
    try:
        row = np.array([float(x) for x in values], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: non-numeric probability") from exc
    if not np.all(np.isfinite(row)) or np.any(row < 0):
        raise ModelFormatError(f"{where}: negative or non-finite probability")
    total = float(row.sum())
    if abs(total - 1.0) > FILE_SUM_TOL:
        raise ModelFormatError(f"{where}: probabilities sum to {total:.9g}, not 1")
    return row / total


def model_from_dict(doc, source: str = "<model>") -> TabularModel:
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{source}: top level must be an object")
    for name in ("vocab_size", "order", "fallback"):
        if name not in doc:
            raise ModelFormatError(f"{source}: missing field {name!r}")
    v, order = doc["vocab_size"], doc["order"]
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ModelFormatError(f"{source}: vocab_size must be a positive integer")
    if not isinstance(order, int) or isinstance(order, bool) or order < 0:
        raise ModelFormatError(f"{source}: order must be a non-negative integer")
    fallback = _parse_row(doc["fallback"], v, f"{source}: fallback")
    rows = doc.get("rows", {})
    if not isinstance(rows, dict):
        raise ModelFormatError(f"{source}: rows must be an object")
    table = {}
    for key, values in rows.items():
        where = f"{source}: row {key!r}"
        try:
            window = tuple(int(t) for t in key.split(",")) if key != "" else ()
        except ValueError as exc:
            raise ModelFormatError(f"{where}: context key is not a list of integers") from exc
        if len(window) != order:
            raise ModelFormatError(f"{where}: context has {len(window)} tokens, order is {order}")
        if any(t < 0 or t >= v for t in window):
            raise ModelFormatError(f"{where}: token outside vocabulary")
        table[window] = _parse_row(values, v, where)
    return TabularModel(v, order, table, fallback)


def load_model(path) -> TabularModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return model_from_dict(doc, str(path))


def sample_prompts(model, n: int, length: int, seed: int) -> list[tuple[int, ...]]:
    """Prompts drawn by ancestral sampling from ``model`` starting from an empty context."""
    rng = np.random.default_rng(seed)
    prompts = []
    for _ in range(n):
        ctx: list[int] = []
        for _ in range(length):
            p = model.next_distribution(ctx)
            ctx.append(int(rng.choice(len(p), p=p)))
        prompts.append(tuple(ctx))
    return prompts
