"""Command-line entry point: generate, bench, ablate, certify, calibrate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from collections import Counter
from pathlib import Path

import numpy as np
from scipy import stats

from .engine import MODES, EngineConfig, SpeculativeEngine, greedy_decode
from .metrics import CostModel, average_acceptance_length, build_report
from .models import (
    DerivedDraftModel,
    Distortion,
    InvalidInputError,
    ModelFormatError,
    load_model,
    random_model,
    sample_prompts,
    save_model,
)
from .oracle import (
    EnumerationGuardError,
    InsufficientSamplesError,
    chi_square_equivalence,
    exact_autoregressive,
    tree_marginal_suite,
)
from .verify import RandomStream

SCHEMA_VERSION = "1.0"
ABLATION_MODES = ("eagle2", "no_rerank", "no_value", "no_both")
# (better, worse) pairs whose ordering the ablation reports
ABLATION_PAIRS = (("eagle2", "no_rerank"), ("no_rerank", "no_both"), ("eagle2", "no_value"), ("no_value", "no_both"))

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CERT = 0, 1, 2, 3

log = logging.getLogger("specdraft")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def stream_for(seed: int, index: int) -> RandomStream:
    return RandomStream(np.random.default_rng(np.random.SeedSequence([seed, index])))


# ---------------------------------------------------------------------------
# shared plumbing


def load_models(args):
    target = load_model(args.target)
    base = load_model(args.draft) if args.draft else target
    try:
        distortion = Distortion.parse(args.distortion)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    draft = DerivedDraftModel(base, distortion)
    return target, draft


def load_prompts(args, target) -> list[tuple[int, ...]]:
    if args.prompts:
        prompts = []
        for lineno, line in enumerate(Path(args.prompts).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                prompts.append(tuple(int(t) for t in line.split()))
            except ValueError as exc:
                raise InvalidInputError(f"{args.prompts}:{lineno}: prompt is not a list of integers") from exc
        if args.n_prompts:
            prompts = prompts[: args.n_prompts]
        if not prompts:
            raise InvalidInputError(f"{args.prompts}: no prompts")
        return prompts
    return sample_prompts(target, args.n_prompts or 1, target.order + 2, args.seed)


def make_config(args, mode=None, **overrides) -> EngineConfig:
    if (mode or args.mode) not in MODES:
        raise UsageError(f"unknown mode {mode or args.mode!r}; choose from {', '.join(MODES)}")
    shape = tuple(int(w) for w in args.static_shape.split(",")) if args.static_shape else None
    fields = dict(
        mode=mode or args.mode,
        depth=args.depth,
        k=args.k,
        branch=args.branch,
        m=args.m,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        seed=args.seed,
        static_shape=shape,
        inject_bias=args.inject_bias,
    )
    fields.update(overrides)
    return EngineConfig(**fields)


def cost_model(args) -> CostModel:
    return CostModel(draft_step_cost=args.draft_cost, per_token_overhead=args.overhead)


def run_prompts(target, draft, cfg: EngineConfig, prompts):
    """One trace per prompt; prompt i always gets the same random stream."""
    engine = SpeculativeEngine(target, draft, cfg)
    return [engine.generate(p, stream_for(cfg.seed, i)) for i, p in enumerate(prompts)]


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def document(command: str, args, results, config: EngineConfig | None = None, prompts=None) -> dict:
    inputs = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "report", "verbose", "csv")}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "rng_seed": args.seed,
        "arguments": inputs,
        "config": config.to_dict() if config else None,
        "prompts": [list(p) for p in prompts] if prompts is not None else None,
        "results": results,
    }
    return _clean(doc)


def write_report(args, doc: dict) -> None:
    if args.report:
        Path(args.report).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    target, draft = load_models(args)
    prompts = load_prompts(args, target)
    cfg = make_config(args)
    trace = SpeculativeEngine(target, draft, cfg).generate(prompts[0], stream_for(cfg.seed, 0))
    print(" ".join(str(t) for t in trace.emitted))
    results = trace.to_dict(dump_tree=args.dump_tree)
    if trace.cycles:
        results["tau"] = average_acceptance_length([trace])
    write_report(args, document("generate", args, results, cfg, prompts[:1]))
    return EXIT_OK


def bench(target, draft, prompts, args, modes) -> dict:
    out = {}
    for mode in modes:
        cfg = make_config(args, mode)
        traces = run_prompts(target, draft, cfg, prompts)
        report = build_report(traces, cfg, cost_model(args), args.bins).to_dict()
        report["per_prompt_tau"] = [average_acceptance_length([t]) for t in traces]
        out[mode] = report
    return out


def _modes(args) -> list[str]:
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if not modes or bad:
        raise UsageError(f"unknown mode(s) {bad}; choose from {', '.join(MODES)}")
    return modes


def cmd_bench(args) -> int:
    target, draft = load_models(args)
    prompts = load_prompts(args, target)
    modes = _modes(args)
    results = bench(target, draft, prompts, args, modes)
    for mode, r in results.items():
        log.info("%-10s tau=%.3f speedup_estimate=%.3f", mode, r["tau"], r["speedup_estimate"])
    write_report(args, document("bench", args, {"modes": results}, make_config(args, modes[0]), prompts))
    return EXIT_OK


def paired_comparison(better, worse) -> dict:
    """One-sided Wilcoxon signed-rank test that ``better`` exceeds ``worse`` per prompt."""
    diff = np.asarray(better) - np.asarray(worse)
    if len(diff) < 2 or not np.any(diff):
        p = 1.0 if not np.any(diff > 0) else math.nan
    else:
        p = float(stats.wilcoxon(diff, alternative="greater").pvalue)
    return {"mean_difference": float(diff.mean()), "p_value": p}


def ablation(target, draft, prompts, args) -> dict:
    runs = bench(target, draft, prompts, args, ABLATION_MODES)
    table = {mode: runs[mode]["tau"] for mode in ABLATION_MODES}
    pairs = []
    for a, b in ABLATION_PAIRS:
        cmp = paired_comparison(runs[a]["per_prompt_tau"], runs[b]["per_prompt_tau"])
        pairs.append({"better": a, "worse": b, **cmp, "holds": table[a] >= table[b]})
    return {"tau": table, "pairs": pairs, "n_prompts": len(prompts), "single_prompt": len(prompts) == 1,
            "runs": runs}


def cmd_ablate(args) -> int:
    target, draft = load_models(args)
    prompts = load_prompts(args, target)
    results = ablation(target, draft, prompts, args)
    for mode, tau in results["tau"].items():
        log.info("%-10s tau=%.3f", mode, tau)
    write_report(args, document("ablate", args, results, make_config(args, "eagle2"), prompts))
    return EXIT_OK


def certify(target, draft, prompt, cfg: EngineConfig, n_samples: int, alpha: float, suite: bool = True) -> dict:
    """Monte Carlo certification of one engine configuration against exact sampling.

    ``cfg.max_tokens`` is the horizon L.  At temperature 0 the check is exact
    token equality with greedy decoding instead.
    """
    L = cfg.max_tokens
    engine = SpeculativeEngine(target, draft, cfg)
    if cfg.temperature == 0:
        got = engine.generate(prompt).emitted
        want = greedy_decode(target, prompt, L)
        return {"kind": "exact", "pass": got == want, "emitted": got, "expected": want}
    expected = exact_autoregressive(target, prompt, L, cfg.temperature)
    stream = RandomStream(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])))
    counts = Counter(tuple(engine.generate(prompt, stream).emitted) for _ in range(n_samples))
    verdict = chi_square_equivalence(counts, expected, alpha)
    out = {"kind": "chi_square", "verdict": verdict.to_dict(), "pass": verdict.passed}
    if suite:
        s = tree_marginal_suite(max_nodes=5, seed=cfg.seed)
        s["pass"] = s["max_abs_deviation"] < 1e-9
        out["tree_marginal_suite"] = s
        out["pass"] = out["pass"] and s["pass"]
    return out


def cmd_certify(args) -> int:
    target, draft = load_models(args)
    prompts = load_prompts(args, target)
    cfg = make_config(args, max_tokens=args.max_tokens)
    results = [certify(target, draft, p, cfg, args.n_samples, args.alpha, suite=(i == 0))
               for i, p in enumerate(prompts)]
    passed = all(r["pass"] for r in results)
    for p, r in zip(prompts, results):
        detail = r["verdict"]["p_value"] if r["kind"] == "chi_square" else "exact"
        log.info("prompt %s: %s (%s)", list(p), "pass" if r["pass"] else "FAIL", detail)
    write_report(args, document("certify", args, {"pass": passed, "per_prompt": results}, cfg, prompts))
    print("PASS" if passed else "FAIL")
    return EXIT_OK if passed else EXIT_CERT


def calibration(target, draft, prompts, args) -> dict:
    cfg = make_config(args)
    traces = run_prompts(target, draft, cfg, prompts)
    report = build_report(traces, cfg, cost_model(args), args.bins).to_dict()
    bins = report["calibration_bins"]
    rated = [b for b in bins if b["count"]]
    rho = None
    if len(rated) >= 2 and len({b["acc_rate"] for b in rated}) > 1:
        rho = float(stats.spearmanr(range(len(rated)), [b["acc_rate"] for b in rated]).statistic)
    return {
        "calibration_bins": bins,
        "spearman_bin_vs_rate": rho,
        "tested_tokens": sum(b["count"] for b in bins),
        "positional_acceptance": report["positional_acceptance"],
        "tau": report["tau"],
    }


def cmd_calibrate(args) -> int:
    target, draft = load_models(args)
    prompts = load_prompts(args, target)
    results = calibration(target, draft, prompts, args)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "mean_conf", "acc_rate", "count"])
            for b in results["calibration_bins"]:
                w.writerow([b["bin_lo"], b["bin_hi"],
                            "" if b["mean_conf"] is None else b["mean_conf"],
                            "" if b["acc_rate"] is None else b["acc_rate"], b["count"]])
    for b in results["calibration_bins"]:
        log.info("[%.2f, %.2f) n=%d rate=%s", b["bin_lo"], b["bin_hi"], b["count"], b["acc_rate"])
    write_report(args, document("calibrate", args, results, make_config(args), prompts))
    return EXIT_OK


def cmd_make_model(args) -> int:
    model = random_model(args.vocab_size, args.order, args.seed, args.concentration)
    save_model(model, args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specdraft", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, mode="eagle2", max_tokens=32, temperature=0.0):
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.add_argument("--target", required=True, help="target model file")
        p.add_argument("--draft", help="base model for the draft (default: the target)")
        p.add_argument("--distortion", default="none", help="none | temperature:G | mix:L | swap_mass:E")
        p.add_argument("--mode", default=mode)
        p.add_argument("--depth", type=int, default=6)
        p.add_argument("--k", type=int, default=10)
        p.add_argument("--branch", type=int, default=10)
        p.add_argument("--m", type=int, default=60)
        p.add_argument("--static-shape", help="comma-separated layer widths for no_both")
        p.add_argument("--temperature", type=float, default=temperature)
        p.add_argument("--max-tokens", type=int, default=max_tokens)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--prompts", help="file with one prompt per line, tokens separated by spaces")
        p.add_argument("--n-prompts", type=int, default=None)
        p.add_argument("--report", help="write the JSON report here")
        p.add_argument("--bins", type=int, default=10)
        p.add_argument("--draft-cost", type=float, default=0.05)
        p.add_argument("--overhead", type=float, default=0.0)
        p.add_argument("--inject-bias", type=float, default=0.0, help=argparse.SUPPRESS)
        return p

    p = common(sub.add_parser("generate", help="run the engine once and print the tokens"))
    p.add_argument("--dump-tree", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("bench", help="tau and cost-model speedup per mode"), mode="eagle2,chain_sps,vanilla")
    p.set_defaults(func=cmd_bench)

    p = common(sub.add_parser("ablate", help="value / reranking ablation table"))
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("certify", help="check losslessness against exact sampling"),
               max_tokens=3, temperature=1.0)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--n-samples", type=int, default=200_000)
    p.set_defaults(func=cmd_certify)

    p = common(sub.add_parser("calibrate", help="confidence bins and positional acceptance"),
               max_tokens=64, temperature=1.0)
    p.add_argument("--csv", help="write bin_lo,bin_hi,mean_conf,acc_rate,count rows here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("make-model", help="write a random tabular model file")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_make_model)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"specdraft: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelFormatError, InvalidInputError, EnumerationGuardError, InsufficientSamplesError, OSError) as exc:
        print(f"specdraft: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
