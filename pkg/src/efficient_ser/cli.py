"""Command-line entry point: ``efficient-ser <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .cache import CacheError, build_cache, prefix_fingerprint
from .checkpoint import CheckpointError, canonical_json, load_checkpoint
from .data import CorpusSpec, DataError, Manifest, generate_synthetic_corpus
from .harness import (
    ReportError,
    RunConfig,
    RunConfigError,
    RunResult,
    bench_report,
    evaluate,
    params_report,
    run_seeds,
    train,
    write_report,
)
from .model import PRESETS, ConfigError, FreezePlan, apply_freeze_plan
from .stats import StatsError, ttest_pairwise_bonferroni

OUT_ENV = "EFFICIENT_SER_OUT"
BENCH_PLANS = "full,partial3,partial2,partial1,lora,cache3,cache2,cache1"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(body: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise RunConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = body
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = parse_value(raw)
    return body


def load_config(args) -> RunConfig:
    body: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise RunConfigError(f"config file {path} does not exist")
        body = json.loads(path.read_text(encoding="utf-8"))
    body = apply_overrides(body, getattr(args, "set", None) or [])
    body.setdefault("out_root", str(out_root()))
    if getattr(args, "seed", None) is not None:
        body["seeds"] = [args.seed]
    return RunConfig.from_dict(body)


def echo(obj: Any) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_corpus(args) -> int:
    body = json.loads(Path(args.config).read_text()) if args.config else {}
    corpus = apply_overrides(body.get("corpus", {}) if "corpus" in body else body, args.set or [])
    spec = CorpusSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in corpus.items()})
    out = Path(args.out)
    manifest = generate_synthetic_corpus(out, spec, seed=args.seed)
    (out / "corpus_config.json").write_text(canonical_json({"corpus": corpus, "seed": args.seed}) + "\n")
    echo({"manifest": str(out / "manifest.jsonl"), "samples": len(manifest.records)})
    return 0


def cmd_build_cache(args) -> int:
    if not args.checkpoint:
        raise RunConfigError("missing model: build-cache needs --checkpoint (a saved model to cache from)")
    if not Path(args.checkpoint).exists():
        raise RunConfigError(f"missing model: checkpoint {args.checkpoint} does not exist")
    if not args.data:
        raise RunConfigError("build-cache needs --data pointing at a manifest.jsonl")
    model, _, _ = load_checkpoint(args.checkpoint)
    n_layers = model.config.n_layers
    if not 0 < args.split_layer < n_layers:
        raise RunConfigError(f"split layer must lie in [1, {n_layers - 1}], got {args.split_layer}")
    apply_freeze_plan(model, FreezePlan("caching_partial", n_layers - args.split_layer))
    fingerprint = prefix_fingerprint(model, args.split_layer)
    out = Path(args.out) if args.out else out_root() / "cache" / f"{fingerprint[:16]}-L{args.split_layer}"
    manifest = build_cache(Manifest.load(args.data), model, args.split_layer, out, workers=args.workers)
    echo({"cache": str(out), "entries": len(manifest.entries), "bytes": manifest.total_bytes,
          "fingerprint": fingerprint})
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    if not config.data:
        raise RunConfigError("train needs a corpus: set data=<manifest.jsonl>")
    print(canonical_json(config.to_dict()), file=sys.stderr)
    if len(config.seeds) == 1:
        seed = config.seeds[0]
        result = train(config, seed)
        echo({"run_dir": str(config.run_dir(seed)), **result.__dict__})
    else:
        result = run_seeds(config, workers=args.workers)
        echo({"summary": str(config.summary_dir() / "summary.json"), **result.to_dict().get("aggregate", {})})
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise RunConfigError(f"missing model: checkpoint {args.checkpoint} does not exist")
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = Manifest.load(args.data)
    act, val = evaluate(model, manifest, args.split, args.batch_size)
    echo({"split": args.split, "activation_ccc": act, "valence_ccc": val})
    return 0


def cmd_bench(args) -> int:
    plans = [p for p in args.plans.split(",") if p]
    out = Path(args.out) if args.out else out_root() / f"bench-{args.preset}"
    if args.preset not in PRESETS:
        raise RunConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    if args.params_only:
        report = params_report(PRESETS[args.preset], plans)
    else:
        base = load_config(args)
        body = base.to_dict()
        body["model"] = PRESETS[args.preset].to_dict()
        results = []
        for plan_name in plans:
            plan = FreezePlan.parse(plan_name)
            run_body = {**body, "name": plan_name, "freeze": {"mode": plan.mode, "n": plan.n},
                        "cached": plan.mode == "caching_partial"}
            results.append(run_seeds(RunConfig.from_dict(run_body), workers=args.workers)
                           if len(base.seeds) > 1 else _single_seed(RunConfig.from_dict(run_body)))
        report = bench_report(results, args.baseline or plans[0])
    paths = write_report(report, out, figures=not args.no_figures)
    sys.stdout.write(report.table())
    echo({k: str(v) for k, v in paths.items()})
    return 0


def _single_seed(config: RunConfig) -> RunResult:
    result = RunResult(config.name, config.freeze.label, config.precision, config.to_dict())
    result.seeds.append(train(config, config.seeds[0]))
    return result


def find_summary(name: str) -> RunResult:
    path = Path(name)
    if path.is_file():
        return RunResult.from_dict(json.loads(path.read_text()))
    matches = sorted(out_root().glob(f"{name}-*/summary.json"))
    matches = [m for m in matches if json.loads(m.read_text())["name"] == name]
    if not matches:
        raise RunConfigError(f"no run summary named {name!r} under {out_root()}")
    if len(matches) > 1:
        raise RunConfigError(f"run name {name!r} is ambiguous: {[str(m) for m in matches]}")
    return RunResult.from_dict(json.loads(matches[0].read_text()))


def cmd_compare(args) -> int:
    baseline = find_summary(args.baseline)
    others = [find_summary(n) for n in args.against]
    groups = {baseline.name: baseline}
    groups.update({r.name: r for r in others})
    pairs = [(baseline.name, r.name) for r in others]
    reports = {}
    for metric in args.metrics.split(","):
        values = {name: res.values(metric) for name, res in groups.items()}
        report = ttest_pairwise_bonferroni(values, pairs, comparisons=args.bonferroni, paired=args.paired,
                                           metric=metric)
        reports[metric] = report.to_dict()
    echo(reports)
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="efficient-ser", description="Efficient finetuning experiments for speech emotion regression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="canonical JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    common(p, seed=False)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-cache", help="cache frozen-prefix representations")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split-layer", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("train", help="train one seed or every configured seed")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="emit a parameter, timing and CCC table")
    common(p)
    p.add_argument("--preset", default="desk")
    p.add_argument("--plans", default=BENCH_PLANS)
    p.add_argument("--params-only", action="store_true")
    p.add_argument("--baseline")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="t-test runs against a baseline")
    p.add_argument("--baseline", required=True)
    p.add_argument("--against", action="append", required=True)
    p.add_argument("--bonferroni", type=int, default=1, metavar="M", help="number of comparisons to correct for")
    p.add_argument("--metrics", default="test_activation,test_valence")
    p.add_argument("--paired", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


VALIDATION_ERRORS = (RunConfigError, ConfigError, DataError, CheckpointError, StatsError, ReportError,
                     FileNotFoundError, json.JSONDecodeError, TypeError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
