"""``relchain`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from relchain import config as cfgio

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _seed_arg(value: str) -> int:
    try:
        seed = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {value!r}") from None
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return seed


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("RELCHAIN_SEED")
    if env:
        try:
            return _seed_arg(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"RELCHAIN_SEED: {exc}") from None
    return None


def _common(p: argparse.ArgumentParser, config: bool = True, out: bool = True, jobs: bool = False) -> None:
    if config:
        p.add_argument("--config", metavar="PATH", help="experiment file (INI: key = value under a section)")
    if out:
        p.add_argument("--out", metavar="DIR", help="directory for everything the command writes")
    p.add_argument("--seed", type=_seed_arg, metavar="U64",
                   help="master seed; falls back to $RELCHAIN_SEED, then to the config value")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="maximum worker processes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relchain", description="Kinship chain reasoning: data, models and checks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a dataset directory",
                       description="Generate train/valid/test splits. The [data] section of --config "
                                   "overrides the chosen preset key by key.")
    _common(p, jobs=True)
    p.add_argument("--preset", default="gen-234", help="starting configuration (default gen-234); one of: "
                   + ", ".join(sorted(_presets())))

    p = sub.add_parser("train", help="train one model",
                       description="Train the model described by the [train] section of --config; "
                                   "writes model.ckpt, train_log.tsv and config.ini under --out.")
    _common(p)
    p.add_argument("--data", metavar="DIR", help="dataset directory (overrides the config's dataset key)")

    p = sub.add_parser("eval", help="evaluate a checkpoint per clause length",
                       description="Score a checkpoint on every test split; prints per-k accuracy and "
                                   "writes eval.json under --out when given.")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="model.ckpt written by train")
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: the one recorded in the checkpoint)")

    p = sub.add_parser("sweep", help="train and evaluate several configs",
                       description="Every section named run.* in --config is one experiment; keys in "
                                   "[defaults] apply to all of them. Writes results.tsv and curves/ under --out.")
    _common(p, jobs=True)
    p.add_argument("--data", metavar="DIR", help="dataset directory for runs that do not set one")

    p = sub.add_parser("oracle", help="resolve a relation chain with the knowledge base",
                       description="Print the relation the chain composes to, or 'none'.")
    p.add_argument("chain", nargs="?", default="", help="comma-separated relations, e.g. father,father")
    p.add_argument("--kb", metavar="PATH", help="rule file (default: the shipped rules)")
    p.add_argument("--seed", type=_seed_arg, metavar="U64", help="accepted for uniformity; unused")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model",
                       description="Compare analytic and central-difference gradients; reports the "
                                   "largest relative error per op and per model variant.")
    p.add_argument("--seed", type=_seed_arg, metavar="U64", help="seed for the random test inputs")
    p.add_argument("--trials", type=int, default=5, metavar="N", help="random cases per op (default 5)")
    p.add_argument("--out", metavar="DIR", help="also write gradcheck.tsv here")
    return parser


def _presets():
    from relchain.story import PRESETS
    return PRESETS


def _need(args, name: str):
    value = getattr(args, name)
    if not value:
        raise UsageError(f"{args.command}: --{name} is required")
    return value


def cmd_gen_data(args) -> int:
    import dataclasses

    from relchain.story import DatasetConfig, generate_dataset, save_dataset

    presets = _presets()
    if args.preset not in presets:
        raise UsageError(f"unknown preset {args.preset!r}")
    out = _need(args, "out")
    base = cfgio.to_mapping(presets[args.preset])
    if args.config:
        sections = cfgio.read_sections(args.config)
        base.update(sections.get("data", {}))
    config = cfgio.from_mapping(DatasetConfig, base, "data config")
    seed = _resolve_seed(args)
    if seed is not None:
        config = dataclasses.replace(config, master_seed=seed)
    split = generate_dataset(config, jobs=max(1, args.jobs))
    save_dataset(split, out)
    print(f"wrote {len(split.train)} train, {len(split.valid)} valid, "
          f"{sum(len(v) for v in split.test.values())} test instances to {out}")
    return EXIT_OK


def _train_config(args, section: str = "train"):
    from relchain.train import TrainConfig

    values = {}
    if args.config:
        sections = cfgio.read_sections(args.config)
        if section not in sections:
            raise cfgio.ConfigError(f"{args.config}: missing [{section}] section")
        values = sections[section]
    if getattr(args, "data", None):
        values = {**values, "dataset": args.data}
    seed = _resolve_seed(args)
    if seed is not None:
        values = {**values, "seed": str(seed)}
    return cfgio.from_mapping(TrainConfig, values, f"[{section}]")


def cmd_train(args) -> int:
    from relchain.train import train

    out = _need(args, "out")
    config = _train_config(args)
    if not config.dataset:
        raise UsageError("train: no dataset (set dataset in the config or pass --data)")
    print("epoch\ttrain_loss\tval_loss\tval_acc")
    result = train(config, out_dir=out, on_epoch=lambda rec: print(rec.line(), flush=True))
    print(f"retained epoch {result.best_epoch} ({config.selection}); checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from relchain.story import load_dataset
    from relchain.train import evaluate, load_model

    model, config = load_model(args.checkpoint)
    data = args.data or config.dataset
    if not data:
        raise UsageError("eval: no dataset (pass --data)")
    report = evaluate(model, load_dataset(data).test, config.fingerprint())
    for line in report.lines():
        print(line)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def sweep_configs(path, data: str | None = None, seed: int | None = None):
    from relchain.train import TrainConfig

    sections = cfgio.read_sections(path)
    defaults = sections.get("defaults", {})
    runs = [name for name in sections if name.startswith("run")]
    if not runs:
        raise UsageError(f"{path}: no [run.*] sections")
    configs = []
    for name in runs:
        values = {**defaults, **sections[name]}
        if data and not values.get("dataset"):
            values["dataset"] = data
        if seed is not None:
            values["seed"] = str(seed)
        configs.append(cfgio.from_mapping(TrainConfig, values, f"{path} [{name}]"))
    return configs


def cmd_sweep(args) -> int:
    from relchain.train import results_table, sweep

    out = _need(args, "out")
    configs = sweep_configs(_need(args, "config"), args.data, _resolve_seed(args))
    rows = sweep(configs, out_dir=out, jobs=max(1, args.jobs))
    sys.stdout.write(results_table(rows))
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_oracle(args) -> int:
    from relchain.kb import KnowledgeBase, UnknownRelationError, default_kb, relation

    labels = [part.strip() for part in args.chain.split(",") if part.strip()]
    if not labels:
        raise UsageError("oracle: give a non-empty comma-separated chain, e.g. father,father")
    try:
        chain = [relation(label) for label in labels]
    except UnknownRelationError as exc:
        raise UsageError(f"oracle: {exc}") from None
    kb = KnowledgeBase.load(args.kb) if args.kb else default_kb()
    result = kb.resolve_chain(chain)
    print("none" if result is None else result.label)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from relchain.gradcheck import TOLERANCE, run_suite

    seed = _resolve_seed(args)
    results = run_suite(trials=max(1, args.trials), seed=0 if seed is None else seed)
    for r in results:
        print(r.line())
    worst = max(results, key=lambda r: r.max_rel_err)
    print(f"max relative error {worst.max_rel_err:.3e} ({worst.name}); tolerance {TOLERANCE:g}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        body = "name\tmax_rel_err\tchecked\tseconds\n" + "".join(
            f"{r.name}\t{r.max_rel_err:.6e}\t{r.checked}\t{r.seconds:.3f}\n" for r in results)
        (Path(args.out) / "gradcheck.tsv").write_text(body)
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage and 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relchain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cfgio.ConfigError as exc:
        print(f"relchain: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"relchain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
