"""Command-line entry point: gen-data, train, eval, ablate, bench.

Exit codes: 0 ok, 2 I/O failure, 3 invalid configuration, 4 non-finite loss.
Every option may also come from a JSON file given with ``--config``; flags
override file values and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import warnings

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; that code is reserved for I/O here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in str(text).split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgsl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate expert demonstrations (JSON-Lines)")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    t = sub.add_parser("train", help="train a policy, write checkpoint and loss CSV")
    t.add_argument("--data")
    t.add_argument("--steps", type=int)
    t.add_argument("--joint", type=_bool, nargs="?", const=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--loss-csv", dest="loss_csv", help="default: <out>.loss.csv")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("eval", help="closed-loop success rate of a selection strategy")
    e.add_argument("--ckpt")
    e.add_argument("--strategy")
    e.add_argument("--n", type=int)
    e.add_argument("--tau", type=float, help="sampling temperature")
    e.add_argument("--tau-ref", dest="tau_ref", type=float)
    e.add_argument("--mask")
    e.add_argument("--agg")
    e.add_argument("--trials", type=int)
    e.add_argument("--seeds", type=_csv_list(int))
    e.add_argument("--out", help="CSV path (default: stdout only)")

    a = sub.add_parser("ablate", help="evaluate every configuration of a grid file")
    a.add_argument("--ckpt")
    a.add_argument("--grid-file", dest="grid_file")
    a.add_argument("--out")
    a.add_argument("--trials", type=int)
    a.add_argument("--seeds", type=_csv_list(int))

    b = sub.add_parser("bench", help="selection latency, vanilla vs single-prefill")
    b.add_argument("--ckpt")
    b.add_argument("--n-list", dest="n_list", type=_csv_list(int))
    b.add_argument("--context-factor", dest="context_factor", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")

    for s in (g, t, e, a, b):
        s.add_argument("--config", help="JSON file with default values for this command")
    return p


DEFAULTS = {
    "gen-data": {"count": None, "seed": 0, "out": None},
    "train": {"data": None, "steps": 2000, "joint": False, "seed": 0, "out": None, "loss_csv": None,
              "batch_size": 32, "lr": 3e-4},
    "eval": {"ckpt": None, "strategy": "mg_select", "n": 4, "tau": 1.0, "tau_ref": 4.0, "mask": "text",
             "agg": "first5", "trials": 50, "seeds": [0], "out": None},
    "ablate": {"ckpt": None, "grid_file": None, "out": None, "trials": None, "seeds": None},
    "bench": {"ckpt": None, "n_list": [1, 2, 4, 8, 16], "context_factor": 8, "repeats": 20, "warmup": 2,
              "seed": 0, "out": None},
}
REQUIRED = {
    "gen-data": ("count", "out"),
    "train": ("data", "out"),
    "eval": ("ckpt",),
    "ablate": ("ckpt", "grid_file", "out"),
    "bench": ("ckpt",),
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < JSON config < explicit flags, then check required keys."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def _write(path, text: str):
    from .checkpoint import atomic_write

    atomic_write(path, text)


def _read_checkpoint(path):
    from .checkpoint import load

    return load(path)


# -- commands --------------------------------------------------------------------


def cmd_gen_data(cfg) -> int:
    from .bench import demos_to_jsonl, generate_demos

    _check(isinstance(cfg["count"], int) and cfg["count"] >= 1, "--count must be >= 1")
    demos = generate_demos(cfg["count"], cfg["seed"])
    _write(cfg["out"], demos_to_jsonl(demos))
    per_instr = [sum(d.instruction == i for d in demos) for i in range(4)]
    n_chunks = sum(len(d.chunks) for d in demos)
    print(f"episodes={len(demos)} chunks={n_chunks} per_instruction={per_instr} out={cfg['out']}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    from .bench import load_demos, training_examples
    from .checkpoint import save
    from .policy import NonFiniteLoss, TrainConfig, new_policy, train

    _check(cfg["steps"] >= 1, "--steps must be >= 1")
    _check(cfg["batch_size"] >= 1, "--batch-size must be >= 1")
    _check(cfg["lr"] > 0, "--lr must be > 0")
    demos = load_demos(cfg["data"])
    examples = training_examples(demos)
    _check(len(examples) > 0, "dataset is empty")
    tc = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     joint=bool(cfg["joint"]), seed=cfg["seed"])
    model = new_policy(cfg["seed"])
    try:
        model, losses = train(model, examples, tc)
    except NonFiniteLoss as exc:
        print(f"error: non-finite loss at step {exc.step}", file=sys.stderr)
        return EXIT_NUMERIC
    meta = {"training": tc.to_dict(), "seed": cfg["seed"], "dataset": {"episodes": len(demos), "examples": len(examples)}}
    save(cfg["out"], model, meta)
    loss_path = cfg["loss_csv"] or cfg["out"] + ".loss.csv"
    _write(loss_path, "step,loss\n" + "".join(f"{i},{l:.9g}\n" for i, l in enumerate(losses)))
    print(f"steps={len(losses)} final_loss={losses[-1]:.4f} params={model.n_params()} out={cfg['out']}")
    return EXIT_OK


def _joint_flag(meta) -> str:
    training = meta.get("training", {})
    return str(int(bool(training.get("joint")))) if "joint" in training else ""


def cmd_eval(cfg) -> int:
    from .bench import STRATEGIES, Strategy, evaluate, reports_to_csv

    _check(cfg["strategy"] in STRATEGIES, f"--strategy must be one of {STRATEGIES}")
    _check(cfg["n"] >= 1, "--n must be >= 1")
    _check(cfg["tau"] > 0 and cfg["tau_ref"] > 0, "temperatures must be > 0")
    _check(cfg["trials"] >= 1, "--trials must be >= 1")
    _check(len(cfg["seeds"]) >= 1, "--seeds must list at least one seed")
    if cfg["strategy"] == "greedy":
        warnings.warn("greedy decoding ignores --n, --tau, --tau-ref, --mask and --agg", stacklevel=1)
    try:
        strategy = Strategy.build(cfg["strategy"], cfg["n"], cfg["tau"], cfg["tau_ref"], cfg["mask"], cfg["agg"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model, meta = _read_checkpoint(cfg["ckpt"])
    rows = []
    for s in cfg["seeds"]:
        rep = evaluate(model, strategy, cfg["trials"], s)
        rows.append(rep.row("eval", _joint_flag(meta)))
        print(f"strategy={cfg['strategy']} seed={s} success={rep.successes}/{rep.trials} "
              f"rate={rep.success_rate:.3f} mean_len={rep.mean_len:.2f}")
    text = reports_to_csv(rows)
    if cfg["out"]:
        _write(cfg["out"], text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(cfg) -> int:
    from .bench import expand_grid, reports_to_csv, run_ablation

    try:
        with open(cfg["grid_file"], encoding="utf-8") as fh:
            grid = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file is not valid JSON: {exc}") from exc
    try:
        entries = expand_grid(grid)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"malformed grid: {exc}") from exc
    _check(entries, "grid is empty")
    trials = cfg["trials"] or (grid.get("trials") if isinstance(grid, dict) else None) or 50
    seeds = cfg["seeds"] or (grid.get("seeds") if isinstance(grid, dict) else None) or [0]
    _check(trials >= 1 and len(seeds) >= 1, "trials and seeds must be nonempty")

    cache = {}

    def load_model(ckpt):
        path = ckpt or cfg["ckpt"]
        model, meta = _read_checkpoint(path)
        cache[ckpt] = meta
        return model

    rows = run_ablation(entries, seeds, trials, load_model, lambda ckpt: _joint_flag(cache.get(ckpt, {})))
    _write(cfg["out"], reports_to_csv(rows))
    print(f"rows={len(rows)} configs={len(entries)} seeds={len(seeds)} out={cfg['out']}")
    return EXIT_OK


def cmd_bench(cfg) -> int:
    from .engine import bench_latency

    _check(cfg["n_list"] and all(n >= 1 for n in cfg["n_list"]), "every N in --n-list must be >= 1")
    _check(cfg["context_factor"] >= 1, "--context-factor must be >= 1")
    _check(cfg["repeats"] >= 1 and cfg["warmup"] >= 0, "--repeats must be >= 1")
    model, _ = _read_checkpoint(cfg["ckpt"])
    rows = bench_latency(model, cfg["n_list"], cfg["context_factor"], cfg["repeats"], cfg["warmup"], seed=cfg["seed"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "N", "mean_ms", "std_ms", "median_ms", "prefills", "decode_steps", "mode"])
    for r in rows:
        w.writerow([r.strategy, r.n, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", f"{r.median_ms:.4f}",
                    r.prefills, r.decode_steps, r.mode])
    text = buf.getvalue()
    if cfg["out"]:
        _write(cfg["out"], text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        from .checkpoint import CheckpointError

        if isinstance(exc, CheckpointError):
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        raise


if __name__ == "__main__":
    sys.exit(main())
