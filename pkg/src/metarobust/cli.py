"""Command-line entry point.

Subcommands: gen-data, train, eval, benchmark, gradcheck. Configuration is a
flat ``key = value`` file (``#`` starts a comment) plus per-key flags; flags
override the file, the file overrides the METAROBUST_SEED environment
variable (seed only), and defaults fill the rest. Exit codes: 0 success,
1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import gradcheck, harness, meta, nn, tasks


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s):
    s = s.strip()
    if not s:
        return ()
    return tuple(int(v) for v in s.split(","))


def _parse_float_list(s):
    s = s.strip()
    if not s:
        return ()
    return tuple(float(v) for v in s.split(","))


def _parse_str_list(s):
    s = s.strip()
    if not s:
        return ()
    return tuple(v.strip() for v in s.split(","))


@dataclass(frozen=True)
class _Key:
    name: str
    parse: callable
    default: object
    constraint: str      # human-readable; shown in --help
    check: callable      # value -> bool
    help: str


_ALGOS = ", ".join(meta.ALGORITHMS)

_KEYS = (
    _Key("alpha", float, 0.05, "float > 0", lambda v: v > 0,
         "inner-loop learning rate"),
    _Key("eta", float, 0.01, "float > 0", lambda v: v > 0,
         "outer-loop learning rate"),
    _Key("lambda", float, 1.0, "float >= 0", lambda v: v >= 0,
         "invariance penalty weight"),
    _Key("inner_steps", int, 3, "int >= 0", lambda v: v >= 0,
         "gradient-descent steps per task adaptation"),
    _Key("n", int, 5, "int >= 2", lambda v: v >= 2, "classes per episode (N-way)"),
    _Key("k", int, 1, "int >= 1", lambda v: v >= 1,
         "support samples per class (K-shot)"),
    _Key("q", int, 15, "int >= 1", lambda v: v >= 1, "query samples per class"),
    _Key("meta_batch", int, 4, "int >= 1", lambda v: v >= 1,
         "tasks per environment per meta-step"),
    _Key("algo", str, "rml", f"one of {_ALGOS}", lambda v: v in meta.ALGORITHMS,
         "training algorithm for the train subcommand"),
    _Key("steps", int, 2000, "int >= 1", lambda v: v >= 1, "meta-training steps"),
    _Key("seed", int, 0, "int", lambda v: True,
         "master seed (METAROBUST_SEED is the lowest-precedence source)"),
    _Key("setting", str, "conventional", "conventional or cross-domain",
         lambda v: v in harness.SETTINGS, "evaluation setting for eval"),
    _Key("hidden", _parse_int_list, (32,), "comma ints, each > 0",
         lambda v: all(h > 0 for h in v), "hidden layer sizes"),
    _Key("n_classes", int, 10, "int >= 2", lambda v: v >= 2,
         "synthetic generator: number of classes"),
    _Key("per_class_per_env", int, 40, "int >= 1", lambda v: v >= 1,
         "synthetic generator: samples per class per environment"),
    _Key("d_inv", int, 5, "int >= 1", lambda v: v >= 1,
         "synthetic generator: invariant feature dims"),
    _Key("d_sp", int, 5, "int >= 1", lambda v: v >= 1,
         "synthetic generator: spurious feature dims"),
    _Key("sigma_inv", float, 0.5, "float > 0", lambda v: v > 0,
         "invariant block noise (must exceed sigma_sp)"),
    _Key("sigma_sp", float, 0.1, "float > 0", lambda v: v > 0,
         "spurious block noise"),
    _Key("train_p", _parse_float_list, (0.9, 0.8), "comma floats in [0,1]",
         lambda v: len(v) >= 1 and all(0 <= p <= 1 for p in v),
         "spurious agreement per training environment"),
    _Key("ood_p", float, 0.1, "float in [0,1]", lambda v: 0 <= v <= 1,
         "spurious agreement of the held-out environment"),
    _Key("base_frac", float, 0.5, "float in [0,1]", lambda v: 0 <= v <= 1,
         "class fraction for the base split"),
    _Key("val_frac", float, 0.0, "float in [0,1]", lambda v: 0 <= v <= 1,
         "class fraction for the validation split"),
    _Key("novel_frac", float, 0.5, "float in [0,1]", lambda v: 0 <= v <= 1,
         "class fraction for the novel split"),
    _Key("eval_interval", int, 50, "int >= 1", lambda v: v >= 1,
         "meta-steps between validation evaluations"),
    _Key("eval_episodes", int, 600, "int >= 2", lambda v: v >= 2,
         "episodes per reported accuracy"),
    _Key("val_episodes", int, 100, "int >= 2", lambda v: v >= 2,
         "episodes per validation evaluation"),
    _Key("methods", _parse_str_list, ("maml", "fomaml", "reptile", "rml"),
         f"comma subset of {_ALGOS}",
         lambda v: len(v) >= 1 and all(m in meta.ALGORITHMS for m in v),
         "benchmark method roster"),
    _Key("workers", int, 1, "int >= 1", lambda v: v >= 1,
         "process cap for benchmark training jobs"),
    _Key("data_csv", str, "", "path or empty", lambda v: True,
         "dataset CSV (empty: synthetic generator; highest env id is OOD)"),
)

_KEY_BY_NAME = {k.name: k for k in _KEYS}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, name):
        return self.values[name]

    def benchmark_config(self, methods=None):
        v = self.values
        return harness.BenchmarkConfig(
            methods=tuple(methods if methods is not None else v["methods"]),
            settings=harness.SETTINGS,
            shots=((v["n"], v["k"]),),
            steps=v["steps"], eval_interval=v["eval_interval"],
            eval_episodes=v["eval_episodes"], val_episodes=v["val_episodes"],
            alpha=v["alpha"], eta=v["eta"], lambda_pen=v["lambda"],
            inner_steps=v["inner_steps"], q_query=v["q"],
            meta_batch=v["meta_batch"], hidden=v["hidden"],
            n_classes=v["n_classes"], per_class_per_env=v["per_class_per_env"],
            d_inv=v["d_inv"], d_sp=v["d_sp"], sigma_inv=v["sigma_inv"],
            sigma_sp=v["sigma_sp"], train_ps=v["train_p"], ood_p=v["ood_p"],
            fractions=(v["base_frac"], v["val_frac"], v["novel_frac"]),
            workers=v["workers"])


def _coerce(key, raw, where):
    try:
        value = key.parse(raw) if isinstance(raw, str) else raw
    except ValueError:
        raise ConfigError(f"{where}: invalid value {raw!r} for key "
                          f"'{key.name}' (expected {key.constraint})")
    if not key.check(value):
        raise ConfigError(f"{where}: constraint violation for key "
                          f"'{key.name}': {raw!r} (expected {key.constraint})")
    return value


def parse_config(path=None, overrides=None, env=None):
    """Resolve a RunConfig from defaults, METAROBUST_SEED, file, and flags."""
    env = os.environ if env is None else env
    values = {k.name: k.default for k in _KEYS}
    if "METAROBUST_SEED" in env:
        values["seed"] = _coerce(_KEY_BY_NAME["seed"], env["METAROBUST_SEED"],
                                 "METAROBUST_SEED")
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}")
        for line_no, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', "
                                  f"got {line!r}")
            name, raw = (s.strip() for s in line.split("=", 1))
            key = _KEY_BY_NAME.get(name)
            if key is None:
                raise ConfigError(f"{path}:{line_no}: unknown key '{name}'")
            values[name] = _coerce(key, raw, f"{path}:{line_no}")
    for name, raw in (overrides or {}).items():
        key = _KEY_BY_NAME.get(name)
        if key is None:
            raise ConfigError(f"flag: unknown key '{name}'")
        values[name] = _coerce(key, raw, f"--{name.replace('_', '-')}")
    cfg = RunConfig(values)
    if not cfg["sigma_inv"] > cfg["sigma_sp"]:
        raise ConfigError("constraint violation: sigma_inv must exceed sigma_sp")
    fr = cfg["base_frac"] + cfg["val_frac"] + cfg["novel_frac"]
    if not cfg["data_csv"] and abs(fr - 1.0) > 1e-9:
        raise ConfigError(f"constraint violation: split fractions must sum "
                          f"to 1, got {fr}")
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_key_flags(parser):
    for key in _KEYS:
        flag = "--" + key.name.replace("_", "-")
        parser.add_argument(flag, dest=f"key_{key.name}", metavar="V",
                            help=f"{key.help} [{key.constraint}; default: "
                                 f"{_fmt_default(key.default)}]")


def _fmt_default(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _build_parser():
    parser = _Parser(prog="metarobust",
                     description="Robust meta-learning benchmark engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, **extra_flags):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE",
                       help="key = value config file")
        _add_key_flags(p)
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        return p

    command("gen-data", "generate a synthetic multi-environment dataset CSV",
            **{"--out": dict(required=True, metavar="FILE",
                             help="output CSV path")})
    command("train", "train one method and write checkpoint + training curve",
            **{"--out-checkpoint": dict(default="model.ckpt", metavar="FILE"),
               "--curve": dict(default="curve.csv", metavar="FILE",
                               help="training-curve CSV "
                                    "(step,train_loss,val_accuracy,mean_penalty)")})
    command("eval", "evaluate a checkpoint on a class split / environment",
            **{"--checkpoint": dict(required=True, metavar="FILE"),
               "--split": dict(default="novel",
                               choices=("base", "validation", "novel")),
               "--episodes": dict(type=int, default=None, metavar="INT",
                                  help="episode count (default: eval_episodes)")})
    command("benchmark", "train the method roster and write the json report",
            **{"--out": dict(default="report.json", metavar="FILE"),
               "--format": dict(default="text", choices=("text", "csv", "json"),
                                help="table format printed to stdout")})
    command("gradcheck", "run the finite-difference verification suite")
    return parser


def _resolve_config(args):
    overrides = {}
    for key in _KEYS:
        raw = getattr(args, f"key_{key.name}", None)
        if raw is not None:
            overrides[key.name] = raw
    return parse_config(args.config, overrides)


def _load_bench_inputs(cfg, seed):
    """Dataset + split, from the generator or a CSV (highest env id = OOD)."""
    bc = cfg.benchmark_config()
    if cfg["data_csv"]:
        dataset = tasks.load_csv(cfg["data_csv"])
        env_ids = sorted(s.env_id for s in dataset.env_specs)
        if len(env_ids) < 2:
            raise ConfigError("CSV dataset needs >= 2 environments "
                              "(highest id is held out)")
        split = tasks.make_split(dataset, dataset,
                                 (cfg["base_frac"], cfg["val_frac"],
                                  cfg["novel_frac"]),
                                 np.random.SeedSequence([seed, 1]))
        train_env_ids = tuple(env_ids[:-1])
        ood_env_id = env_ids[-1]
    else:
        dataset = harness.build_dataset(bc, seed)
        split = harness.build_split(bc, dataset, seed)
        train_env_ids = tuple(range(len(bc.train_ps)))
        ood_env_id = len(bc.train_ps)
    return bc, dataset, split, train_env_ids, ood_env_id


def _cmd_gen_data(args):
    cfg = _resolve_config(args)
    bc = cfg.benchmark_config()
    dataset = harness.build_dataset(bc, cfg["seed"])
    tasks.write_csv(dataset, args.out)
    print(f"wrote {dataset.n_samples} samples "
          f"({dataset.feature_dim} features, "
          f"{len(dataset.env_specs)} environments) to {args.out}")
    return 0


def _cmd_train(args):
    cfg = _resolve_config(args)
    seed = cfg["seed"]
    bc, dataset, split, _, _ = _load_bench_inputs(cfg, seed)
    result = harness.train_method(
        bc, cfg["algo"], cfg["n"], cfg["k"], seed, dataset=dataset,
        split=split, log=lambda m: print(m, file=sys.stderr))
    nn.save_checkpoint(result.params, args.out_checkpoint)
    with open(args.curve, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,train_loss,val_accuracy,mean_penalty\n")
        for step, loss, val, pen in result.curve:
            val_s = "" if val is None else repr(val)
            fh.write(f"{step},{loss!r},{val_s},{pen!r}\n")
    print(f"trained {cfg['algo']} for {bc.steps} steps; best validation "
          f"accuracy {result.best_val_acc:.4f} at step {result.best_step}")
    print(f"checkpoint: {args.out_checkpoint}; curve: {args.curve}")
    return 0


def _cmd_eval(args):
    cfg = _resolve_config(args)
    seed = cfg["seed"]
    bc, dataset, split, train_env_ids, ood_env_id = _load_bench_inputs(cfg, seed)
    params = nn.load_checkpoint(args.checkpoint)
    classes = {"base": split.base_classes,
               "validation": split.validation_classes,
               "novel": split.novel_classes}[args.split]
    if not classes:
        raise ConfigError(f"split '{args.split}' has no classes")
    env_ids = train_env_ids if cfg["setting"] == "conventional" else (ood_env_id,)
    episodes = args.episodes if args.episodes is not None else bc.eval_episodes
    accs = harness.evaluate_accuracy(
        params, dataset, classes, env_ids, episodes, cfg["n"], cfg["k"],
        cfg["q"], cfg["alpha"], cfg["inner_steps"], (seed, 6))
    mean, ci = harness.mean_ci95(accs)
    print(f"{mean:.2f} +- {ci:.2f}  ({cfg['setting']}, {args.split} classes, "
          f"{episodes} episodes)")
    return 0


def _cmd_benchmark(args):
    cfg = _resolve_config(args)
    report = harness.run_benchmark(cfg.benchmark_config(), cfg["seed"])
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(harness.emit_table(report, "json"))
    sys.stdout.write(harness.emit_table(report, args.format))
    print(f"report written to {args.out}", file=sys.stderr)
    return 0


def _cmd_gradcheck(args):
    ok = gradcheck.run_suite(log=print)
    if not ok:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    print("gradcheck passed")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "benchmark": _cmd_benchmark,
    "gradcheck": _cmd_gradcheck,
}


def main(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as exc:       # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
