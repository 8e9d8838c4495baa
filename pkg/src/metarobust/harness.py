"""Benchmark driver: train each method, select on validation episodes, and
report novel-class accuracy with 95% confidence intervals for the
conventional (training environments) and cross-domain (held-out environment)
settings.

Reports are byte-deterministic for a given seed and config. Wall-clock time
is inherently nondeterministic, so the ``wall_time_s`` field required by the
report schema is recorded as 0.0 in every serialized report; measured times
are logged to stderr instead.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import meta, nn, tasks


def mean_ci95(accuracies):
    """Mean accuracy and 95% CI, both in percent.

    CI = 1.96 * s / sqrt(n) with the sample standard deviation s; requires at
    least two values.
    """
    acc = np.asarray(list(accuracies), dtype=np.float64)
    if acc.size < 2:
        raise ValueError(f"need >= 2 accuracies for a CI, got {acc.size}")
    mean = float(acc.mean()) * 100.0
    s = float(acc.std(ddof=1))
    ci = 1.96 * s / np.sqrt(acc.size) * 100.0
    return mean, float(ci)


SETTINGS = ("conventional", "cross-domain")


@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple[str, ...] = ("maml", "fomaml", "reptile", "rml")
    settings: tuple[str, ...] = SETTINGS
    shots: tuple[tuple[int, int], ...] = ((5, 1),)   # (N, K) pairs
    steps: int = 2000
    eval_interval: int = 50
    eval_episodes: int = 600
    val_episodes: int = 100
    alpha: float = 0.05
    eta: float = 0.01
    lambda_pen: float = 1.0
    inner_steps: int = 3
    q_query: int = 15
    meta_batch: int = 4
    hidden: tuple[int, ...] = (32,)
    n_classes: int = 10
    per_class_per_env: int = 40
    d_inv: int = 5
    d_sp: int = 5
    sigma_inv: float = 0.5
    sigma_sp: float = 0.1
    train_ps: tuple[float, ...] = (0.9, 0.8)
    ood_p: float = 0.1
    fractions: tuple[float, float, float] = (0.5, 0.0, 0.5)
    workers: int = 1

    def __post_init__(self):
        for m in self.methods:
            if m not in meta.ALGORITHMS:
                raise ValueError(f"unknown method {m!r}")
        for s in self.settings:
            if s not in SETTINGS:
                raise ValueError(f"unknown setting {s!r}; use one of {SETTINGS}")
        if self.steps < 1 or self.eval_interval < 1:
            raise ValueError("steps and eval_interval must be >= 1")
        if self.eval_episodes < 2 or self.val_episodes < 2:
            raise ValueError("episode counts must be >= 2 for CIs")


@dataclass(frozen=True)
class ReportRow:
    method: str
    setting: str
    n: int
    k: int
    mean_pct: float
    ci95_pct: float
    episodes: int
    wall_time_s: float

    def to_dict(self):
        return {
            "method": self.method,
            "setting": self.setting,
            "n": self.n,
            "k": self.k,
            "mean_pct": self.mean_pct,
            "ci95_pct": self.ci95_pct,
            "episodes": self.episodes,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class MetricsReport:
    version: int
    seed: int
    rows: list[ReportRow] = field(default_factory=list)


def _rng(*entropy):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def build_dataset(config, rng_seed):
    """The benchmark corpus: training environments 0..E-1, OOD environment E."""
    specs = [tasks.EnvSpec(i, p) for i, p in enumerate(config.train_ps)]
    specs.append(tasks.EnvSpec(len(config.train_ps), config.ood_p))
    seed = np.random.SeedSequence([rng_seed, 0])
    return tasks.gen_synthetic(
        config.n_classes, config.per_class_per_env, config.d_inv, config.d_sp,
        config.sigma_inv, config.sigma_sp, specs, seed)


def build_split(config, dataset, rng_seed):
    return tasks.make_split(dataset, dataset, config.fractions,
                            np.random.SeedSequence([rng_seed, 1]))


def _selection_classes(split, n_way):
    """Validation classes, falling back to base classes when the validation
    split cannot host an N-way episode (e.g. the default 10-class benchmark
    has 5 base + 5 novel and no validation classes). Novel classes are never
    used for selection."""
    if len(split.validation_classes) >= n_way:
        return split.validation_classes
    return split.base_classes


def evaluate_accuracy(params, dataset, classes, env_ids, n_episodes,
                      n_way, k_shot, q_query, alpha, inner_steps, seed_entropy):
    """Accuracies over episodes drawn round-robin across `env_ids`."""
    cfg = meta.MetaConfig(
        envs=tuple(tasks.EnvSpec(e) for e in sorted(set(env_ids))),
        alpha=alpha, eta=0.0, lambda_pen=0.0, inner_steps=inner_steps,
        n_way=n_way, k_shot=k_shot, q_query=q_query, algo="maml")
    rng = _rng(*seed_entropy)
    accs = []
    for i in range(n_episodes):
        env = env_ids[i % len(env_ids)]
        ep = tasks.sample_episode(dataset, classes, env, n_way, k_shot,
                                  q_query, rng)
        accs.append(meta.adapt_and_eval(params, ep, cfg))
    return accs


@dataclass
class TrainResult:
    params: nn.MlpParams          # best-validation checkpoint
    final_params: nn.MlpParams
    best_val_acc: float
    best_step: int
    curve: list                   # (step, train_loss, val_acc | None, mean_penalty)


def train_method(config, method, n_way, k_shot, rng_seed, dataset=None,
                 split=None, log=None):
    """Train one method at one (N, K); returns the selected checkpoint.

    All randomness derives from rng_seed the same way for every method, so
    methods are replicas sharing data, init, and episode streams.
    """
    if dataset is None:
        dataset = build_dataset(config, rng_seed)
    if split is None:
        split = build_split(config, dataset, rng_seed)
    train_envs = tuple(tasks.EnvSpec(i, p) for i, p in enumerate(config.train_ps))
    mc = meta.MetaConfig(
        envs=train_envs, alpha=config.alpha, eta=config.eta,
        lambda_pen=config.lambda_pen, inner_steps=config.inner_steps,
        n_way=n_way, k_shot=k_shot, q_query=config.q_query,
        meta_batch=config.meta_batch, algo=method)
    layer_sizes = (dataset.feature_dim, *config.hidden, n_way)
    params = nn.init_mlp(layer_sizes, np.random.SeedSequence([rng_seed, 2]))
    state = meta.MetaState(params, 0, _rng(rng_seed, 3))
    base = split.base_classes

    def sampler(env_spec, rng):
        return tasks.sample_episode(dataset, base, env_spec.env_id,
                                    n_way, k_shot, config.q_query, rng)

    val_classes = _selection_classes(split, n_way)
    train_env_ids = tuple(range(len(config.train_ps)))
    best_params, best_acc, best_step = state.params, -1.0, 0
    curve = []
    for step in range(1, config.steps + 1):
        state, stats = meta.meta_step_with_stats(state, sampler, mc)
        val_acc = None
        if step % config.eval_interval == 0 or step == config.steps:
            accs = evaluate_accuracy(
                state.params, dataset, val_classes, train_env_ids,
                config.val_episodes, n_way, k_shot, config.q_query,
                config.alpha, config.inner_steps, (rng_seed, 4))
            val_acc = float(np.mean(accs))
            if val_acc > best_acc:
                best_params, best_acc, best_step = state.params, val_acc, step
            if log:
                log(f"{method} {n_way}w{k_shot}s step {step}: "
                    f"loss {stats.train_loss:.4f} val {val_acc:.3f} "
                    f"pen {stats.mean_penalty:.5f}")
        curve.append((step, stats.train_loss, val_acc, stats.mean_penalty))
    return TrainResult(params=best_params, final_params=state.params,
                       best_val_acc=best_acc, best_step=best_step, curve=curve)


def _setting_env_ids(config, setting):
    if setting == "conventional":
        return tuple(range(len(config.train_ps)))
    return (len(config.train_ps),)


def _bench_one(args):
    try:
        return _bench_one_inner(args)
    except meta.NonFiniteGradError as err:
        return [], f"{args[1]}: diverged ({err})"


def _bench_one_inner(args):
    config, method, n_way, k_shot, rng_seed = args
    t0 = time.perf_counter()
    dataset = build_dataset(config, rng_seed)
    split = build_split(config, dataset, rng_seed)
    result = train_method(config, method, n_way, k_shot, rng_seed,
                          dataset=dataset, split=split)
    rows = []
    for si, setting in enumerate(config.settings):
        env_ids = _setting_env_ids(config, setting)
        accs = evaluate_accuracy(
            result.params, dataset, split.novel_classes, env_ids,
            config.eval_episodes, n_way, k_shot, config.q_query,
            config.alpha, config.inner_steps, (rng_seed, 5, si, n_way, k_shot))
        mean, ci = mean_ci95(accs)
        rows.append(ReportRow(method=method, setting=setting, n=n_way,
                              k=k_shot, mean_pct=mean, ci95_pct=ci,
                              episodes=config.eval_episodes, wall_time_s=0.0))
    elapsed = time.perf_counter() - t0
    return rows, f"{method} {n_way}-way {k_shot}-shot: {elapsed:.1f}s " \
                 f"(best val {result.best_val_acc:.3f} at step {result.best_step})"


def run_benchmark(config, rng_seed, log=None):
    """Train every (method, shot) pair and report novel-class accuracy.

    Deterministic per (config, rng_seed): methods never share mutable state,
    and rows are assembled in roster order regardless of scheduling. With
    config.workers > 1 the pairs run in separate processes. A method whose
    training diverges is reported to stderr and omitted from the rows; the
    run continues for the others.
    """
    if log is None:
        log = lambda msg: print(msg, file=sys.stderr)
    jobs = [(config, method, n, k, rng_seed)
            for method in config.methods for (n, k) in config.shots]
    results = [None] * len(jobs)
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for i, res in enumerate(pool.map(_bench_one, jobs)):
                results[i] = res
    else:
        for i, job in enumerate(jobs):
            results[i] = _bench_one(job)
    report = MetricsReport(version=1, seed=int(rng_seed))
    for rows, note in results:
        log(note)
        report.rows.extend(rows)
    return report


# --- serialization -----------------------------------------------------------

def emit_table(report, fmt):
    """Serialize a report as ``text``, ``csv``, or ``json``.

    Output is byte-deterministic for a given report; csv and json print
    floats losslessly (shortest round-trip representation).
    """
    if not report.rows:
        raise ValueError("report has no rows")
    if fmt == "json":
        payload = {"version": report.version, "seed": report.seed,
                   "rows": [r.to_dict() for r in report.rows]}
        return json.dumps(payload, indent=2) + "\n"
    if fmt == "csv":
        lines = ["method,setting,n,k,mean_pct,ci95_pct,episodes,wall_time_s"]
        for r in report.rows:
            lines.append(f"{r.method},{r.setting},{r.n},{r.k},{r.mean_pct!r},"
                         f"{r.ci95_pct!r},{r.episodes},{r.wall_time_s!r}")
        return "\n".join(lines) + "\n"
    if fmt == "text":
        return _text_table(report)
    raise ValueError(f"unknown format {fmt!r}; use text, csv, or json")


def _text_table(report):
    methods = []
    for r in report.rows:
        if r.method not in methods:
            methods.append(r.method)
    columns = sorted({(r.setting, r.n, r.k) for r in report.rows})
    cells = {(r.method, r.setting, r.n, r.k): r for r in report.rows}
    # first method with the column-best mean carries the marker
    best = {}
    for col in columns:
        col_rows = [cells[(m, *col)] for m in methods if (m, *col) in cells]
        if col_rows:
            best[col] = max(col_rows, key=lambda r: r.mean_pct).method
    headers = ["method"] + [f"{s} {n}-way {k}-shot" for s, n, k in columns]
    table = [headers]
    for m in methods:
        line = [m]
        for col in columns:
            row = cells.get((m, *col))
            if row is None:
                line.append("-")
            else:
                mark = "*" if best.get(col) == m else ""
                line.append(f"{row.mean_pct:.2f} +- {row.ci95_pct:.2f}{mark}")
        table.append(line)
    widths = [max(len(line[i]) for line in table) for i in range(len(headers))]
    out = []
    for line in table:
        out.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
    return "\n".join(out) + "\n"


def load_report(text):
    """Parse a json report back into MetricsReport (inverse of emit json)."""
    payload = json.loads(text)
    rows = [ReportRow(**{**r}) for r in payload["rows"]]
    return MetricsReport(version=payload["version"], seed=payload["seed"],
                         rows=rows)
