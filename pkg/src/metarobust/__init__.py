"""metarobust: robust meta-learning with a per-environment invariance
penalty, baseline meta-learners, multi-environment episodic task generation,
and a desk-scale benchmark harness."""

__version__ = "0.1.0"

from .autodiff import Graph, apply_primitive, finite_diff_check, grad
from .harness import BenchmarkConfig, MetricsReport, emit_table, mean_ci95, run_benchmark
from .meta import MetaConfig, MetaState, adapt_and_eval, inner_adapt, irm_penalty, meta_objective, meta_step, reptile_step
from .nn import MlpParams, accuracy, cross_entropy, forward, init_mlp
from .tasks import Dataset, EnvSpec, Episode, SplitSpec, gen_synthetic, load_csv, make_split, sample_episode

__all__ = [
    "Graph", "apply_primitive", "grad", "finite_diff_check",
    "MlpParams", "init_mlp", "forward", "cross_entropy", "accuracy",
    "Dataset", "EnvSpec", "Episode", "SplitSpec",
    "gen_synthetic", "load_csv", "sample_episode", "make_split",
    "MetaConfig", "MetaState", "inner_adapt", "irm_penalty",
    "meta_objective", "meta_step", "reptile_step", "adapt_and_eval",
    "BenchmarkConfig", "MetricsReport", "run_benchmark", "emit_table",
    "mean_ci95",
]
