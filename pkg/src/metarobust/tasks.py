"""Multi-environment dataset construction and N-way K-shot episode sampling.

The synthetic generator produces two feature blocks per sample: an invariant
block whose class prototypes hold in every environment, and a spurious block
whose class agreement is controlled per environment by ``spurious_prob``. The
invariant block is noisier than the spurious one, so a learner that chases
the cleanest in-distribution signal is drawn to the feature that breaks under
environment shift.

All randomness flows through seeded numpy PCG64 generators; identical seeds
give bitwise-identical datasets and episodes. Concurrent samplers must use
independent generators (one per worker, seeded base_seed + worker_index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import as_tensor


@dataclass(frozen=True)
class EnvSpec:
    """One environment: its id and spurious-agreement probability.

    ``spurious_prob`` is None for data loaded from CSV, where the generating
    probability is unknown.
    """
    env_id: int
    spurious_prob: float | None = None

    def __post_init__(self):
        if self.spurious_prob is not None and not 0.0 <= self.spurious_prob <= 1.0:
            raise ValueError(f"spurious_prob must be in [0, 1], "
                             f"got {self.spurious_prob}")


@dataclass
class Dataset:
    features: np.ndarray          # [n x d] float64
    labels: np.ndarray            # [n] int64 class ids
    envs: np.ndarray              # [n] int64 environment ids
    env_specs: tuple[EnvSpec, ...]
    _cell_index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.envs = np.ascontiguousarray(self.envs, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be [n x d]")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.envs.shape != (n,):
            raise ValueError("features, labels, envs lengths differ")
        known = {s.env_id for s in self.env_specs}
        present = set(np.unique(self.envs).tolist())
        if not present <= known:
            raise ValueError(f"samples reference unknown env ids {present - known}")
        for arr in (self.features, self.labels, self.envs):
            arr.flags.writeable = False
        # (class, env) -> sorted row indices; sampling hits this constantly
        for c in np.unique(self.labels).tolist():
            for e in present:
                rows = np.nonzero((self.labels == c) & (self.envs == e))[0]
                if rows.size:
                    self._cell_index[(c, e)] = rows

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def class_ids(self):
        return tuple(np.unique(self.labels).tolist())

    def cell(self, class_id, env_id):
        """Row indices of samples with this (class, environment)."""
        return self._cell_index.get((class_id, env_id),
                                    np.empty(0, dtype=np.int64))


@dataclass(frozen=True)
class Episode:
    """One task: an environment-pure support/query split with local labels."""
    support_x: np.ndarray         # [N*K x d]
    support_y: np.ndarray         # [N*K] local labels in [0, N)
    query_x: np.ndarray           # [N*Q x d]
    query_y: np.ndarray           # [N*Q]
    env_id: int
    class_map: tuple[int, ...]    # global class id of each local label


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint base/validation/novel class sets plus their dataset handles.

    Conventional setting: base_dataset is eval_dataset. Cross-domain: base
    classes index base_dataset while validation/novel index eval_dataset, so
    equal ids never collide.
    """
    base_classes: tuple[int, ...]
    validation_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    base_dataset: Dataset
    eval_dataset: Dataset

    @property
    def conventional(self):
        return self.base_dataset is self.eval_dataset


def _unit_sphere(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic(n_classes, per_class_per_env, d_inv, d_sp,
                  sigma_inv, sigma_sp, env_specs, rng_seed):
    """Structural-equation dataset with invariant and spurious feature blocks.

    Per class, one invariant prototype (unit sphere in R^d_inv) and one
    spurious prototype (unit sphere in R^d_sp) are drawn once. A sample of
    class y in environment e is
    ``concat(mu_y + N(0, sigma_inv^2), nu_y' + N(0, sigma_sp^2))`` where
    y' = y with probability p_e and a uniform other class otherwise.
    """
    if d_inv < 1 or d_sp < 1:
        raise ValueError("d_inv and d_sp must be >= 1")
    if not sigma_inv > sigma_sp > 0:
        raise ValueError(f"need sigma_inv > sigma_sp > 0, "
                         f"got {sigma_inv}, {sigma_sp}")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class_per_env < 1:
        raise ValueError("per_class_per_env must be >= 1")
    env_specs = tuple(env_specs)
    if len({s.env_id for s in env_specs}) != len(env_specs):
        raise ValueError("duplicate env ids")
    for s in env_specs:
        if s.spurious_prob is None:
            raise ValueError(f"env {s.env_id} has no spurious_prob")

    rng = np.random.Generator(np.random.PCG64(rng_seed))
    mu = _unit_sphere(rng, n_classes, d_inv)
    nu = _unit_sphere(rng, n_classes, d_sp)

    n_total = n_classes * per_class_per_env * len(env_specs)
    features = np.empty((n_total, d_inv + d_sp))
    labels = np.empty(n_total, dtype=np.int64)
    envs = np.empty(n_total, dtype=np.int64)
    row = 0
    for spec in env_specs:
        for y in range(n_classes):
            x_inv = mu[y] + rng.normal(scale=sigma_inv,
                                       size=(per_class_per_env, d_inv))
            agree = rng.uniform(size=per_class_per_env) < spec.spurious_prob
            others = rng.integers(0, n_classes - 1, size=per_class_per_env)
            others = others + (others >= y)   # uniform over classes != y
            proto_idx = np.where(agree, y, others)
            x_sp = nu[proto_idx] + rng.normal(scale=sigma_sp,
                                              size=(per_class_per_env, d_sp))
            features[row:row + per_class_per_env, :d_inv] = x_inv
            features[row:row + per_class_per_env, d_inv:] = x_sp
            labels[row:row + per_class_per_env] = y
            envs[row:row + per_class_per_env] = spec.env_id
            row += per_class_per_env
    return Dataset(features, labels, envs, env_specs)


class CsvFormatError(ValueError):
    def __init__(self, path, line_no, detail):
        super().__init__(f"{path}:{line_no}: {detail}")
        self.line_no = line_no


def write_csv(dataset, path):
    """Rows of ``class_id,env_id,f1,...,fd``; floats print losslessly."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(dataset.n_samples):
            feats = ",".join(repr(float(v)) for v in dataset.features[i])
            fh.write(f"{dataset.labels[i]},{dataset.envs[i]},{feats}\n")


def load_csv(path):
    """Read a dataset written in the CSV format above.

    Environment specs are inferred from the distinct env ids; their
    generating probabilities are unknown and recorded as None.
    """
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise CsvFormatError(path, line_no,
                                     "need class_id,env_id and >= 1 feature")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise CsvFormatError(
                    path, line_no,
                    f"ragged row: {len(parts)} fields, expected {width}")
            try:
                label = int(parts[0])
                env = int(parts[1])
            except ValueError:
                raise CsvFormatError(path, line_no,
                                     f"non-integer class/env id in {parts[:2]}")
            try:
                feats = [float(v) for v in parts[2:]]
            except ValueError:
                raise CsvFormatError(path, line_no, "non-numeric feature value")
            rows.append((label, env, feats))
    if not rows:
        raise CsvFormatError(path, 0, "empty file")
    labels = np.array([r[0] for r in rows], dtype=np.int64)
    envs = np.array([r[1] for r in rows], dtype=np.int64)
    features = np.array([r[2] for r in rows])
    specs = tuple(EnvSpec(int(e), None) for e in np.unique(envs))
    return Dataset(features, labels, envs, specs)


class SamplingError(ValueError):
    pass


def sample_episode(dataset, split, env_id, n_way, k_shot, q_query, rng):
    """Draw one environment-pure N-way K-shot episode.

    Classes come without replacement from `split`; per class, K+Q samples
    come without replacement from the (class, env) cell; the first K are
    support, the rest query. Local labels follow class draw order.
    """
    classes = sorted(split)
    usable = [c for c in classes if dataset.cell(c, env_id).size >= k_shot + q_query]
    if len(usable) < n_way:
        short = [c for c in classes if c not in usable]
        raise SamplingError(
            f"need {n_way} classes with >= {k_shot + q_query} samples in env "
            f"{env_id}, have {len(usable)}; deficient cells: "
            f"{[(c, env_id) for c in short[:5]]}")
    chosen = rng.choice(np.asarray(usable, dtype=np.int64), size=n_way,
                        replace=False)
    sup_x, qry_x = [], []
    for c in chosen:
        cell = dataset.cell(int(c), env_id)
        picked = rng.choice(cell, size=k_shot + q_query, replace=False)
        sup_x.append(dataset.features[picked[:k_shot]])
        qry_x.append(dataset.features[picked[k_shot:]])
    support_y = np.repeat(np.arange(n_way), k_shot)
    query_y = np.repeat(np.arange(n_way), q_query)
    return Episode(
        support_x=np.concatenate(sup_x),
        support_y=support_y,
        query_x=np.concatenate(qry_x),
        query_y=query_y,
        env_id=int(env_id),
        class_map=tuple(int(c) for c in chosen),
    )


def make_split(base_dataset, eval_dataset, fractions, rng_seed):
    """Partition classes into base/validation/novel sets.

    Conventional (base_dataset is eval_dataset): one class pool is shuffled
    and cut by `fractions` (base, validation, novel; must sum to 1).
    Cross-domain: base takes every base_dataset class; validation/novel
    partition eval_dataset's classes in the proportion of fractions[1:].
    """
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or any(x < 0 for x in f):
        raise ValueError(f"fractions must be 3 nonnegative values, got {f}")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    if base_dataset is eval_dataset:
        if abs(sum(f) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(f)}")
        pool = np.asarray(base_dataset.class_ids, dtype=np.int64)
        order = rng.permutation(pool)
        n = pool.size
        n_base = int(round(f[0] * n))
        n_val = int(round(f[1] * n))
        if n_base + n_val > n:
            n_val = n - n_base
        base = order[:n_base]
        val = order[n_base:n_base + n_val]
        novel = order[n_base + n_val:]
    else:
        base = np.asarray(base_dataset.class_ids, dtype=np.int64)
        pool = np.asarray(eval_dataset.class_ids, dtype=np.int64)
        order = rng.permutation(pool)
        rest = f[1] + f[2]
        n_val = int(round((f[1] / rest if rest > 0 else 0.0) * pool.size))
        val = order[:n_val]
        novel = order[n_val:]
    spec = SplitSpec(
        base_classes=tuple(sorted(int(c) for c in base)),
        validation_classes=tuple(sorted(int(c) for c in val)),
        novel_classes=tuple(sorted(int(c) for c in novel)),
        base_dataset=base_dataset,
        eval_dataset=eval_dataset,
    )
    if base_dataset is eval_dataset:
        parts = (set(spec.base_classes), set(spec.validation_classes),
                 set(spec.novel_classes))
        for i in range(3):
            for j in range(i + 1, 3):
                if parts[i] & parts[j]:
                    raise ValueError(f"class {min(parts[i] & parts[j])} "
                                     f"appears in two split parts")
    return spec
