"""Meta-learning algorithms: inner-loop adaptation, the per-environment
invariance penalty, the meta-objective, and the outer updates.

Four algorithms share the machinery:

* ``maml``    -- second-order: outer gradients flow through the inner loop.
* ``fomaml``  -- first-order: inner updates are detached, outer gradients are
  taken at the adapted parameters.
* ``reptile`` -- interpolation toward adapted parameters; no outer gradients.
* ``rml``     -- maml plus, per environment, a penalty on the squared norm of
  the gradient of the validation risk with respect to a fixed scalar
  classifier fixed at 1.0 scaling the logits. The penalty is attached to
  each environment's validation loss on the adapted parameters over the
  query set; with weight 0 the objective reduces exactly to maml's.

Environment losses and penalties are summed (not averaged); the outer
learning rate absorbs scale. Inner adaptation is full-batch gradient descent
on the support set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .tasks import EnvSpec

ALGORITHMS = ("maml", "fomaml", "reptile", "rml")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite loss during adaptation at inner step {step}")
        self.step = step


class NonFiniteGradError(RuntimeError):
    def __init__(self, env_index, task_index):
        super().__init__(f"non-finite meta-gradient from environment "
                         f"{env_index}, task {task_index}")
        self.env_index = env_index
        self.task_index = task_index


@dataclass(frozen=True)
class MetaConfig:
    envs: tuple[EnvSpec, ...]
    alpha: float = 0.05
    eta: float = 0.01
    lambda_pen: float = 1.0
    inner_steps: int = 3
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    meta_batch: int = 4
    algo: str = "rml"

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}, got {self.algo!r}")
        if self.alpha < 0 or self.eta < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.lambda_pen < 0:
            raise ValueError(f"lambda_pen must be >= 0, got {self.lambda_pen}")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if min(self.n_way, self.k_shot, self.q_query, self.meta_batch) < 1:
            raise ValueError("n_way, k_shot, q_query, meta_batch must be >= 1")
        if not self.envs:
            raise ValueError("need at least one training environment")
        object.__setattr__(self, "envs", tuple(self.envs))


@dataclass
class MetaState:
    params: nn.MlpParams
    step_count: int
    rng: np.random.Generator


@dataclass
class StepStats:
    """Per-step diagnostics for training curves."""
    train_loss: float       # mean post-adaptation query cross-entropy
    mean_penalty: float     # mean invariance penalty value (diagnostic)


def adapt_params(graph, param_ids, loss_fn, alpha, steps, track_higher_order):
    """Gradient-descent adaptation of arbitrary parameter nodes.

    ``loss_fn(graph, param_ids) -> scalar node`` is re-evaluated each step on
    the current parameters. With track_higher_order the updated parameters
    are built from differentiable gradient nodes, so an outer objective can
    differentiate through the whole adaptation; otherwise each step's
    gradients are detached and the updates become fresh leaves.
    """
    params = list(param_ids)
    for step in range(steps):
        loss = loss_fn(graph, params)
        if not np.isfinite(graph.value(loss)):
            raise NonFiniteLossError(step)
        if track_higher_order:
            grads = ad.grad(graph, loss, params, create_graph=True)
            params = [ad.sub(graph, p, ad.smul(graph, g, alpha))
                      for p, g in zip(params, grads)]
        else:
            grads = ad.grad(graph, loss, params, create_graph=False)
            params = [graph.input(graph.value(p) - alpha * g, requires_grad=True)
                      for p, g in zip(params, grads)]
    return params


def _support_loss_fn(graph, support_x, support_y):
    x_node = graph.constant(support_x)

    def loss_fn(g, pairs_flat):
        pairs = list(zip(pairs_flat[0::2], pairs_flat[1::2]))
        logits = nn.forward(g, pairs, x_node)
        return nn.cross_entropy(g, logits, support_y).node

    return loss_fn


def inner_adapt(theta, support, alpha, steps, graph, track_higher_order):
    """Adapt MlpParams on a support set; returns adapted (w, b) node pairs.

    The unadapted parameters enter `graph` as fresh leaves; theta itself is
    never mutated.
    """
    support_x, support_y = support
    if len(support_x) == 0:
        raise ValueError("support set is empty")
    pnodes = nn.enter_params(graph, theta)
    flat = nn.param_node_list(pnodes)
    adapted = adapt_params(graph, flat,
                           _support_loss_fn(graph, support_x, support_y),
                           alpha, steps, track_higher_order)
    return list(zip(adapted[0::2], adapted[1::2]))


def _penalty_from_logits(graph, logits, labels):
    """Invariance penalty given an existing logits node.

    Introduces the fixed scalar classifier (value 1.0) scaling the logits,
    takes the risk's gradient with respect to it as a differentiable node,
    and squares it.
    """
    omega = graph.input(np.asarray(1.0), requires_grad=True)
    shape = graph.shape(logits)
    scaled = ad.mul(graph, ad.broadcast_to(graph, omega, shape), logits)
    risk = nn.cross_entropy(graph, scaled, labels).node
    g_omega = ad.grad(graph, risk, [omega], create_graph=True)[0]
    return ad.square(graph, g_omega)


def irm_penalty(theta_prime, batch, graph):
    """Squared norm of the risk gradient at the fixed unit logit scaling.

    ``theta_prime`` is a list of (weight, bias) node pairs (typically the
    output of inner_adapt); ``batch`` is (x, labels). Zero exactly when the
    unit scaling is optimal for this batch, e.g. on constant logits.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("penalty batch is empty")
    logits = nn.forward(graph, theta_prime, x)
    return _penalty_from_logits(graph, logits, y)


def _check_episode(episode, env_spec):
    if episode.env_id != env_spec.env_id:
        raise ValueError(f"episode from env {episode.env_id} listed under "
                         f"env {env_spec.env_id}")
    if len(episode.support_x) == 0:
        raise ValueError("episode has empty support")


def _build_task(graph, pnodes, episode, config, with_penalty, track):
    """Adapted query loss (and optional penalty node) for one episode."""
    adapted = adapt_params(
        graph, nn.param_node_list(pnodes),
        _support_loss_fn(graph, episode.support_x, episode.support_y),
        config.alpha, config.inner_steps, track)
    adapted_pairs = list(zip(adapted[0::2], adapted[1::2]))
    logits = nn.forward(graph, adapted_pairs, episode.query_x)
    loss = nn.cross_entropy(graph, logits, episode.query_y).node
    pen = None
    if with_penalty:
        pen = _penalty_from_logits(graph, logits, episode.query_y)
    return adapted_pairs, logits, loss, pen


def meta_objective(theta, episodes_by_env, config, graph):
    """Scalar objective node over per-environment episode lists.

    episodes_by_env[i] holds episodes of config.envs[i]. For each episode the
    parameters are adapted on its support; the objective sums adapted query
    losses per environment and, for rml with positive weight, adds
    lambda times the per-episode invariance penalties. Built with
    higher-order tracking so it is differentiable w.r.t. theta's leaves.
    """
    if len(episodes_by_env) != len(config.envs):
        raise ValueError(f"{len(episodes_by_env)} episode lists for "
                         f"{len(config.envs)} environments")
    with_penalty = config.algo == "rml" and config.lambda_pen > 0
    pnodes = nn.enter_params(graph, theta)
    total = None
    for env_spec, episodes in zip(config.envs, episodes_by_env):
        if not episodes:
            raise ValueError(f"environment {env_spec.env_id} has no episodes")
        for episode in episodes:
            _check_episode(episode, env_spec)
            _, _, loss, pen = _build_task(graph, pnodes, episode, config,
                                          with_penalty, track=True)
            term = loss
            if pen is not None:
                term = ad.add(graph, term,
                              ad.smul(graph, pen, config.lambda_pen))
            total = term if total is None else ad.add(graph, total, term)
    return total


def _zero_grads(theta):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in theta.layers]


def _apply_update(theta, grads, lr):
    new_layers = [(w - lr * gw, b - lr * gb)
                  for (w, b), (gw, gb) in zip(theta.layers, grads)]
    return nn.MlpParams(theta.layer_sizes, new_layers)


def _sample_batch(task_sampler, config, rng):
    return [[task_sampler(env, rng) for _ in range(config.meta_batch)]
            for env in config.envs]


def meta_step(state, task_sampler, config):
    """One outer update; returns the new MetaState.

    ``task_sampler(env_spec, rng) -> Episode``. Episodes are drawn env by env
    in config order, meta_batch per environment, and gradients accumulate in
    that fixed order, so results do not depend on any internal scheduling.
    """
    new_state, _ = meta_step_with_stats(state, task_sampler, config)
    return new_state


def meta_step_with_stats(state, task_sampler, config):
    """meta_step plus per-step StepStats (used for training curves)."""
    if config.algo == "reptile":
        return reptile_step_with_stats(state, task_sampler, config)
    episodes_by_env = _sample_batch(task_sampler, config, state.rng)
    theta = state.params
    track = config.algo in ("maml", "rml")
    with_penalty = config.algo == "rml" and config.lambda_pen > 0
    totals = _zero_grads(theta)
    losses = []
    penalties = []
    for ei, (env_spec, episodes) in enumerate(zip(config.envs, episodes_by_env)):
        for ti, episode in enumerate(episodes):
            _check_episode(episode, env_spec)
            graph = ad.Graph()
            pnodes = nn.enter_params(graph, theta)
            try:
                adapted, logits, loss, pen = _build_task(
                    graph, pnodes, episode, config, with_penalty, track)
            except NonFiniteLossError:
                raise NonFiniteGradError(ei, ti)
            obj = loss
            if pen is not None:
                obj = ad.add(graph, obj, ad.smul(graph, pen, config.lambda_pen))
            wrt = nn.param_node_list(pnodes if track else adapted)
            grads = ad.grad(graph, obj, wrt, create_graph=False)
            if any(not np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteGradError(ei, ti)
            for li in range(len(totals)):
                totals[li] = (totals[li][0] + grads[2 * li],
                              totals[li][1] + grads[2 * li + 1])
            losses.append(float(graph.value(loss)))
            if pen is not None:
                penalties.append(float(graph.value(pen)))
            else:
                penalties.append(_penalty_value(graph, logits, episode.query_y))
    new_params = _apply_update(theta, totals, config.eta)
    stats = StepStats(train_loss=float(np.mean(losses)),
                      mean_penalty=float(np.mean(penalties)))
    return MetaState(new_params, state.step_count + 1, state.rng), stats


def _penalty_value(graph, logits, labels):
    """Detached penalty value for diagnostics on non-rml algorithms."""
    pen = _penalty_from_logits(graph, logits, labels)
    return float(graph.value(pen))


def reptile_step(state, task_sampler, config):
    new_state, _ = reptile_step_with_stats(state, task_sampler, config)
    return new_state


def reptile_step_with_stats(state, task_sampler, config):
    """Interpolation update: theta += eta * mean(theta_adapted - theta)."""
    episodes_by_env = _sample_batch(task_sampler, config, state.rng)
    theta = state.params
    deltas = _zero_grads(theta)
    losses = []
    penalties = []
    n_tasks = 0
    for ei, (env_spec, episodes) in enumerate(zip(config.envs, episodes_by_env)):
        for ti, episode in enumerate(episodes):
            _check_episode(episode, env_spec)
            graph = ad.Graph()
            pnodes = nn.enter_params(graph, theta)
            try:
                adapted, logits, loss, _ = _build_task(
                    graph, pnodes, episode, config, with_penalty=False,
                    track=False)
            except NonFiniteLossError:
                raise NonFiniteGradError(ei, ti)
            for li, (w, b) in enumerate(theta.layers):
                dw = graph.value(adapted[li][0]) - w
                db = graph.value(adapted[li][1]) - b
                deltas[li] = (deltas[li][0] + dw, deltas[li][1] + db)
            losses.append(float(graph.value(loss)))
            penalties.append(_penalty_value(graph, logits, episode.query_y))
            n_tasks += 1
    new_layers = [(w + config.eta * dw / n_tasks, b + config.eta * db / n_tasks)
                  for (w, b), (dw, db) in zip(theta.layers, deltas)]
    new_params = nn.MlpParams(theta.layer_sizes, new_layers)
    stats = StepStats(train_loss=float(np.mean(losses)),
                      mean_penalty=float(np.mean(penalties)))
    return MetaState(new_params, state.step_count + 1, state.rng), stats


def adapt_and_eval(theta, episode, config):
    """First-order adaptation on the support set, accuracy on the query set.

    Read-only: theta is entered into a throwaway graph, never modified.
    """
    graph = ad.Graph()
    adapted = inner_adapt(theta, (episode.support_x, episode.support_y),
                          config.alpha, config.inner_steps, graph,
                          track_higher_order=False)
    logits = nn.forward(graph, adapted, episode.query_x)
    return nn.accuracy(graph.value(logits), episode.query_y)


def irm_constraint_violation(theta_prime, per_env_batches):
    """|d risk / d unit-scaling| per environment batch; a read-only
    diagnostic of how far the fixed classifier is from each environment's
    optimum. Square roots of the corresponding penalty values.
    """
    out = []
    for x, y in per_env_batches:
        graph = ad.Graph()
        pnodes = [(graph.constant(w), graph.constant(b))
                  for w, b in theta_prime.layers]
        logits = nn.forward(graph, pnodes, x)
        omega = graph.input(np.asarray(1.0), requires_grad=True)
        scaled = ad.mul(graph, ad.broadcast_to(graph, omega, graph.shape(logits)),
                        logits)
        risk = nn.cross_entropy(graph, scaled, y).node
        g_omega = ad.grad(graph, risk, [omega], create_graph=False)[0]
        out.append(float(np.abs(g_omega)))
    return out
