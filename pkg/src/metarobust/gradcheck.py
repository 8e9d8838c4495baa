"""Finite-difference verification suite behind the `gradcheck` subcommand.

Every check pits reverse-mode gradients against central differences computed
from forward values only, so a broken backward rule cannot hide. Probe points
re-sample until no relu pre-activation sits within 1e-3 of its kink.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import meta, nn, tasks

PRIMITIVE_RTOL = 1e-4
META_RTOL = 1e-3


def _scalarize(graph, nid):
    """Reduce any node to a scalar via a fixed weighted sum (keeps the check
    sensitive to every output coordinate)."""
    shape = graph.shape(nid)
    if shape == ():
        return nid
    w = np.arange(1, int(np.prod(shape)) + 1, dtype=np.float64).reshape(shape)
    w /= w.sum()
    return ad.reduce_sum(graph, ad.mul(graph, nid, graph.constant(w)))


def _primitive_cases(rng):
    """(name, build(graph, x_node), point) triples, one per primitive."""
    v23 = rng.normal(size=(2, 3))
    pos = rng.uniform(0.5, 2.0, size=(2, 3))

    def pair_case(op_build, x_shape, other):
        def build(g, x):
            return op_build(g, x, g.constant(other))
        return build

    cases = [
        ("add", pair_case(ad.add, (2, 3), rng.normal(size=(2, 3))), v23),
        ("sub", pair_case(ad.sub, (2, 3), rng.normal(size=(2, 3))), v23),
        ("mul", pair_case(ad.mul, (2, 3), rng.normal(size=(2, 3))), v23),
        ("div", pair_case(ad.div, (2, 3), rng.uniform(0.5, 2.0, size=(2, 3))), v23),
        ("smul", lambda g, x: ad.smul(g, x, -1.7), v23),
        ("matmul", pair_case(lambda g, a, b: ad.matmul(g, a, b),
                             (2, 3), rng.normal(size=(3, 4))), v23),
        ("matmul_t", pair_case(lambda g, a, b: ad.matmul(g, a, b, tb=True),
                               (2, 3), rng.normal(size=(4, 3))), v23),
        ("relu", lambda g, x: ad.relu(g, x),
         np.sign(rng.normal(size=(2, 3))) * rng.uniform(0.1, 1.0, size=(2, 3))),
        ("exp", lambda g, x: ad.exp(g, x), v23 * 0.5),
        ("log", lambda g, x: ad.log(g, x), pos),
        ("square", lambda g, x: ad.square(g, x), v23),
        ("sum", lambda g, x: ad.reduce_sum(g, x), v23),
        ("sum_axis", lambda g, x: ad.reduce_sum(g, x, axis=1), v23),
        ("mean", lambda g, x: ad.reduce_mean(g, x), v23),
        ("mean_axis", lambda g, x: ad.reduce_mean(g, x, axis=0), v23),
        ("sum_sq", lambda g, x: ad.sum_sq(g, x), v23),
        ("broadcast", lambda g, x: ad.broadcast_to(
            g, ad.reshape(g, x, (2, 1)), (2, 4)), rng.normal(size=2)),
        ("reshape", lambda g, x: ad.reshape(g, x, (3, 2)), v23),
        ("concat", pair_case(lambda g, a, b: ad.concat(g, [a, b], axis=1),
                             (2, 3), rng.normal(size=(2, 3))), v23),
        ("slice", lambda g, x: ad.slice_(g, x, 1, 1, 5),
         rng.normal(size=(2, 6))),
        ("log_softmax", lambda g, x: ad.log_softmax(g, x), v23),
        ("composite", pair_case(
            lambda g, a, b: ad.reduce_mean(
                g, ad.relu(g, ad.matmul(g, ad.exp(g, ad.smul(g, a, 0.3)), b))),
            (2, 3), rng.normal(size=(3, 3))), rng.normal(size=(2, 3)) + 0.2),
    ]
    return cases


def check_primitive(name, build, point, rtol=PRIMITIVE_RTOL):
    shape = point.shape

    def f(flat):
        g = ad.Graph()
        x = g.input(flat.reshape(shape), requires_grad=True)
        out = _scalarize(g, build(g, x))
        (grad_x,) = ad.grad(g, out, [x])
        return float(g.value(out)), grad_x.ravel()

    return ad.finite_diff_check(f, point.ravel(), rtol=rtol)


def _mlp_loss_fn(layer_sizes, x, y):
    def f(flat):
        params = nn.MlpParams.unflatten(flat, layer_sizes)
        g = ad.Graph()
        pnodes = nn.enter_params(g, params)
        loss = nn.cross_entropy(g, nn.forward(g, pnodes, x), y)
        grads = ad.grad(g, loss.node, nn.param_node_list(pnodes))
        return float(g.value(loss.node)), np.concatenate([a.ravel() for a in grads])
    return f


def _relu_margin_ok(params, xs, threshold=1e-3):
    """True when every hidden pre-activation is safely away from relu's kink
    for every probe input (finite differences would straddle it otherwise)."""
    h = np.asarray(xs)
    for w, b in params.layers[:-1]:
        pre = h @ w.T + b
        if np.abs(pre).min() < threshold:
            return False
        h = np.maximum(pre, 0.0)
    return True


def sample_mlp_case(layer_sizes, n_samples, seed):
    """Seeded (params, x, y) with relu margins respected; re-samples on a
    kink hit."""
    for attempt in range(100):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [seed, attempt])))
        params = nn.init_mlp(layer_sizes, np.random.SeedSequence(
            [seed, attempt, 1]))
        x = rng.normal(size=(n_samples, layer_sizes[0]))
        y = rng.integers(0, layer_sizes[-1], size=n_samples)
        if _relu_margin_ok(params, x):
            return params, x, y
    raise RuntimeError("could not sample a kink-free probe point")


def check_mlp_loss(seed=0, rtol=PRIMITIVE_RTOL):
    layer_sizes = (4, 6, 3)
    params, x, y = sample_mlp_case(layer_sizes, 8, seed)
    return ad.finite_diff_check(_mlp_loss_fn(layer_sizes, x, y),
                                params.flatten(), rtol=rtol)


def _meta_case(seed, lambda_pen, algo="rml"):
    """A tiny two-environment meta-learning problem (<= 50 parameters)."""
    specs = (tasks.EnvSpec(0, 0.9), tasks.EnvSpec(1, 0.8))
    dataset = tasks.gen_synthetic(
        n_classes=4, per_class_per_env=8, d_inv=2, d_sp=2,
        sigma_inv=0.5, sigma_sp=0.1, env_specs=specs,
        rng_seed=np.random.SeedSequence([seed, 7]))
    config = meta.MetaConfig(envs=specs, alpha=0.05, eta=0.01,
                             lambda_pen=lambda_pen, inner_steps=3,
                             n_way=2, k_shot=2, q_query=4, meta_batch=1,
                             algo=algo)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 8])))
    episodes = [[tasks.sample_episode(dataset, dataset.class_ids, spec.env_id,
                                      config.n_way, config.k_shot,
                                      config.q_query, rng)]
                for spec in specs]
    layer_sizes = (4, 4, 2)   # 4*4+4 + 4*2+2 = 30 parameters
    return layer_sizes, episodes, config


def meta_objective_fn(layer_sizes, episodes, config):
    n_wrt = 2 * (len(layer_sizes) - 1)

    def f(flat):
        params = nn.MlpParams.unflatten(flat, layer_sizes)
        g = ad.Graph()
        obj = meta.meta_objective(params, episodes, config, g)
        # meta_objective enters theta first, so its leaves are the first
        # requires-grad leaves on the tape, in flatten() order
        wrt = [nid for nid, node in enumerate(g.nodes)
               if node.op == "leaf" and node.requires_grad][:n_wrt]
        grads = ad.grad(g, obj, wrt)
        return float(g.value(obj)), np.concatenate([a.ravel() for a in grads])

    return f


def check_meta_gradient(seed=0, lambda_pen=1.0, rtol=META_RTOL):
    """Full second-order meta-gradient vs. finite differences.

    Two environments, three inner steps, a 30-parameter MLP. Re-samples the
    seeded case if any probe would cross a relu kink during adaptation.
    """
    for attempt in range(50):
        layer_sizes, episodes, config = _meta_case(seed + attempt, lambda_pen)
        params = nn.init_mlp(layer_sizes,
                             np.random.SeedSequence([seed + attempt, 9]))
        f = meta_objective_fn(layer_sizes, episodes, config)
        if _meta_margins_ok(params, episodes, config):
            return ad.finite_diff_check(f, params.flatten(), rtol=rtol)
    raise RuntimeError("could not sample a kink-free meta case")


def _meta_margins_ok(params, episodes, config, threshold=1e-3):
    """Check relu margins at every point the adapted forward passes touch."""
    graph = ad.Graph()
    for env_eps in episodes:
        for ep in env_eps:
            adapted = meta.inner_adapt(params, (ep.support_x, ep.support_y),
                                       config.alpha, config.inner_steps,
                                       graph, track_higher_order=False)
            stages = [params.layers]
            stages.append([(graph.value(w), graph.value(b)) for w, b in adapted])
            for layers in stages:
                for x in (ep.support_x, ep.query_x):
                    h = x
                    for w, b in layers[:-1]:
                        pre = h @ w.T + b
                        if np.abs(pre).min() < threshold:
                            return False
                        h = np.maximum(pre, 0.0)
    return True


def run_suite(log=print):
    """Run every check; returns True when all pass."""
    rng = np.random.Generator(np.random.PCG64(20240601))
    ok = True
    for name, build, point in _primitive_cases(rng):
        report = check_primitive(name, build, point)
        ok &= report.passed
        log(f"primitive {name:12s}: {report}")
    report = check_mlp_loss()
    ok &= report.passed
    log(f"mlp cross-entropy    : {report}")
    for lam in (0.0, 1.0):
        report = check_meta_gradient(lambda_pen=lam)
        ok &= report.passed
        log(f"meta-gradient l={lam:.0f}  : {report}")
    return ok
