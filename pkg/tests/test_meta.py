import numpy as np
import pytest

from metarobust import autodiff as ad
from metarobust import gradcheck, meta, nn, tasks


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def toy_dataset(seed=0, n_classes=6, per=24):
    specs = (tasks.EnvSpec(0, 0.9), tasks.EnvSpec(1, 0.8))
    return tasks.gen_synthetic(n_classes, per, 3, 3, 0.5, 0.1, specs, seed)


def toy_config(**overrides):
    base = dict(envs=(tasks.EnvSpec(0, 0.9), tasks.EnvSpec(1, 0.8)),
                alpha=0.05, eta=0.01, lambda_pen=1.0, inner_steps=2,
                n_way=3, k_shot=2, q_query=4, meta_batch=2, algo="rml")
    base.update(overrides)
    return meta.MetaConfig(**base)


def toy_episodes(dataset, config, seed=1):
    rng = rng_for(seed)
    return [[tasks.sample_episode(dataset, dataset.class_ids, env.env_id,
                                  config.n_way, config.k_shot, config.q_query,
                                  rng)
             for _ in range(config.meta_batch)]
            for env in config.envs]


def make_sampler(dataset, config):
    def sampler(env, rng):
        return tasks.sample_episode(dataset, dataset.class_ids, env.env_id,
                                    config.n_way, config.k_shot,
                                    config.q_query, rng)
    return sampler


def flatten_node_values(graph, pairs):
    return np.concatenate([graph.value(nid).ravel()
                           for pair in pairs for nid in pair])


# --- inner adaptation: closed-form 1-parameter oracle
# f(x) = theta*x, squared loss. One GD step: theta' = theta - 2*alpha*x*(theta*x - y)

def one_param_inner(theta0, alpha, steps, x_tr, y_tr, track=True):
    g = ad.Graph()
    theta = g.input(np.asarray(theta0), requires_grad=True)

    def loss_fn(graph, params):
        pred = ad.smul(graph, params[0], x_tr)
        return ad.square(graph, ad.sub(graph, pred,
                                       graph.constant(np.asarray(y_tr))))

    adapted = meta.adapt_params(g, [theta], loss_fn, alpha, steps, track)
    return g, theta, adapted[0]


def test_inner_adapt_one_param_closed_form():
    g, _, theta_p = one_param_inner(1.0, 0.1, 1, 1.0, 0.0)
    assert float(g.value(theta_p)) == pytest.approx(0.8, rel=1e-15)


def test_inner_adapt_zero_alpha_is_identity_bitwise():
    p = nn.init_mlp((3, 4, 2), 5)
    rng = rng_for(2)
    x = rng.normal(size=(4, 3))
    y = rng.integers(0, 2, size=4)
    g = ad.Graph()
    adapted = meta.inner_adapt(p, (x, y), 0.0, 3, g, track_higher_order=True)
    for (w, b), (wn, bn) in zip(p.layers, adapted):
        assert g.value(wn).tobytes() == w.tobytes()
        assert g.value(bn).tobytes() == b.tobytes()


def test_inner_adapt_two_steps_composes():
    g2, _, two = one_param_inner(1.0, 0.1, 2, 1.0, 0.0)
    g1, _, one = one_param_inner(1.0, 0.1, 1, 1.0, 0.0)
    # reuse the same graph for the second step starting at one step's result
    def loss_fn(graph, params):
        pred = ad.smul(graph, params[0], 1.0)
        return ad.square(graph, pred)
    again = meta.adapt_params(g1, [one], loss_fn, 0.1, 1, True)[0]
    assert float(g2.value(two)) == pytest.approx(float(g1.value(again)),
                                                 rel=1e-15)


def test_inner_adapt_zero_steps_returns_same_nodes():
    p = nn.init_mlp((3, 4, 2), 5)
    g = ad.Graph()
    adapted = meta.inner_adapt(p, (np.zeros((2, 3)), np.array([0, 1])),
                               0.05, 0, g, track_higher_order=True)
    flat = nn.param_node_list(adapted)
    assert all(g.nodes[nid].op == "leaf" for nid in flat)


def test_inner_adapt_reports_nonfinite_step():
    p = nn.init_mlp((2, 2), 0)
    x = np.array([[np.inf, -np.inf]])
    y = np.array([0])
    g = ad.Graph()
    with pytest.raises(meta.NonFiniteLossError) as err:
        meta.inner_adapt(p, (x, y), 0.05, 3, g, track_higher_order=False)
    assert err.value.step == 0
    assert "step 0" in str(err.value)


# --- meta-gradient oracle (acceptance criterion 3 shares this)

def one_param_meta_gradient(theta0=1.0, alpha=0.1, x_tr=1.0, y_tr=0.0,
                            x_val=2.0, y_val=0.0):
    g, theta, theta_p = one_param_inner(theta0, alpha, 1, x_tr, y_tr)
    pred = ad.smul(g, theta_p, x_val)
    val = ad.square(g, ad.sub(g, pred, g.constant(np.asarray(y_val))))
    (mg,) = ad.grad(g, val, [theta])
    return float(mg), float(g.value(theta_p))


def test_meta_gradient_matches_closed_form_exactly():
    mg, theta_p = one_param_meta_gradient()
    # d/dtheta (theta' x_v - y_v)^2 = 2 x_v (theta' x_v - y_v) (1 - 2 alpha x_t^2)
    assert theta_p == pytest.approx(0.8, rel=1e-15)
    assert mg == pytest.approx(5.12, rel=1e-12)


def test_meta_step_equivalent_update_one_param():
    # eta = 1: new theta = 1 - 5.12 = -4.12
    mg, _ = one_param_meta_gradient()
    assert 1.0 - 1.0 * mg == pytest.approx(-4.12, rel=1e-12)


# --- irm penalty

def test_penalty_zero_on_constant_logits():
    p = nn.MlpParams((3, 2), [(np.zeros((2, 3)), np.zeros(2))])
    g = ad.Graph()
    pnodes = nn.enter_params(g, p)
    pen = meta.irm_penalty(pnodes, (np.ones((4, 3)), np.array([0, 1, 0, 1])), g)
    assert float(g.value(pen)) == 0.0


def test_penalty_hand_computed_binary_case():
    # one sample, logits (z, 0) with z = 1, label 0:
    # dR/domega = z * (sigmoid(z) - 1); penalty = its square
    p = nn.MlpParams((1, 2), [(np.array([[1.0], [0.0]]), np.zeros(2))])
    g = ad.Graph()
    pnodes = nn.enter_params(g, p)
    pen = meta.irm_penalty(pnodes, (np.array([[1.0]]), np.array([0])), g)
    sigmoid = 1.0 / (1.0 + np.exp(-1.0))
    assert float(g.value(pen)) == pytest.approx((sigmoid - 1.0) ** 2, rel=1e-12)
    assert float(g.value(pen)) == pytest.approx(0.07232948812851325, rel=1e-10)


def test_penalty_nonnegative_on_random_batches():
    rng = rng_for(8)
    p = nn.init_mlp((4, 5, 3), 2)
    for _ in range(100):
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, 3, size=6)
        g = ad.Graph()
        pen = meta.irm_penalty(nn.enter_params(g, p), (x, y), g)
        assert float(g.value(pen)) >= 0.0


def test_penalty_gradient_wrt_params_passes_fd():
    layer_sizes = (3, 4, 2)
    params, x, y = gradcheck.sample_mlp_case(layer_sizes, 6, seed=4)

    def f(flat):
        pp = nn.MlpParams.unflatten(flat, layer_sizes)
        g = ad.Graph()
        pnodes = nn.enter_params(g, pp)
        pen = meta.irm_penalty(pnodes, (x, y), g)
        grads = ad.grad(g, pen, nn.param_node_list(pnodes))
        return float(g.value(pen)), np.concatenate([a.ravel() for a in grads])

    report = ad.finite_diff_check(f, params.flatten(), rtol=1e-3)
    assert report.passed, str(report)


def test_violation_is_square_root_of_penalty():
    rng = rng_for(9)
    p = nn.init_mlp((4, 5, 3), 6)
    batches = [(rng.normal(size=(5, 4)), rng.integers(0, 3, size=5))
               for _ in range(3)]
    violations = meta.irm_constraint_violation(p, batches)
    for (x, y), v in zip(batches, violations):
        g = ad.Graph()
        pen = float(g.value(meta.irm_penalty(nn.enter_params(g, p), (x, y), g)))
        assert v >= 0.0
        assert v ** 2 == pytest.approx(pen, rel=1e-12)


def test_violation_zero_on_constant_logits():
    p = nn.MlpParams((3, 2), [(np.zeros((2, 3)), np.zeros(2))])
    batches = [(np.ones((4, 3)), np.array([0, 1, 0, 1]))]
    assert meta.irm_constraint_violation(p, batches) == [0.0]


# --- meta objective

def test_objective_lambda_zero_equals_plain_sum_of_task_losses():
    ds = toy_dataset()
    cfg = toy_config(algo="rml", lambda_pen=0.0)
    eps = toy_episodes(ds, cfg)
    p = nn.init_mlp((6, 5, 3), 3)
    g = ad.Graph()
    obj = meta.meta_objective(p, eps, cfg, g)
    total = 0.0
    for env_eps in eps:
        for ep in env_eps:
            g2 = ad.Graph()
            adapted = meta.inner_adapt(p, (ep.support_x, ep.support_y),
                                       cfg.alpha, cfg.inner_steps, g2, True)
            logits = nn.forward(g2, adapted, ep.query_x)
            total += float(g2.value(nn.cross_entropy(g2, logits,
                                                     ep.query_y).node))
    assert float(g.value(obj)) == pytest.approx(total, rel=1e-12)


def test_objective_doubles_with_duplicated_environment():
    ds = toy_dataset()
    cfg2 = toy_config(algo="rml")
    eps = toy_episodes(ds, cfg2)
    single = toy_config(envs=(tasks.EnvSpec(0, 0.9),), algo="rml")
    g1 = ad.Graph()
    obj1 = meta.meta_objective(nn.init_mlp((6, 5, 3), 3), [eps[0]], single, g1)
    # same episode list under both environment slots
    twin_cfg = toy_config(envs=(tasks.EnvSpec(0, 0.9), tasks.EnvSpec(0, 0.9)),
                          algo="rml")
    g2 = ad.Graph()
    obj2 = meta.meta_objective(nn.init_mlp((6, 5, 3), 3),
                               [eps[0], eps[0]], twin_cfg, g2)
    assert float(g2.value(obj2)) == pytest.approx(2 * float(g1.value(obj1)),
                                                  rel=1e-14)


def test_objective_additive_over_disjoint_environment_lists():
    ds = toy_dataset()
    cfg = toy_config(algo="rml")
    eps = toy_episodes(ds, cfg)
    p = nn.init_mlp((6, 5, 3), 3)
    g = ad.Graph()
    both = float(g.value(meta.meta_objective(p, eps, cfg, g)))
    parts = 0.0
    for env_spec, env_eps in zip(cfg.envs, eps):
        sub = toy_config(envs=(env_spec,), algo="rml")
        gs = ad.Graph()
        parts += float(gs.value(meta.meta_objective(p, [env_eps], sub, gs)))
    assert both == pytest.approx(parts, rel=1e-12)


def test_objective_at_least_validation_loss_when_lambda_positive():
    ds = toy_dataset()
    cfg_pen = toy_config(algo="rml", lambda_pen=2.0)
    cfg_plain = toy_config(algo="rml", lambda_pen=0.0)
    eps = toy_episodes(ds, cfg_pen)
    p = nn.init_mlp((6, 5, 3), 3)
    g1 = ad.Graph()
    g2 = ad.Graph()
    with_pen = float(g1.value(meta.meta_objective(p, eps, cfg_pen, g1)))
    plain = float(g2.value(meta.meta_objective(p, eps, cfg_plain, g2)))
    assert with_pen >= plain


def test_objective_requires_nonempty_environment_lists():
    ds = toy_dataset()
    cfg = toy_config()
    eps = toy_episodes(ds, cfg)
    g = ad.Graph()
    with pytest.raises(ValueError):
        meta.meta_objective(nn.init_mlp((6, 5, 3), 3), [eps[0], []], cfg, g)


# --- second-order correctness of the full meta-gradient

@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_meta_gradient_passes_fd(lam):
    report = gradcheck.check_meta_gradient(seed=1, lambda_pen=lam)
    assert report.passed, str(report)


def test_meta_step_gradient_consistent_with_meta_objective():
    ds = toy_dataset()
    cfg = toy_config(algo="rml", eta=1.0)
    eps = toy_episodes(ds, cfg)
    p = nn.init_mlp((6, 5, 3), 3)
    g = ad.Graph()
    obj = meta.meta_objective(p, eps, cfg, g)
    n_wrt = 2 * len(p.layers)
    wrt = [nid for nid, node in enumerate(g.nodes)
           if node.op == "leaf" and node.requires_grad][:n_wrt]
    grads = ad.grad(g, obj, wrt)

    calls = iter([ep for env_eps in eps for ep in env_eps])
    state = meta.MetaState(p, 0, rng_for(0))
    new_state = meta.meta_step(state, lambda env, rng: next(calls), cfg)
    flat_old = p.flatten()
    flat_new = new_state.params.flatten()
    flat_grad = np.concatenate([a.ravel() for a in grads])
    assert np.allclose(flat_old - cfg.eta * flat_grad, flat_new, rtol=1e-12,
                       atol=1e-14)


# --- meta_step behaviors

def test_rml_lambda_zero_bitwise_equals_maml_over_ten_steps():
    ds = toy_dataset()
    p0 = nn.init_mlp((6, 5, 3), 3)
    results = {}
    for algo in ("maml", "rml"):
        cfg = toy_config(algo=algo, lambda_pen=0.0)
        state = meta.MetaState(p0, 0, rng_for(42))
        sampler = make_sampler(ds, cfg)
        for _ in range(10):
            state = meta.meta_step(state, sampler, cfg)
        results[algo] = state.params.flatten()
    assert results["maml"].tobytes() == results["rml"].tobytes()


def test_eta_zero_leaves_params_unchanged():
    ds = toy_dataset()
    cfg = toy_config(algo="maml", eta=0.0)
    p0 = nn.init_mlp((6, 5, 3), 3)
    state = meta.meta_step(meta.MetaState(p0, 0, rng_for(0)),
                           make_sampler(ds, cfg), cfg)
    assert state.params.flatten().tobytes() == p0.flatten().tobytes()
    assert state.step_count == 1


def test_fomaml_differs_from_maml_in_general():
    ds = toy_dataset()
    p0 = nn.init_mlp((6, 5, 3), 3)
    outs = {}
    for algo in ("maml", "fomaml"):
        cfg = toy_config(algo=algo, lambda_pen=0.0)
        state = meta.meta_step(meta.MetaState(p0, 0, rng_for(11)),
                               make_sampler(ds, cfg), cfg)
        outs[algo] = state.params.flatten()
    assert np.abs(outs["maml"] - outs["fomaml"]).max() > 1e-9


def test_zero_inner_steps_collapses_maml_fomaml_and_multitask():
    ds = toy_dataset()
    p0 = nn.init_mlp((6, 5, 3), 3)
    outs = {}
    for algo in ("maml", "fomaml"):
        cfg = toy_config(algo=algo, lambda_pen=0.0, inner_steps=0)
        state = meta.meta_step(meta.MetaState(p0, 0, rng_for(13)),
                               make_sampler(ds, cfg), cfg)
        outs[algo] = state.params.flatten()
    assert np.allclose(outs["maml"], outs["fomaml"], rtol=1e-12, atol=1e-15)
    # plain multi-task training: gradient of summed query losses at theta
    cfg = toy_config(algo="maml", lambda_pen=0.0, inner_steps=0)
    eps = [[tasks.sample_episode(ds, ds.class_ids, env.env_id, cfg.n_way,
                                 cfg.k_shot, cfg.q_query, rng_for(13))
            for _ in range(cfg.meta_batch)] for env in cfg.envs]
    g = ad.Graph()
    pnodes = nn.enter_params(g, p0)
    total = None
    for env_eps in eps:
        for ep in env_eps:
            loss = nn.cross_entropy(g, nn.forward(g, pnodes, ep.query_x),
                                    ep.query_y).node
            total = loss if total is None else ad.add(g, total, loss)
    grads = ad.grad(g, total, nn.param_node_list(pnodes))
    manual = p0.flatten() - cfg.eta * np.concatenate([a.ravel() for a in grads])
    assert np.allclose(outs["maml"], manual, rtol=1e-12, atol=1e-15)


def test_meta_step_deterministic_under_shared_seed():
    ds = toy_dataset()
    cfg = toy_config(algo="rml")
    p0 = nn.init_mlp((6, 5, 3), 3)
    runs = []
    for _ in range(2):
        state = meta.MetaState(p0, 0, rng_for(77))
        for _ in range(3):
            state = meta.meta_step(state, make_sampler(ds, cfg), cfg)
        runs.append(state.params.flatten())
    assert runs[0].tobytes() == runs[1].tobytes()


# --- reptile

def test_reptile_full_interpolation_reaches_adapted_params():
    ds = toy_dataset()
    cfg = toy_config(algo="reptile", eta=1.0, meta_batch=1,
                     envs=(tasks.EnvSpec(0, 0.9),))
    p0 = nn.init_mlp((6, 5, 3), 3)
    episode = tasks.sample_episode(ds, ds.class_ids, 0, cfg.n_way, cfg.k_shot,
                                   cfg.q_query, rng_for(3))
    state = meta.reptile_step(meta.MetaState(p0, 0, rng_for(0)),
                              lambda env, rng: episode, cfg)
    g = ad.Graph()
    adapted = meta.inner_adapt(p0, (episode.support_x, episode.support_y),
                               cfg.alpha, cfg.inner_steps, g, False)
    expected = np.concatenate([g.value(nid).ravel()
                               for pair in adapted for nid in pair])
    assert np.allclose(state.params.flatten(), expected, rtol=1e-15)


def test_reptile_eta_zero_is_identity():
    ds = toy_dataset()
    cfg = toy_config(algo="reptile", eta=0.0)
    p0 = nn.init_mlp((6, 5, 3), 3)
    state = meta.reptile_step(meta.MetaState(p0, 0, rng_for(0)),
                              make_sampler(ds, cfg), cfg)
    assert state.params.flatten().tobytes() == p0.flatten().tobytes()


def test_reptile_one_param_closed_form():
    # theta = 1, one step alpha=0.1 on (x=1, y=0): theta' = 0.8
    # eta = 0.5: new theta = 1 + 0.5 * (0.8 - 1) = 0.9
    g, theta, theta_p = one_param_inner(1.0, 0.1, 1, 1.0, 0.0, track=False)
    new_theta = 1.0 + 0.5 * (float(g.value(theta_p)) - 1.0)
    assert new_theta == pytest.approx(0.9, rel=1e-15)


def test_meta_step_dispatches_reptile():
    ds = toy_dataset()
    cfg = toy_config(algo="reptile")
    p0 = nn.init_mlp((6, 5, 3), 3)
    s1 = meta.meta_step(meta.MetaState(p0, 0, rng_for(5)),
                        make_sampler(ds, cfg), cfg)
    s2 = meta.reptile_step(meta.MetaState(p0, 0, rng_for(5)),
                           make_sampler(ds, cfg), cfg)
    assert s1.params.flatten().tobytes() == s2.params.flatten().tobytes()


# --- adapt_and_eval

def test_untrained_model_is_at_chance_level():
    ds = toy_dataset(n_classes=8, per=30)
    cfg = toy_config(n_way=5, k_shot=1, q_query=10)
    p = nn.init_mlp((6, 5, 5), 1)
    rng = rng_for(21)
    accs = [meta.adapt_and_eval(
        p, tasks.sample_episode(ds, ds.class_ids, i % 2, 5, 1, 10, rng), cfg)
        for i in range(100)]
    assert abs(np.mean(accs) - 0.2) < 0.05


def test_overfit_on_separable_toy_reaches_perfect_accuracy():
    x = np.array([[2.0, 0.0], [2.1, 0.1], [-2.0, 0.0], [-2.2, -0.1]])
    y = np.array([0, 0, 1, 1])
    episode = tasks.Episode(support_x=x, support_y=y, query_x=x, query_y=y,
                            env_id=0, class_map=(0, 1))
    cfg = meta.MetaConfig(envs=(tasks.EnvSpec(0, 0.9),), alpha=0.5,
                          inner_steps=60, n_way=2, k_shot=2, q_query=2,
                          algo="maml")
    p = nn.init_mlp((2, 4, 2), 0)
    assert meta.adapt_and_eval(p, episode, cfg) == 1.0


def test_adapt_and_eval_is_pure():
    ds = toy_dataset()
    cfg = toy_config()
    p = nn.init_mlp((6, 5, 3), 2)
    before = p.flatten().tobytes()
    ep = tasks.sample_episode(ds, ds.class_ids, 0, cfg.n_way, cfg.k_shot,
                              cfg.q_query, rng_for(6))
    a1 = meta.adapt_and_eval(p, ep, cfg)
    a2 = meta.adapt_and_eval(p, ep, cfg)
    assert a1 == a2
    assert p.flatten().tobytes() == before


# --- config validation

def test_config_rejects_bad_algo():
    with pytest.raises(ValueError):
        toy_config(algo="protonet")


def test_config_rejects_negative_lambda():
    with pytest.raises(ValueError):
        toy_config(lambda_pen=-0.5)


def test_config_requires_environments():
    with pytest.raises(ValueError):
        toy_config(envs=())
