import csv
import dataclasses
import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from dldmf.autodiff import grad_weights
from dldmf.errors import ConfigurationError, TrainingDiverged
from dldmf.model import PdeParams
from dldmf.networks import NetworkWeights
from dldmf.physics_cdr import DomainSpec, initial_condition, sample_collocation
from dldmf.trainer import (
    TrainConfig,
    _objective,
    compute_losses,
    make_mu_set,
    run_optimizer,
    total_loss,
    train,
    training_steps,
)

from conftest import flat

DOM = DomainSpec()
TINY = TrainConfig(steps=5, n_residual=8, n_initial=8, n_boundary=4, mu_batch=2, log_every=1)
MUS = [PdeParams(b) for b in (1.0, 2.0, 3.0)]


def constant_output(model, value):
    last = len(model.nets["decoder"].layers) - 1
    layers = [l if i < last else dataclasses.replace(l, matrix=jnp.zeros_like(l.matrix), bias=jnp.full_like(l.bias, value))
              for i, l in enumerate(model.nets["decoder"].layers)]
    nets = dict(model.nets)
    nets["decoder"] = NetworkWeights("decoder", layers)
    return model.with_nets(nets)


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_constant_prediction_losses(model, value):
    # constant fields are roots of the residual and trivially periodic; only L_u survives
    batch = sample_collocation(DOM, MUS, (16, 12, 8), 0)
    l_u, l_f, l_b = compute_losses(constant_output(model, value), batch, DOM)
    assert l_f == 0.0 and l_b == 0.0
    g = initial_condition(batch.initial_x, "gaussian")
    expected = np.mean([np.mean((value - g[batch.initial_inst == i]) ** 2) for i in range(3)])
    assert l_u == pytest.approx(expected, rel=1e-13)


def test_residual_only_weights(model):
    batch = sample_collocation(DOM, MUS, (16, 12, 8), 1)
    parts = compute_losses(model, batch, DOM)
    assert total_loss(parts, (0.0, 1.0, 0.0)) == parts[1]
    assert total_loss(parts, (2.0, 3.0, 0.5)) == pytest.approx(2 * parts[0] + 3 * parts[1] + 0.5 * parts[2], rel=1e-15)


def test_zero_learning_rate_keeps_weights_bit_identical(model):
    cfg = dataclasses.replace(TINY, lr=0.0)
    out, _ = run_optimizer(model, cfg, DOM, MUS)
    assert flat(out.nets).tobytes() == flat(model.nets).tobytes()


def test_fixed_batch_descends(model):
    batch = sample_collocation(DOM, MUS[:2], (16, 12, 8), 3)
    cfg = dataclasses.replace(TINY, steps=200, lr=3e-3)
    out, recs = run_optimizer(model, cfg, DOM, MUS[:2], fixed_batch=batch)
    assert sum(compute_losses(out, batch, DOM)) < recs[0].total


def test_same_seed_same_run(model):
    a = run_optimizer(model, TINY, DOM, MUS)
    b = run_optimizer(model, TINY, DOM, MUS)
    assert flat(a[0].nets).tobytes() == flat(b[0].nets).tobytes()
    assert [r.total for r in a[1]] == [r.total for r in b[1]]
    c = run_optimizer(model, dataclasses.replace(TINY, seed=9), DOM, MUS)
    assert [r.total for r in a[1]] != [r.total for r in c[1]]


def test_nan_weight_reports_divergence(model):
    dec = model.nets["decoder"]
    layers = list(dec.layers)
    layers[0] = dataclasses.replace(layers[0], bias=layers[0].bias.at[0].set(jnp.nan))
    nets = dict(model.nets)
    nets["decoder"] = NetworkWeights("decoder", layers)
    with pytest.raises(TrainingDiverged) as err:
        run_optimizer(model.with_nets(nets), TINY, DOM, MUS)
    assert err.value.step == 1


def test_mu_set_examples():
    assert [m.beta for m in make_mu_set({"beta": (1.0, 5.0)}, 5, ["beta"])] == [1, 2, 3, 4, 5]
    s = make_mu_set({"beta": (1.0, 5.0), "nu": (0.0, 1.0)}, 2, ["beta", "nu"])
    assert [(m.beta, m.nu, m.rho) for m in s] == [(1, 0, 0), (1, 1, 0), (5, 0, 0), (5, 1, 0)]
    assert len(make_mu_set({c: (1.0, 2.0) for c in ("beta", "nu", "rho")}, 3, ["beta", "nu", "rho"])) == 27
    assert TrainConfig().mu_set() == [PdeParams(b) for b in (1.0, 2.0, 3.0, 4.0, 5.0)]
    with pytest.raises(ConfigurationError):
        make_mu_set({}, 3, [])
    with pytest.raises(ConfigurationError):
        TrainConfig(w1=0, w2=0, w3=0)


def test_small_mu_set_uses_every_instance(model):
    seen = []
    cfg = dataclasses.replace(TINY, mu_batch=8, steps=2)

    import dldmf.trainer as tr

    orig = tr.sample_collocation

    def spy(domain, mus, counts, rng):
        seen.append(tuple(m.beta for m in mus))
        return orig(domain, mus, counts, rng)

    tr.sample_collocation = spy
    try:
        run_optimizer(model, cfg, DOM, MUS)
    finally:
        tr.sample_collocation = orig
    assert seen == [(1.0, 2.0, 3.0)] * 2


def test_gradient_matches_finite_differences(model, rng):
    batch = sample_collocation(DOM, MUS[:2], (8, 6, 4), 4)
    arrays = {k: jnp.asarray(v) for k, v in batch.arrays().items()}
    n = training_steps(model, DOM)
    weights = jnp.asarray([1.0, 1.0, 1.0])

    def loss(nets):
        return _objective(nets, model, arrays, weights, n, "gaussian", (DOM.x_min, DOM.x_max))[0]

    grads = grad_weights(loss, model.nets)
    leaves, treedef = jax.tree.flatten(model.nets)
    gl = jax.tree.leaves(grads)
    for li in rng.choice(len(leaves), 6, replace=False):
        idx = tuple(int(rng.integers(s)) for s in leaves[li].shape)
        h = 1e-6
        up = leaves[:li] + [leaves[li].at[idx].add(h)] + leaves[li + 1:]
        dn = leaves[:li] + [leaves[li].at[idx].add(-h)] + leaves[li + 1:]
        fd = (loss(jax.tree.unflatten(treedef, up)) - loss(jax.tree.unflatten(treedef, dn))) / (2 * h)
        assert abs(float(gl[li][idx]) - float(fd)) <= 1e-5 * max(abs(float(fd)), 1e-4)


def test_log_file_columns(model, tmp_path):
    path = tmp_path / "log.csv"
    _, recs = train(model, dataclasses.replace(TINY, log_every=2), DOM, MUS, log_path=path)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["step", "L_u", "L_f", "L_b", "total", "seconds"]
    assert [int(r["step"]) for r in rows] == [1, 2, 4, 5]
    for r in rows:
        rec = recs[int(r["step"]) - 1]
        assert float(r["total"]) == rec.total
        assert math.isclose(float(r["L_u"]) + float(r["L_f"]) + float(r["L_b"]), rec.total, rel_tol=1e-14)


def test_static_model_trains(static_model):
    out, recs = run_optimizer(static_model, TINY, DOM, MUS)
    assert len(recs) == TINY.steps
    assert not np.array_equal(flat(out.nets), flat(static_model.nets))


def test_checkpoints_written(model, tmp_path):
    cfg = dataclasses.replace(TINY, steps=4, checkpoint_every=2)
    run_optimizer(model, cfg, DOM, MUS, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step_000002.ckpt", "step_000004.ckpt"]
