import json
import math

import numpy as np
import pytest

from conftest import central_diff, perturbed_params, rel_err
from eata.engine import (
    AdaptConfig,
    Engine,
    entropy_grad_logits,
    SgdState,
    evaluate,
    run_stream,
    sgd_step,
    weighted_entropy_loss,
)
from eata.errors import ConfigurationError, ContractError, DivergenceError
from eata.fisher import FisherDiag, fisher_for
from eata.network import (
    BATCH_STATS,
    RUNNING_STATS,
    AdaptableView,
    ArchSpec,
    TrainHyper,
    forward,
    init_params,
    train_base,
)
from eata.selection import EmaTracker, SelectionConfig, select_batch
from eata.shiftgen import ShiftSpec, SourceSpec, make_id_samples, make_source, make_stream


@pytest.fixture(scope="module")
def toy():
    spec = SourceSpec(class_count=3, input_dim=6, per_class=120, seed=1)
    train, test = make_source(spec)
    params = train_base(ArchSpec(6, (8, 8), 3), train.features, train.labels,
                        TrainHyper(lr=0.01, epochs=3, seed=1))
    fisher = fisher_for(params, make_id_samples(spec, 64).features)
    noisy = make_stream(test, [ShiftSpec("gaussian-noise", 5, 1)], batch_size=16, seed=1)
    scaled = make_stream(test, [ShiftSpec("feature-scale", 3, 1)], batch_size=16, seed=2)
    return params, fisher, noisy, scaled, test


def test_sgd_step_examples():
    p = init_params(ArchSpec(2, (1,), 2), 0)
    view = AdaptableView(p)
    state = SgdState(np.zeros(2))
    sgd_step(view, [1.0, 0.0], state, lr=1.0, momentum=0.0)
    assert view.values()[0] == view.origin[0] - 1.0

    view.assign([0.0, 0.0])
    state = SgdState(np.zeros(2))
    for _ in range(2):
        sgd_step(view, [1.0, 1.0], state, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(view.values(), [-0.29, -0.29], rtol=0, atol=1e-15)

    before, v = view.values(), state.velocity.copy()
    sgd_step(view, [0.0, 0.0], state, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(view.values(), before - 0.1 * 0.9 * v, rtol=0, atol=1e-15)


def test_sgd_step_errors():
    view = AdaptableView(init_params(ArchSpec(2, (1,), 2), 0))
    with pytest.raises(DivergenceError) as exc:
        sgd_step(view, [np.nan, 0.0], SgdState(np.zeros(2)), 0.1, 0.9, batch_index=7)
    assert exc.value.index == 7 and "7" in str(exc.value)
    with pytest.raises(ContractError):
        sgd_step(view, [1.0], SgdState(np.zeros(2)), 0.1, 0.9)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AdaptConfig(method="tent", beta=1.0)
    with pytest.raises(ConfigurationError):
        AdaptConfig(method="eata", beta=0.0)
    with pytest.raises(ConfigurationError):
        AdaptConfig(method="sgd")
    with pytest.raises(ConfigurationError):
        AdaptConfig(window_len=1)
    with pytest.raises(ConfigurationError):
        AdaptConfig(reset_policy="sometimes")
    assert AdaptConfig(method="eta").beta == 0.0
    assert AdaptConfig(selection={"e0": 0.5}).selection == SelectionConfig(e0=0.5)


def test_eata_needs_fisher(toy):
    params = toy[0]
    with pytest.raises(ConfigurationError):
        Engine(params.copy(), AdaptConfig(method="eata"))
    with pytest.raises(ContractError):
        Engine(params.copy(), AdaptConfig(method="eata"), FisherDiag(np.ones(3), 1))


def test_source_never_changes(toy):
    params, _, noisy, _, test = toy
    p = params.copy()
    m = Engine(p, AdaptConfig(method="source", reset_policy="lifelong")).run_stream(noisy)
    assert p.equals(params)
    assert m.n_backward_samples == 0 and m.n_updates == 0
    assert m.n_forward_samples == m.n_skipped_samples == len(noisy)
    preds = forward(params, noisy.features, RUNNING_STATS)[0].argmax(axis=1)
    assert m.stream_accuracy == np.mean(preds == noisy.evaluation_labels())


def test_tent_uses_every_sample(toy):
    params, _, noisy, _, _ = toy
    m = run_stream(params.copy(), noisy, AdaptConfig(method="tent", lr=0.01))
    assert m.n_backward_samples == m.n_forward_samples == len(noisy)
    assert m.n_updates == noisy.n_batches


def test_eta_nothing_selected_is_a_no_op(toy):
    params, _, noisy, _, _ = toy
    p = params.copy()
    cfg = AdaptConfig(method="eta", lr=1.0, reset_policy="lifelong", selection=SelectionConfig(e0=1e-300))
    m = Engine(p, cfg).run_stream(noisy)
    assert p.equals(params)
    assert m.n_backward_samples == 0 and m.n_skipped_samples == len(noisy)


def test_eta_backward_below_tent(toy):
    params, _, noisy, _, _ = toy
    tent = run_stream(params.copy(), noisy, AdaptConfig(method="tent", lr=0.01))
    eta = run_stream(params.copy(), noisy, AdaptConfig(method="eta", lr=0.01))
    assert eta.n_backward_samples < tent.n_backward_samples
    assert eta.n_backward_samples + eta.n_skipped_samples == len(noisy)


def test_episodic_restores_every_batch(toy):
    params, _, noisy, _, _ = toy
    p = params.copy()
    eng = Engine(p, AdaptConfig(method="tent", lr=0.05, reset_policy="episodic"))
    eng.run_stream(noisy)
    assert p.equals(params)
    assert not eng.state.velocity.any()
    # each batch is predicted by the untouched model
    m = eng.metrics
    for b in noisy.batches():
        preds = forward(params, b.x, BATCH_STATS)[0].argmax(axis=1)
        assert m.batch_accuracy[b.index] == float(noisy.score(b.index, preds).mean())


def test_per_stream_reset_independence(toy):
    params, fisher, noisy, scaled, _ = toy
    for method in ("tent", "eta", "eata"):
        cfg = AdaptConfig(method=method, lr=0.05)
        f = fisher if method == "eata" else None
        eng = Engine(params.copy(), cfg, f)
        eng.run_stream(noisy)
        after_a = eng.run_stream(scaled).to_dict()
        alone = Engine(params.copy(), cfg, f).run_stream(scaled).to_dict()
        assert after_a == alone
        assert eng.params.equals(params)


def test_lifelong_keeps_changes(toy):
    params, _, noisy, _, _ = toy
    p = params.copy()
    Engine(p, AdaptConfig(method="tent", lr=0.05, reset_policy="lifelong")).run_stream(noisy)
    assert not p.equals(params)
    assert p["head.weight"].tobytes() == params["head.weight"].tobytes()
    assert p["block0.bn.running_mean"].tobytes() == params["block0.bn.running_mean"].tobytes()


def test_predict_before_update(toy):
    params, _, noisy, _, _ = toy
    p = params.copy()
    eng = Engine(p, AdaptConfig(method="tent", lr=0.5, reset_policy="lifelong"))
    for b in list(noisy.batches())[:4]:
        expected = forward(p.copy(), b.x, BATCH_STATS)[0].argmax(axis=1)
        before = p.copy()
        got = eng.adapt_batch(b.x)
        assert np.array_equal(got, expected)
        assert not p.equals(before)


def test_one_step_matches_loss_gradient(toy):
    params, fisher, noisy, _, _ = toy
    x = noisy.batch(0).x
    for method, beta in (("tent", None), ("eta", None), ("eata", 3.0)):
        p = params.copy()
        view = AdaptableView(p)
        view.assign(view.values() + 0.01)  # off-origin so the penalty gradient is non-zero
        eng = Engine(p, AdaptConfig(method=method, lr=0.1, beta=beta),
                     fisher if method == "eata" else None, origin=AdaptableView(params).values())
        start = view.values()
        if method == "tent":
            w = np.ones(len(x))
        else:
            w = select_batch(forward(p, x)[0], eng.selection, EmaTracker())[0].weight
        _, grad = weighted_entropy_loss(p, x, w, eng.beta or 0.0, fisher, eng.view.origin)
        eng.adapt_batch(x)
        np.testing.assert_allclose(view.values(), start - 0.1 * grad, rtol=0, atol=1e-14)


@pytest.mark.parametrize("beta", [0.0, 2.5])
def test_loss_finite_difference(beta):
    p = perturbed_params(3)
    x = np.random.default_rng(3).normal(size=(10, 5))
    w = np.array([0, 1.5, 2.0, 0, 1.1, 3.0, 0, 0, 1.2, 2.2])
    view = AdaptableView(p)
    origin = view.values() - np.random.default_rng(4).normal(0, 0.1, view.size)
    fisher = FisherDiag(np.random.default_rng(5).uniform(0, 2, view.size), 10)
    _, grad = weighted_entropy_loss(p, x, w, beta, fisher, origin)
    offset = 0
    for name, size in zip(view.names, view.sizes):
        for j in range(size):
            fd = central_diff(lambda: weighted_entropy_loss(p, x, w, beta, fisher, origin)[0],
                              p[name], j)
            assert rel_err(grad[offset + j], fd) <= 1e-4
        offset += size


def test_loss_value_formula():
    p = perturbed_params(4)
    x = np.random.default_rng(4).normal(size=(6, 5))
    w = np.array([0.0, 2.0, 1.5, 0.0, 1.2, 0.0])
    logits, _ = forward(p, x)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    ent = [-math.fsum(q * math.log(q) for q in row) for row in probs]
    expected = math.fsum(w[i] * ent[i] for i in range(6)) / 3
    loss, _ = weighted_entropy_loss(p, x, w)
    assert loss == pytest.approx(expected, rel=1e-12)
    assert weighted_entropy_loss(p, x, np.zeros(6))[0] == 0.0


def test_auto_beta_is_capped(toy):
    params, fisher, noisy, _, _ = toy
    for lr in (1e-4, 0.05, 10.0):
        eng = Engine(params.copy(), AdaptConfig(method="eata", lr=lr), fisher)
        m = eng.run_stream(noisy)
        assert 0 < m.beta <= 0.5 * 1.9 / (lr * fisher.omega.max()) * (1 + 1e-12)
    eng = Engine(params.copy(), AdaptConfig(method="eata", lr=0.05, beta=4.0), fisher)
    assert eng.run_stream(noisy).beta == 4.0


def test_auto_beta_uncapped_value(toy):
    params, fisher, noisy, _, _ = toy
    eng = Engine(params.copy(), AdaptConfig(method="eata", lr=1e-6), fisher)
    m = eng.run_stream(noisy)
    logits = forward(params, noisy.batch(0).x)[0]
    ent = entropy_grad_logits(logits)[0].mean()
    assert m.beta == pytest.approx(ent / (fisher.omega.sum() * 0.01), rel=1e-12)


def test_divergence_is_reported(toy):
    params, _, noisy, _, _ = toy
    with pytest.raises(DivergenceError):
        with np.errstate(all="ignore"):
            run_stream(params.copy(), noisy, AdaptConfig(method="tent", lr=np.inf))


@pytest.mark.parametrize("L", [32, 64])
def test_window_mode(toy, L):
    params, fisher, noisy, _, _ = toy
    short = noisy.head(100)
    for method in ("tent", "eata"):
        m = run_stream(params.copy(), short, AdaptConfig(method=method, lr=0.01, window_len=L),
                       fisher if method == "eata" else None)
        assert m.n_forward_samples == len(short)
        assert m.n_backward_samples + m.n_skipped_samples == len(short)
        assert 0.0 <= m.stream_accuracy <= 1.0


def test_window_identical_samples(toy):
    params = toy[0]
    eng = Engine(params.copy(), AdaptConfig(method="tent", lr=0.1, window_len=4, reset_policy="lifelong"))
    sample = np.ones(6)
    for _ in range(10):
        pred = eng.adapt_single(sample)
        assert 0 <= pred < 3
    assert np.all(np.isfinite(eng.view.values()))


def test_window_needs_config(toy):
    eng = Engine(toy[0].copy(), AdaptConfig(method="tent"))
    with pytest.raises(ConfigurationError):
        eng.adapt_single(np.ones(6))


def test_clean_accuracy_modes(toy):
    params, fisher, noisy, _, test = toy
    clean = (test.features, test.labels)
    src = run_stream(params.copy(), noisy, AdaptConfig(method="source"), clean=clean)
    running = evaluate(params, *clean, bn_mode=RUNNING_STATS)
    assert src.clean_accuracy == running == src.clean_readapt_accuracy
    p = params.copy()
    eng = Engine(p, AdaptConfig(method="eata", lr=0.05, reset_policy="lifelong"), fisher)
    m = eng.run_stream(noisy, clean)
    frozen = p.copy()
    velocity = eng.state.velocity.copy()
    assert m.clean_accuracy == evaluate(p, *clean)
    assert eng.readapt_accuracy(*clean) == m.clean_readapt_accuracy
    assert p.equals(frozen) and np.array_equal(eng.state.velocity, velocity)


def test_metrics_document(toy):
    params, fisher, noisy, _, test = toy
    m = run_stream(params.copy(), noisy, AdaptConfig(method="eata", lr=0.05), fisher,
                   clean=(test.features, test.labels))
    doc = json.loads(json.dumps(m.to_dict(), allow_nan=False))
    assert doc["n_backward_samples"] <= doc["n_forward_samples"] == len(noisy)
    assert doc["per_shift"]["gaussian-noise-5"]["total"] == len(noisy)
    assert len(doc["batch_accuracy"]) == noisy.n_batches


def test_trace_records(toy):
    params, _, noisy, _, _ = toy
    eng = Engine(params.copy(), AdaptConfig(method="eta", lr=0.01))
    eng.trace = []
    m = eng.run_stream(noisy)
    assert len(eng.trace) == noisy.n_batches
    assert sum(r["n_active"] for r in eng.trace) == m.n_backward_samples
    assert all("accuracy" in r for r in eng.trace)
