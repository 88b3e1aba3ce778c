import numpy as np
import pytest
from _gradcheck import max_rel_error, numeric_grads

from prosub.models import (
    DualModel,
    SarduSelector,
    evaluate_mse,
    keep_top,
    pipeline_pass,
    reconstruct,
    run_prosub,
    sardu_forward,
    score_batch,
    train_epoch,
    train_sardu,
)
from prosub.nas import ArchSpec, GreedyTuner, SearchSpace
from prosub.nn import AdamState, DenseLayer, Mlp, ShapeError, l2_loss
from prosub.subsample import RfeSchedule, replay_removals

TINY = ArchSpec(1, 1, (8, 8), (8, 8), 0.0)


def tiny_model(N=4, seed=0, arch=TINY):
    return DualModel.build(N, arch, np.random.default_rng(seed))


def states(model):
    return (AdamState.for_params(model.scorer.parameters()),
            AdamState.for_params(model.reconstructor.parameters()))


def zero_output(net):
    net.layers[-1].weights[:] = 0.0
    net.layers[-1].bias[:] = 0.0


def test_zero_final_layer_scores_one():
    m = tiny_model()
    zero_output(m.scorer)
    np.testing.assert_array_equal(score_batch(m, np.random.default_rng(1).normal(size=(5, 4))), 1.0)


def test_scores_strictly_inside_range():
    m = tiny_model(seed=2)
    s = score_batch(m, 10 * np.random.default_rng(3).normal(size=(50, 4)))
    assert np.all((s > 0) & (s < 2))


def test_score_is_row_mean():
    # one input, one linear-to-sigmoid layer: per-sample score 2*sigmoid(w * x)
    scorer = Mlp([DenseLayer(np.array([[1.0]]), np.zeros(1), "scaled_sigmoid2")])
    recon = Mlp([DenseLayer(np.array([[1.0]]), np.zeros(1), "linear")])
    m = DualModel(scorer, recon, TINY)
    z = [np.log(0.4 / 1.6), np.log(0.8 / 1.2)]  # 2*sigmoid(z) = 0.4, 0.8
    np.testing.assert_allclose(score_batch(m, np.array(z).reshape(2, 1)), [0.6])


def test_shape_errors():
    m = tiny_model()
    with pytest.raises(ShapeError):
        score_batch(m, np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        pipeline_pass(m, np.zeros((3, 5)), np.ones(5), np.zeros(5), 1.0)


def test_identity_pipeline_has_zero_loss():
    N = 3
    scorer = Mlp([DenseLayer(np.zeros((N, N)), np.zeros(N), "scaled_sigmoid2")])
    recon = Mlp([DenseLayer(np.eye(N), np.zeros(N), "linear")])
    m = DualModel(scorer, recon, TINY)
    x = np.random.default_rng(0).normal(size=(20, N))
    loss, _ = train_epoch(m, x, np.ones(N), np.zeros(N), 1.0, states(m), batch_size=64)
    assert loss == 0.0


def test_zero_mask_loss_is_mean_square():
    m = tiny_model(seed=5)
    x = np.random.default_rng(6).normal(size=(30, 4))
    loss, _ = train_epoch(m, x, np.zeros(4), np.zeros(4), 0.5, states(m), batch_size=64)
    assert loss == pytest.approx(np.mean(x**2), rel=1e-14)


def test_train_epoch_is_deterministic():
    x = np.random.default_rng(7).normal(size=(40, 4))

    def run():
        m = tiny_model(seed=8)
        st = states(m)
        return [train_epoch(m, x, np.ones(4), np.zeros(4), 0.7, st, 16, np.random.default_rng(1))[0]
                for _ in range(3)]

    assert run() == run()


@pytest.mark.parametrize("a", [0.0, 0.4, 1.0])
def test_pipeline_gradients(a):
    rng = np.random.default_rng(11)
    m = tiny_model(N=5, seed=12)
    x = rng.normal(size=(7, 5))
    mask = np.array([1.0, 0.6, 0.0, 1.0, 1.0])
    prior = rng.uniform(0.2, 1.8, size=5)
    p = pipeline_pass(m, x, mask, prior, a)

    def loss():
        return pipeline_pass(m, x, mask, prior, a, need_grads=False).loss

    assert max_rel_error(p.scorer_grads + p.reconstructor_grads,
                         numeric_grads(loss, m.scorer.parameters() + m.reconstructor.parameters())) < 1e-5


def test_scorer_parameters_move_the_loss_iff_alpha_positive():
    rng = np.random.default_rng(13)
    m = tiny_model(N=4, seed=14)
    x = rng.normal(size=(6, 4))
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    prior = np.ones(4)
    with_a = pipeline_pass(m, x, mask, prior, 0.5)
    assert any(np.any(g != 0) for g in with_a.scorer_grads)
    without = pipeline_pass(m, x, mask, prior, 0.0)
    assert all(np.all(g == 0) for g in without.scorer_grads)


def test_masked_out_column_does_not_reach_reconstruction():
    rng = np.random.default_rng(15)
    m = tiny_model(N=5, seed=16)
    x = rng.normal(size=(9, 5))
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    score = rng.uniform(0.1, 1.9, size=5)
    y = x.copy()
    y[:, 1] = rng.permutation(y[:, 1])
    y[:, 4] = rng.normal(size=9)
    np.testing.assert_array_equal(reconstruct(m.reconstructor, x, mask, score),
                                  reconstruct(m.reconstructor, y, mask, score))
    # during training at alpha = 0 the score is the fixed prior, so x_hat is unchanged too
    px = pipeline_pass(m, x, mask, score, 0.0, need_grads=False)
    py = pipeline_pass(m, y, mask, score, 0.0, need_grads=False)
    np.testing.assert_array_equal(px.score, py.score)


def test_run_prosub_conserves_and_replays():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(120, 8)) ** 2
    sched = RfeSchedule(8, 3, 4, 2, E=5, E_d=2)
    res = run_prosub(x[:100], x[100:], sched, arch=TINY, seed=1, batch_size=32)
    assert np.count_nonzero(res.mask == 0) == 5
    assert len(res.selected) == 3
    np.testing.assert_array_equal(replay_removals(8, [s.removal for s in res.steps]), res.mask)
    for s in res.steps:
        assert len(s.train_curve) == len(s.val_curve) == 5
        assert np.all(np.isfinite(s.train_curve))


def test_run_prosub_same_seed_same_result():
    x = np.random.default_rng(2).normal(size=(80, 6)) ** 2
    sched = RfeSchedule(6, 2, 3, 2, E=5, E_d=2)
    a = run_prosub(x[:60], x[60:], sched, arch=TINY, seed=3, batch_size=16)
    b = run_prosub(x[:60], x[60:], sched, arch=TINY, seed=3, batch_size=16)
    assert a.train_trace == b.train_trace
    assert a.ema.values.tobytes() == b.ema.values.tobytes()


def test_run_prosub_with_tuner_records_one_trial_per_step():
    x = np.random.default_rng(4).normal(size=(80, 6)) ** 2
    space = SearchSpace(units=(4, 8))
    tuner = GreedyTuner(space, seed=0)
    res = run_prosub(x[:60], x[60:], RfeSchedule(6, 2, 4, 2, E=5, E_d=2), tuner=tuner, batch_size=16)
    assert len(tuner.history) == 4
    assert [s.arch for s in res.steps] == [t.arch for t in tuner.history]


def test_run_prosub_rejects_inconsistent_warm_start():
    x = np.ones((10, 4))
    with pytest.raises(ValueError):
        run_prosub(x, x, RfeSchedule(5, 2, 3, 2, E=5, E_d=2), arch=TINY)
    with pytest.raises(ValueError):
        run_prosub(x, x, RfeSchedule(4, 2, 3, 2, E=5, E_d=2))


def test_keep_top_rules():
    assert keep_top(np.array([0.1, 0.2, 0.3, 0.4]), 2) == (2, 3)
    assert keep_top(np.ones(5), 3) == (0, 1, 2)


def test_sardu_clamps_exactly_n_minus_m():
    rng = np.random.default_rng(5)
    sel = SarduSelector(Mlp.build([6, 8, 6], rng, output_activation="scaled_sigmoid2"), 2)
    recon = Mlp.build([6, 8, 6], rng)
    p = sardu_forward(sel, recon, rng.normal(size=(10, 6)))
    assert np.count_nonzero(p.weights == 0) == 4
    assert len(p.selected) == 2


def test_sardu_frozen_selector_selects_consistently():
    rng = np.random.default_rng(6)
    sel = SarduSelector(Mlp.build([6, 8, 6], rng, output_activation="scaled_sigmoid2"), 3)
    recon = Mlp.build([6, 8, 6], rng)
    batch = rng.normal(size=(10, 6))
    assert sardu_forward(sel, recon, batch).selected == sardu_forward(sel, recon, batch).selected


def test_sardu_gradients():
    rng = np.random.default_rng(7)
    sel = SarduSelector(Mlp.build([5, 6, 5], rng, output_activation="scaled_sigmoid2"), 3)
    recon = Mlp.build([5, 6, 5], rng)
    x = rng.normal(size=(8, 5))
    p = sardu_forward(sel, recon, x, need_grads=True)

    def loss():
        return sardu_forward(sel, recon, x).loss

    params = sel.selector_net.parameters() + recon.parameters()
    assert max_rel_error(p.selector_grads + p.reconstructor_grads, numeric_grads(loss, params)) < 1e-5


def test_train_sardu_shapes():
    x = np.random.default_rng(8).normal(size=(60, 6)) ** 2
    res = train_sardu(x[:50], x[50:], 2, ArchSpec(1, 1, (8, 8), (8, 8), 0.2), epochs=4,
                      batch_size=16)
    assert len(res.train_curve) == 4 and len(res.selected) == 2
    assert evaluate_mse(res.reconstructor, res.mask, res.weights, x[50:]) == pytest.approx(
        res.val_curve[-1])


def test_evaluate_mse_matches_manual():
    m = tiny_model(seed=9)
    x = np.random.default_rng(10).normal(size=(12, 4))
    mask, score = np.array([1.0, 0.0, 1.0, 1.0]), np.array([0.5, 1.0, 1.5, 1.0])
    manual = l2_loss(m.reconstructor(x * mask * score), x)
    assert evaluate_mse(m, mask, score, x) == manual
