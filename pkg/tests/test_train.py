import numpy as np
import pytest

from morphlayers import layers, train
from morphlayers.image import windows
from morphlayers.layers import LayerKind, LayerState
from morphlayers.train import AdamState, Network, PlateauState, TrainConfig


def smorph_net(kernel, alpha=0.0, scale=1.0, bias=0.0):
    return Network((LayerState("smorph", kernel, alpha), LayerState("scalebias", scale=scale, bias=bias)))


def test_network_validation():
    sb = LayerState("scalebias")
    sm = LayerState("smorph", np.zeros((3, 3)), 0.0)
    lm = LayerState("lmorph", np.zeros((3, 3)), 0.0)
    with pytest.raises(ValueError):
        Network((sm,))
    with pytest.raises(ValueError):
        Network((sb,))
    with pytest.raises(ValueError):
        Network((sm, lm, sb))
    with pytest.raises(ValueError):
        Network((sm, sm, sm, sb))
    Network((sm, sm, sb))


def test_build_network_initializations():
    p = train.build_network("pconv", 1, seed=0)
    np.testing.assert_array_equal(p.layers[0].kernel, np.ones((7, 7)))
    assert p.layers[0].shape_param == 0.0
    lm = train.build_network("lmorph", 2, seed=0)
    assert all(np.all(l.kernel >= 0) for l in lm.morph_layers)
    assert 0.003 < np.mean(lm.layers[0].kernel) < 0.012  # folded normal mean 0.01*sqrt(2/pi)
    sm = train.build_network("smorph", 1, seed=0)
    assert abs(np.mean(sm.layers[0].kernel)) < 0.004 and 0.006 < np.std(sm.layers[0].kernel) < 0.014
    assert sm.layers[-1].scale == 1.0 and sm.layers[-1].bias == 0.0


def test_identity_smorph_network_is_window_mean(rng):
    f = rng.random((4, 9, 9))
    out = train.network_forward(smorph_net(np.zeros((3, 3))), f).output
    np.testing.assert_allclose(out, windows(f, 3).mean(axis=(-2, -1)), atol=1e-12)


def test_initialized_smorph_close_to_local_mean(rng):
    f = rng.random((3, 28, 28))
    net = train.build_network("smorph", 1, seed=3)
    out = train.network_forward(net, f).output
    assert np.max(np.abs(out - windows(f, 7).mean(axis=(-2, -1)))) < 0.05


def test_two_layer_forward_is_composition(rng):
    f = rng.random((2, 8, 8))
    a = LayerState("lmorph", rng.uniform(0, 0.3, (3, 3)), 5.0)
    b = LayerState("lmorph", rng.uniform(0, 0.3, (3, 3)), -5.0)
    sb = LayerState("scalebias", scale=1.3, bias=-0.2)
    from morphlayers.image import rescale_unit_band
    manual = layers.forward(rescale_unit_band(f), a)
    manual = layers.forward(rescale_unit_band(manual), b)
    manual = layers.forward(manual, sb)
    np.testing.assert_allclose(train.network_forward(Network((a, b, sb)), f).output, manual, rtol=1e-14)


def test_zero_upstream_zero_gradients(rng):
    net = train.build_network("pconv", 2, seed=1, side=3)
    f = rng.random((2, 6, 6))
    cache = train.network_forward(net, f)
    grads, d_in = train.network_backward(net, cache, np.zeros_like(f))
    assert not np.any(d_in)
    for g in grads:
        assert g.d_shape_param == 0 and g.d_scale == 0 and g.d_bias == 0
        assert g.d_kernel is None or not np.any(g.d_kernel)


def test_scale_bias_bias_gradient_is_twice_mean_residual(rng):
    net = smorph_net(np.zeros((1, 1)), scale=0.7, bias=0.1)
    f = rng.random((3, 5, 5))
    target = rng.random(f.shape)
    cache = train.network_forward(net, f)
    _, d_out = train.mse_gradient(cache.output, target)
    grads, _ = train.network_backward(net, cache, d_out)
    assert grads[-1].d_bias == pytest.approx(2 * np.mean(cache.output - target), rel=1e-12)


# Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    params = [np.array([1.0, -2.0]), np.array(3.0)]
    state = AdamState.zeros_like(params)
    new, state2 = train.adam_step(params, [np.zeros(2), np.array(0.0)], state, 0.01)
    for a, b in zip(params, new):
        np.testing.assert_array_equal(a, b)
    assert state2.step == 1


def test_adam_first_step_moves_by_lr():
    # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g/(|g| + eps)
    params = [np.array([0.5, 0.5])]
    new, _ = train.adam_step(params, [np.array([3.0, -0.2])], AdamState.zeros_like(params), 0.01)
    np.testing.assert_allclose(new[0] - params[0], [-0.01, 0.01], rtol=1e-7)


def test_adam_matches_recurrence_over_steps():
    p = np.array([0.0])
    m = v = 0.0
    state = AdamState.zeros_like([p])
    params = [p]
    ref = 0.0
    for t, g in enumerate([1.0, -0.5, 2.0, 0.3], start=1):
        params, state = train.adam_step(params, [np.array([g])], state, 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert params[0][0] == pytest.approx(ref, rel=1e-12)


def test_lmorph_projection_to_nonnegative():
    net = Network((LayerState("lmorph", np.full((3, 3), 0.001), 0.0), LayerState("scalebias")))
    grads = [layers.Gradients(d_input=None, d_kernel=np.ones((3, 3)), d_shape_param=0.0),
             layers.Gradients(d_input=None)]
    new, _ = train.optimizer_step(net, grads, AdamState.zeros_like(train.parameters(net)), 0.01)
    np.testing.assert_array_equal(new.layers[0].kernel, np.zeros((3, 3)))


def test_pconv_stays_positive_under_large_steps():
    net = Network((LayerState("pconv", np.full((3, 3), 1e-3), 0.0), LayerState("scalebias")))
    grads = [layers.Gradients(d_input=None, d_kernel=np.full((3, 3), 1e3), d_shape_param=0.0),
             layers.Gradients(d_input=None)]
    new, _ = train.optimizer_step(net, grads, AdamState.zeros_like(train.parameters(net)), 5.0)
    assert np.all(new.layers[0].kernel > 0)


# plateau schedule ------------------------------------------------------------

CFG = TrainConfig()


def test_decreasing_losses_keep_lr():
    state = train.replay_plateau([1.0 / k for k in range(1, 30)], CFG)
    assert state.lr == 0.01 and not state.stop


def test_five_flat_epochs_cut_lr():
    state = train.replay_plateau([1.0] + [1.0] * 5, CFG)
    assert state.lr == pytest.approx(0.001) and not state.stop
    state = train.replay_plateau([1.0] + [1.0] * 4, CFG)
    assert state.lr == 0.01


def test_ten_flat_epochs_stop():
    state = train.replay_plateau([1.0] + [1.0] * 10, CFG)
    assert state.stop
    assert not train.replay_plateau([1.0] + [1.0] * 9, CFG).stop


def test_relative_tolerance_counts_tiny_gains_as_plateau():
    losses = [1.0 * (1 - 1e-5) ** k for k in range(7)]
    assert train.replay_plateau(losses, CFG).lr == pytest.approx(0.001)


def test_improvement_resets_counters():
    state = PlateauState(0.01)
    for loss in [1.0, 1.0, 1.0, 1.0, 0.5]:
        state = train.plateau_update(loss, state, CFG)
    assert state.wait_lr == 0 and state.wait_stop == 0 and state.best == 0.5


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# training --------------------------------------------------------------------

def test_scale_bias_regression_recovers_identity(rng):
    f = rng.random((64, 5, 5))
    net = Network((LayerState("smorph", np.zeros((1, 1)), 0.0),
                   LayerState("scalebias", scale=0.3, bias=0.5)))
    res = train.train(net, f, f, TrainConfig(seed=1, max_epochs=400))
    sb = res.network.layers[-1]
    assert res.final_loss < 1e-6
    # a 1x1 additive kernel and the bias are interchangeable; only their sum is identifiable
    offset = sb.scale * res.network.layers[0].kernel[0, 0] + sb.bias
    assert sb.scale == pytest.approx(1.0, abs=1e-3) and offset == pytest.approx(0.0, abs=1e-3)


def test_training_is_deterministic(rng):
    f = rng.random((40, 10, 10))
    from morphlayers import oracle
    t = oracle.dilate(f, np.zeros((3, 3)))
    runs = [train.train(train.build_network("smorph", 1, seed=0, side=3), f, t,
                        TrainConfig(seed=5, max_epochs=6)) for _ in range(2)]
    assert [r.mean_loss for r in runs[0].history] == [r.mean_loss for r in runs[1].history]


def test_divergence_is_detected():
    f = np.random.default_rng(0).random((8, 4, 4))
    net = Network((LayerState("smorph", np.zeros((1, 1)), 0.0), LayerState("scalebias")))
    with pytest.raises(train.TrainingDiverged):
        train.train(net, f, 1e6 * f, TrainConfig(initial_lr=1e4, max_epochs=20))


def test_empty_or_mismatched_dataset():
    net = train.build_network("smorph", 1)
    with pytest.raises(ValueError):
        train.train(net, np.zeros((0, 4, 4)), np.zeros((0, 4, 4)))
    with pytest.raises(ValueError):
        train.train(net, np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


def test_history_csv_and_network_round_trip(tmp_path):
    net = train.build_network("pconv", 2, seed=4, side=3)
    train.save_network(tmp_path / "net.json", net)
    back = train.load_network(tmp_path / "net.json")
    for a, b in zip(net.layers, back.layers):
        assert a.kind == b.kind and a.shape_param == b.shape_param
        if a.kernel is not None:
            np.testing.assert_array_equal(a.kernel, b.kernel)
    hist = [train.EpochRecord(1, 0.5, 0.01), train.EpochRecord(2, 0.25, 0.001)]
    train.write_history_csv(tmp_path / "h.csv", hist)
    assert (tmp_path / "h.csv").read_text().splitlines() == [
        "epoch,mean_loss,lr", "1,0.5,0.01", "2,0.25,0.001"]


# desk-scale runs of the protocol on a non-degenerate task ----------------------

@pytest.fixture(scope="module")
def flat3_runs():
    from morphlayers import datasets, oracle
    images = datasets.synthetic_corpus(200)
    runs = {}
    for op, target in (("dilation", oracle.dilate(images, np.zeros((3, 3)))),
                       ("erosion", oracle.erode(images, np.zeros((3, 3))))):
        runs[op] = train.train(train.build_network("smorph", 1, seed=0, side=3), images, target)
    return runs


@pytest.mark.slow
def test_trained_shape_parameter_sign(flat3_runs):
    assert flat3_runs["dilation"].network.layers[0].shape_param > 0
    assert flat3_runs["erosion"].network.layers[0].shape_param < 0


@pytest.mark.slow
def test_flat3_dilation_recovers_sharp_kernel(flat3_runs):
    from morphlayers.image import rmse
    layer = flat3_runs["dilation"].network.layers[0]
    assert rmse(layer.kernel, np.zeros((3, 3))) < 0.1
    assert layer.shape_param > 20


@pytest.mark.slow
def test_flat3_erosion_sharp(flat3_runs):
    assert flat3_runs["erosion"].network.layers[0].shape_param < -20
