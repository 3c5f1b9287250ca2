import numpy as np
import pytest

from eqdense.data import DatasetSplit, PatchSet, generate_synthetic
from eqdense.errors import ConfigurationError, ContractError
from eqdense.groups import elements
from eqdense.model import ModelConfig, build_model
from eqdense.training import (
    PROFILES,
    OptimState,
    TrainSchedule,
    adam_step,
    augment_d4,
    images_to_input,
    recalibrate_bn,
    run_training,
    schedule_for,
    train_step,
)


def test_adam_first_step_example():
    params = {"w": np.zeros(1)}
    state = OptimState.create(params)
    adam_step(params, {"w": np.array([0.5])}, state)
    # m_hat = 0.5, v_hat = 0.25
    assert np.isclose(params["w"][0], -1e-3 * 0.5 / (0.5 + 1e-8))
    assert np.isclose(params["w"][0], -9.99999e-4, atol=1e-9)


def test_adam_matches_loop_reference(rng):
    p0 = rng.standard_normal(4)
    grads = rng.standard_normal((5, 4))
    params = {"w": p0.copy()}
    state = OptimState.create(params, lr=0.01)
    for g in grads:
        adam_step(params, {"w": g}, state)
    theta, m, v = p0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], theta, rtol=1e-12)
    assert state.t == 5


def test_adam_zero_grad_and_symmetry():
    params = {"a": np.ones(3), "b": np.ones(3)}
    state = OptimState.create(params)
    adam_step(params, {"a": np.zeros(3), "b": np.zeros(3)}, state)
    np.testing.assert_array_equal(params["a"], 1)
    adam_step(params, {"a": np.full(3, 0.3), "b": np.full(3, 0.3)}, state)
    np.testing.assert_array_equal(params["a"], params["b"])


def test_adam_missing_gradient():
    params = {"a": np.ones(1), "b": np.ones(1)}
    with pytest.raises(ContractError):
        adam_step(params, {"a": np.ones(1)}, OptimState.create(params))


def test_plateau_single_halving_at_21():
    state = OptimState.create({}, lr=1e-3)
    lrs = []
    for _ in range(21):
        state.observe(0.5)
        lrs.append(state.lr)
    # epoch 1 sets the best, epochs 2..21 are 20 epochs without improvement
    assert lrs[:20] == [1e-3] * 20 and lrs[20] == 5e-4


def test_plateau_repeats_and_resets():
    state = OptimState.create({}, lr=1.0)
    for _ in range(41):
        state.observe(1.0)
    assert state.lr == 0.25
    state = OptimState.create({}, lr=1.0)
    for v in np.linspace(1, 0.5, 50):
        state.observe(v)
    assert state.lr == 1.0


def test_augment_frequencies():
    batch = np.zeros((80_000, 1, 1, 1), np.float32)
    _, draws = augment_d4(batch, np.random.default_rng(0))
    freq = np.bincount(draws, minlength=8) / len(draws)
    assert np.all(np.abs(freq - 0.125) < 0.01)


def test_augment_applies_drawn_element_and_is_seeded(rng):
    batch = rng.random((16, 3, 5, 5)).astype(np.float32)
    out, draws = augment_d4(batch, np.random.default_rng(7))
    out2, draws2 = augment_d4(batch, np.random.default_rng(7))
    np.testing.assert_array_equal(out, out2)
    els = elements("D4")
    for i, d in enumerate(draws):
        np.testing.assert_array_equal(out[i], np.rot90(batch[i][..., ::-1] if els[d].mirror else batch[i],
                                                       els[d].rot, axes=(-2, -1)))


def test_augment_fixed_point():
    a = np.zeros((3, 5, 5), np.float32)
    a[:, 2, :] = 1
    a[:, :, 2] = 1
    a[:, 0, 0] = a[:, 0, 4] = a[:, 4, 0] = a[:, 4, 4] = 2
    batch = np.stack([a] * 10)
    out, _ = augment_d4(batch, np.random.default_rng(1))
    np.testing.assert_array_equal(out, batch)


def test_schedule_profiles():
    full = PROFILES["full"]
    assert (full.batches_per_epoch, full.batch_size, full.val_size, full.lr, full.patience) == (312, 64, 40_000, 1e-3, 20)
    desk = schedule_for("desk", seed=3)
    assert (desk.batches_per_epoch, desk.val_size, desk.seed) == (32, 2048, 3)
    assert full.bn_recalibration == 0 and desk.bn_recalibration > 0
    with pytest.raises(ConfigurationError):
        schedule_for("huge")


def test_images_to_input():
    img = np.full((2, 4, 5, 3), 255, np.uint8)
    img[0, 0, 0] = 0
    x = images_to_input(img)
    assert x.shape == (2, 3, 4, 5) and x.dtype == np.float32
    assert x.max() == 1.0 and x.min() == -1.0


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(5, 24)


def _tiny_schedule(**kw):
    base = dict(epochs=2, batches_per_epoch=2, batch_size=4, val_size=6, seed=1)
    base.update(kw)
    return TrainSchedule(**base)


def test_single_step_decreases_loss_on_fixed_batch(tiny_data):
    model, store = build_model(ModelConfig("D4", 1, seed=0))
    x = images_to_input(tiny_data.train.images[:8])
    y = tiny_data.train.labels[:8]
    state = OptimState.create(store.params, lr=1e-4)
    first = train_step(model, store, state, x, y)
    second = train_step(model, store, state, x, y)
    assert second < first


def test_best_checkpoint_selection(tiny_data):
    model, store = build_model(ModelConfig("trivial", 1, seed=0))
    losses = iter([0.5, 0.3, 0.4])
    snapshots = []
    res = run_training(model, store, tiny_data, _tiny_schedule(epochs=3),
                       validate=lambda m, s, e: next(losses),
                       on_epoch=lambda row, m, s: snapshots.append(s.copy()))
    assert res.best_epoch == 2 and res.best_val_loss == 0.3
    for k in store.params:
        np.testing.assert_array_equal(res.best_store.params[k], snapshots[1].params[k])
    assert [r.val_nll for r in res.history] == [0.5, 0.3, 0.4]


def test_plateau_injection_via_stubbed_validation(tiny_data):
    model, store = build_model(ModelConfig("trivial", 1, seed=0))
    res = run_training(model, store, tiny_data, _tiny_schedule(epochs=22, batches_per_epoch=0),
                       validate=lambda m, s, e: 1.0)
    lrs = [r.lr for r in res.history]
    assert lrs[:20] == [1e-3] * 20
    assert lrs[20:] == [5e-4, 5e-4]


def test_training_is_deterministic(tiny_data):
    runs = []
    for _ in range(2):
        model, store = build_model(ModelConfig("D4", 1, seed=4))
        res = run_training(model, store, tiny_data, _tiny_schedule(augment_d4=True))
        runs.append([r.format() for r in res.history])
    assert runs[0] == runs[1]


def test_equivariance_survives_training(tiny_data, rng):
    from eqdense.checks import measure_equivariance

    model, store = build_model(ModelConfig("D4", 1, seed=4))
    res = run_training(model, store, tiny_data, _tiny_schedule())
    x = rng.random((2, 3, 96, 96)).astype(np.float32)
    rep = measure_equivariance(model, res.final_store, x, "D4", train=False)
    # trained eval-mode activations are larger, so compare in relative terms
    assert rep.max_relative() < 1e-5 and rep.max_end_to_end() < 1e-4


def test_empty_dataset_is_a_config_error(tiny_data):
    empty = PatchSet(np.zeros((0, 96, 96, 3), np.uint8), np.zeros(0))
    model, store = build_model(ModelConfig("trivial", 1))
    with pytest.raises(ConfigurationError):
        run_training(model, store, DatasetSplit(empty, tiny_data.valid, tiny_data.test), _tiny_schedule())
    with pytest.raises(ConfigurationError):
        run_training(model, store, DatasetSplit(tiny_data.train, empty, empty), _tiny_schedule())


def test_recalibrate_bn_is_exact_batch_average(tiny_data, rng):
    from eqdense.layers import BatchNormState

    model, store = build_model(ModelConfig("D4", 1, num_blocks=2, seed=0))
    xs = [rng.random((4, 3, 24, 24)).astype(np.float32) for _ in range(3)]
    model(store, xs[0], train=True)
    steps = {k: b.steps for k, b in store.bn.items()}
    assert recalibrate_bn(model, store, iter(xs)) == 3
    # reference: one fresh state per batch, averaged by hand
    per_batch = []
    for x in xs:
        ref = store.copy()
        for b in ref.bn.values():
            b.running_mean = b.running_var = None
        model(ref, x, train=True)
        per_batch.append({k: (b.running_mean, b.running_var) for k, b in ref.bn.items()})
    for k, b in store.bn.items():
        np.testing.assert_allclose(b.running_mean, np.mean([p[k][0] for p in per_batch], axis=0), rtol=1e-6)
        np.testing.assert_allclose(b.running_var, np.mean([p[k][1] for p in per_batch], axis=0), rtol=1e-6)
        assert b.momentum == BatchNormState().momentum and b.steps == steps[k]
