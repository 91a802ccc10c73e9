import numpy as np
import pytest

from oracles import corpus, tied_training
from srkit import checkpoint
from srkit import train as tr
from srkit.arch import NetworkSpec, ParamStore, build
from srkit.gradcheck import check_gradient
from srkit.train import AdamState, DataError, PairedDataset, TrainConfig, TrainingDiverged

SMALL = NetworkSpec.preset("carn", channels=4, blocks=2, units_per_block=2, scales=(2, 3))


def small_cfg(**kw):
    base = dict(patch_size_lr=8, batch_size=2, lr0=1e-3, total_steps=3, halve_every=1000, scales=(2,), seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return PairedDataset(corpus(32), (2, 3))


def coordinate_dataset(scale, h=6, w=7):
    """LR pixels encode their position; HR is the nearest-neighbour enlargement."""
    ds = PairedDataset([np.zeros((h * scale, w * scale, 3), np.uint8)], (scale,))
    lr = np.arange(3 * h * w, dtype=np.float32).reshape(3, h, w)
    hr = lr.repeat(scale, axis=1).repeat(scale, axis=2)
    ds.pairs[scale] = [(lr, hr)]
    return ds


# -- sampling ----------------------------------------------------------------


def test_sample_shapes(dataset):
    cfg = small_cfg(batch_size=3)
    lr, hr = tr.sample_batch(dataset, 3, cfg, np.random.default_rng(0))
    assert lr.shape == (3, 3, 8, 8)
    assert hr.shape == (3, 3, 24, 24)


def test_sample_deterministic_without_augment(dataset):
    cfg = small_cfg(augment=False, batch_size=4)
    a = tr.sample_batch(dataset, 2, cfg, np.random.default_rng(5))
    b = tr.sample_batch(dataset, 2, cfg, np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("augment", [False, True])
@pytest.mark.parametrize("scale", [2, 3, 4])
def test_hr_patch_aligned_with_lr_patch(scale, augment):
    ds = coordinate_dataset(scale)
    cfg = small_cfg(patch_size_lr=3, batch_size=16, augment=augment, scales=(scale,))
    lr, hr = tr.sample_batch(ds, scale, cfg, np.random.default_rng(1))
    assert np.array_equal(lr.repeat(scale, axis=2).repeat(scale, axis=3), hr)


def test_augmentation_uniform_chi_square(monkeypatch):
    seen = []
    monkeypatch.setattr(tr, "augment", lambda chw, flip, rot: seen.append((flip, rot)) or chw)
    ds = coordinate_dataset(2, 2, 2)
    cfg = small_cfg(patch_size_lr=1, batch_size=10_000, scales=(2,))
    tr.sample_batch(ds, 2, cfg, np.random.default_rng(2))
    counts = np.zeros((2, 4))
    for flip, rot in seen[::2]:
        counts[flip, rot] += 1
    expected = counts.sum() / 8
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 24.3  # 99.9% quantile, 7 degrees of freedom


def test_augment_is_flip_then_rotation():
    x = np.arange(6).reshape(1, 2, 3)
    assert np.array_equal(tr.augment(x, 1, 0), x[:, :, ::-1])
    assert np.array_equal(tr.augment(x, 0, 1), np.rot90(x, 1, axes=(1, 2)))
    assert np.array_equal(tr.augment(x, 1, 2), np.rot90(x[:, :, ::-1], 2, axes=(1, 2)))


def test_image_smaller_than_patch(dataset):
    with pytest.raises(DataError):
        tr.sample_batch(dataset, 2, small_cfg(patch_size_lr=40), np.random.default_rng(0))
    with pytest.raises(DataError):
        PairedDataset([], (2,))


# -- loss --------------------------------------------------------------------


def test_l1_values():
    a = np.random.default_rng(0).random((2, 3, 4, 4))
    assert tr.l1_loss(a, a)[0] == 0.0
    assert not tr.l1_loss(a, a)[1].any()
    assert tr.l1_loss(a + 0.25, a)[0] == pytest.approx(0.25)


def test_l1_gradient_finite_difference():
    rng = np.random.default_rng(1)
    pred, target = rng.random((1, 3, 5, 5)), rng.random((1, 3, 5, 5))
    _, grad = tr.l1_loss(pred, target)
    err = check_gradient(lambda: tr.l1_loss(pred, target)[0], pred, grad, count=20)
    assert err < 1e-6


# -- optimizer ---------------------------------------------------------------


def one_param_store(value=1.0, shape=(3, 4)):
    store = ParamStore()
    store.add("w", np.full(shape, value))
    return store


def grad_store(g):
    store = ParamStore()
    store.add("w", g)
    return store


def test_adam_first_step_is_lr():
    store = one_param_store()
    cfg = small_cfg(lr0=1e-3)
    tr.adam_step(store, grad_store(np.full((3, 4), 0.37)), AdamState(), cfg)
    np.testing.assert_allclose(1.0 - store["w"], 1e-3, rtol=1e-6)


def test_adam_zero_gradient_leaves_params():
    store = one_param_store()
    state = AdamState()
    for _ in range(3):
        tr.adam_step(store, grad_store(np.zeros((3, 4))), state, small_cfg())
    assert np.array_equal(store["w"], np.ones((3, 4)))


def test_adam_scale_invariance():
    g = np.random.default_rng(0).uniform(0.5, 1.0, (3, 4))
    a, b = one_param_store(), one_param_store()
    tr.adam_step(a, grad_store(g), AdamState(), small_cfg())
    tr.adam_step(b, grad_store(10 * g), AdamState(), small_cfg())
    np.testing.assert_allclose(1 - a["w"], 1 - b["w"], rtol=1e-5)


def test_learning_rate_halves():
    cfg = small_cfg(lr0=1e-4, halve_every=400_000)
    assert tr.learning_rate(0, cfg) == 1e-4
    assert tr.learning_rate(399_999, cfg) == 1e-4
    assert tr.learning_rate(400_000, cfg) == 5e-5
    assert tr.learning_rate(800_000, cfg) == 2.5e-5


def test_adam_applies_halved_rate_after_boundary():
    cfg = small_cfg(lr0=1e-3, halve_every=2)
    state = AdamState()
    store = one_param_store()
    applied = [tr.adam_step(store, grad_store(np.ones((3, 4))), state, cfg) for _ in range(4)]
    assert applied == [1e-3, 1e-3, 5e-4, 5e-4]


def test_state_round_trip(tmp_path):
    store, state = one_param_store(), AdamState()
    tr.adam_step(store, grad_store(np.ones((3, 4))), state, small_cfg())
    tr.save_state(state, tmp_path / "s")
    loaded = tr.load_state(tmp_path / "s")
    assert loaded.t == 1 and loaded.steps == {"w": 1}
    assert np.array_equal(loaded.m["w"], state.m["w"].astype(np.float32))


# -- training loop -----------------------------------------------------------


def run(dataset, cfg, spec=SMALL, **kw):
    return tr.train(spec, dataset, cfg, **kw)


def test_training_is_bitwise_reproducible(dataset, monkeypatch):
    cfg = small_cfg(total_steps=3, scales=(2, 3))
    monkeypatch.setenv("SRKIT_THREADS", "1")
    a, _, rows_a = run(dataset, cfg)
    monkeypatch.setenv("SRKIT_THREADS", "3")
    b, _, rows_b = run(dataset, cfg)
    assert checkpoint.dumps(a.entries, a.aliases) == checkpoint.dumps(b.entries, b.aliases)
    assert tr.log_to_csv(rows_a, include_seconds=False) == tr.log_to_csv(rows_b, include_seconds=False)


def test_resume_matches_uninterrupted(dataset, tmp_path):
    full, _, rows = run(dataset, small_cfg(total_steps=4, scales=(2, 3)))
    half, state, first = run(dataset, small_cfg(total_steps=2, scales=(2, 3)))
    checkpoint.save(half, tmp_path / "c")
    tr.save_state(state, tmp_path / "s")
    resumed, _, second = run(dataset, small_cfg(total_steps=4, scales=(2, 3)),
                             store=checkpoint.load(tmp_path / "c"), state=tr.load_state(tmp_path / "s"))
    for name in full:
        assert np.array_equal(full[name], resumed[name]), name
    assert [(r.step, r.scale, r.loss) for r in rows] == [(r.step, r.scale, r.loss) for r in first + second]


def test_log_rows(dataset):
    _, _, rows = run(dataset, small_cfg(total_steps=3, scales=(2, 3)))
    assert [r.step for r in rows] == [1, 2, 3]
    assert all(r.scale in (2, 3) and r.lr == 1e-3 for r in rows)
    header = tr.log_to_csv(rows).splitlines()[0]
    assert header == "step,scale,loss,lr,seconds"


def test_single_scale_never_touches_other_heads(dataset):
    net, store = build(SMALL, seed=0)
    before = {n: store[n].copy() for n in store if n.startswith("up3")}
    run(dataset, small_cfg(total_steps=3, scales=(2,)), store=store)
    assert all(np.array_equal(before[n], store[n]) for n in before)
    assert not np.array_equal(build(SMALL, seed=0)[1]["up2.0.weight"], store["up2.0.weight"])


def test_checkpoint_callback_cadence(dataset):
    seen = []
    run(dataset, small_cfg(total_steps=4, checkpoint_every=2), on_checkpoint=lambda t, s, st: seen.append(t))
    assert seen == [2, 4]


def test_recursive_training_matches_tied_clone(dataset):
    spec = NetworkSpec.preset("carn-m", channels=8, blocks=2, units_per_block=2, scales=(2,))
    cfg = small_cfg(total_steps=3)
    net, store = build(spec, seed=0, dtype=np.float64)
    expected = tied_training(net, dataset, cfg, 3)
    trained, _, _ = tr.train(spec, dataset, cfg, store=store.copy(), dtype=np.float64)
    for name in expected:
        np.testing.assert_allclose(trained[name], expected[name], rtol=1e-6, atol=1e-9)


def test_nan_reports_first_bad_layer(dataset):
    _, store = build(SMALL, seed=0)
    store["blocks.0.units.1.conv2.weight"][0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        run(dataset, small_cfg(), store=store)
    assert info.value.layer == "blocks.0.units.1.conv2"
    assert info.value.step == 1


def test_config_validation(dataset):
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(scales=(5,))
    with pytest.raises(ValueError):
        run(dataset, small_cfg(scales=(4,)))
    with pytest.raises(DataError):
        run(dataset, small_cfg(patch_size_lr=64))
