import numpy as np
import pytest

from layerscope.data import Dataset, gen_synthetic
from layerscope.model import (
    VGG7, VGG7_DROPOUT, ArchParseError, CheckpointError, DivergenceError, TrainConfig, evaluate,
    format_arch, init_model, load_checkpoint, parse_arch, per_example_cost, predict, save_checkpoint, train,
)


# -- parsing ------------------------------------------------------------------

def test_parse_vgg7():
    specs = parse_arch(VGG7)
    kinds = [s.kind for s in specs]
    assert kinds.count("conv") == 6
    assert kinds.count("maxpool") == 3
    assert sum(1 for s in specs if s.kind == "fc" and not s.softmax) == 1
    assert specs[-1].softmax and specs[-1].size == 10
    model = init_model(specs, (1, 28, 28), 0)
    assert model.num_target_layers == 7
    assert len(model.param_layers) == 8
    assert format_arch(specs) == VGG7


def test_parse_minimal_and_walkthrough():
    (head,) = parse_arch("10SM")
    assert head.kind == "fc" and head.softmax and head.size == 10
    specs = parse_arch("4C3-MP-D50-8FC-2SM")
    assert [s.label for s in specs] == ["C", "MP", "D", "FC", "SM"]
    assert specs[0].size == 4 and specs[0].kernel == 3
    assert specs[2].rate == 0.5
    assert specs[3].size == 8 and specs[4].size == 2


@pytest.mark.parametrize("arch,pos", [
    ("16C3-XX-10SM", 1),
    ("10SM-16C3", 0),
    ("0C3-10SM", 0),
    ("16C3-0FC-10SM", 1),
    ("16C3-MP", 1),
    ("D100-10SM", 0),
])
def test_parse_errors_carry_position(arch, pos):
    with pytest.raises(ArchParseError) as info:
        parse_arch(arch)
    assert info.value.position == pos


def test_spatial_collapse_rejected():
    with pytest.raises(ValueError):
        init_model("4C3-MP-MP-MP-10SM", (1, 4, 4), 0)


# -- init -----------------------------------------------------------------------

def _fc_weight(model):
    i = [p for p in model.target_layers if model.specs[p].kind == "fc"][0]
    return model.layers[i].params[0].value


def test_vgg7_fc_shapes():
    assert _fc_weight(init_model(VGG7, (1, 28, 28), 0)).shape == (288, 64)
    assert _fc_weight(init_model(VGG7, (3, 32, 32), 0)).shape == (512, 64)


def test_init_deterministic():
    a = init_model(VGG7_DROPOUT, (1, 28, 28), 3)
    b = init_model(VGG7_DROPOUT, (1, 28, 28), 3)
    c = init_model(VGG7_DROPOUT, (1, 28, 28), 4)
    assert a.same_params(b)
    assert not a.same_params(c)


@pytest.mark.parametrize("shape", [(1, 28, 28), (3, 32, 32)])
def test_forward_emits_ten_logits(shape):
    x = np.random.default_rng(0).random((5,) + shape)
    assert init_model(VGG7_DROPOUT, shape, 0).forward(x).shape == (5, 10)


@pytest.mark.parametrize("shape", [(1, 28, 28), (3, 32, 32)])
def test_untrained_cost_near_uniform(shape):
    rng = np.random.default_rng(1)
    ds = Dataset(rng.random((100,) + shape), np.arange(100) % 10)
    for seed in range(3):
        _, cost = evaluate(init_model(VGG7_DROPOUT, shape, seed), ds)
        assert abs(cost / np.log(10) - 1) <= 0.05


# -- training -------------------------------------------------------------------

@pytest.fixture(scope="module")
def blobs():
    return gen_synthetic(num_classes=4, per_class=250, image_shape=(1, 8, 8), margin=6.0, seed=7)


def _logistic_reference(ds, epochs=30, lr=0.1):
    """Plain softmax regression by full-batch gradient descent."""
    x = ds.images.reshape(len(ds), -1)
    x = np.hstack([x, np.ones((len(ds), 1))])
    w = np.zeros((x.shape[1], ds.num_classes))
    onehot = np.eye(ds.num_classes)[ds.labels]
    for _ in range(epochs * 10):
        z = x @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * x.T @ (p - onehot) / len(ds)
    return np.mean((x @ w).argmax(axis=1) == ds.labels)


def test_blob_training_reaches_95(blobs):
    # the data must be linearly separable for the claim to mean anything
    assert _logistic_reference(blobs) >= 0.95
    model = init_model("32FC-4SM", blobs.image_shape, 0)
    trained, history = train(model, blobs, TrainConfig(epochs=30, batch_size=32, learning_rate=0.01))
    assert len(history) == 30
    assert evaluate(trained, blobs)[0] >= 0.95


def test_full_freeze_keeps_params(blobs):
    model = init_model("4C3-MP-16FC-4SM", blobs.image_shape, 0)
    trained, _ = train(model, blobs, TrainConfig(epochs=2, batch_size=50), freeze_mask=[True] * 3)
    assert trained.same_params(model)


def test_partial_freeze(blobs):
    model = init_model("4C3-MP-16FC-4SM", blobs.image_shape, 0)
    trained, _ = train(model, blobs, TrainConfig(epochs=1, batch_size=50), freeze_mask=[True, False, True])
    for pos in model.param_layers:
        same = all(np.array_equal(p.value, q.value)
                   for p, q in zip(model.layers[pos].params, trained.layers[pos].params))
        assert same == (model.specs[pos].kind != "fc" or model.specs[pos].softmax)


def test_zero_epochs_identity(blobs):
    model = init_model("4C3-MP-16FC-4SM", blobs.image_shape, 0)
    trained, history = train(model, blobs, TrainConfig(epochs=0))
    assert history == []
    assert trained.same_params(model)


def test_freeze_mask_length_checked():
    model = init_model("4C3-MP-16FC-4SM", (1, 8, 8), 0)
    with pytest.raises(ValueError):
        model.set_freeze_mask([True, False])


def test_training_deterministic(blobs):
    model = init_model("4C3-MP-D50-16FC-4SM", blobs.image_shape, 0)
    cfg = TrainConfig(epochs=2, batch_size=64, seed=5)
    a, ha = train(model, blobs, cfg)
    b, hb = train(model, blobs, cfg)
    assert a.same_params(b) and ha == hb


def test_loss_falls_across_seeds(blobs):
    for seed in range(3):
        model = init_model("8C3-MP-16FC-4SM", blobs.image_shape, seed)
        _, history = train(model, blobs, TrainConfig(epochs=5, batch_size=32, seed=seed))
        assert history[-1]["loss"] < history[0]["loss"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch(blobs):
    model = init_model("16FC-4SM", blobs.image_shape, 0)
    with pytest.raises(DivergenceError) as info:
        train(model, blobs, TrainConfig(epochs=3, batch_size=100, learning_rate=1e300))
    assert info.value.epoch == 0
    assert info.value.batch >= 0
    assert "epoch" in str(info.value)


# -- evaluation ----------------------------------------------------------------

def test_perfect_predictor():
    model = init_model("2SM", (1, 2, 2), 0)
    w, b = model.layers[0].params
    w.value[:] = 0
    b.value[:] = [1000.0, -1000.0]
    ds = Dataset(np.random.default_rng(0).random((20, 1, 2, 2)), np.zeros(20, dtype=np.int64), num_classes=2)
    acc, cost = evaluate(model, ds)
    assert acc == 1.0 and cost < 1e-12


def test_evaluate_bitwise_repeatable(blobs):
    model = init_model("4C3-MP-D50-16FC-4SM", blobs.image_shape, 0)
    assert evaluate(model, blobs) == evaluate(model, blobs)
    assert np.array_equal(per_example_cost(model, blobs), per_example_cost(model, blobs))
    assert np.array_equal(predict(model, blobs.images), predict(model, blobs.images))


def test_evaluate_batch_size_irrelevant(blobs):
    model = init_model("4C3-MP-16FC-4SM", blobs.image_shape, 0)
    a = per_example_cost(model, blobs, batch_size=1000)
    b = per_example_cost(model, blobs, batch_size=7)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_empty_dataset_rejected():
    model = init_model("2SM", (1, 2, 2), 0)
    empty = Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        evaluate(model, empty)


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, blobs):
    model = init_model("4C3-MP-D50-16FC-4SM", blobs.image_shape, 9)
    trained, _ = train(model, blobs, TrainConfig(epochs=1, batch_size=100))
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained, path)
    back = load_checkpoint(path)
    assert back.arch == trained.arch and back.input_shape == trained.input_shape and back.seed == 9
    assert back.same_params(trained)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
