import io
import sys

import numpy as np
import pytest

from layerscope.data import gen_synthetic
from layerscope.enclave import runner
from layerscope.enclave.memory import (
    DEFAULT_BUDGET, ELEM, BudgetError, PartitionPlan, account_memory, cut_label, param_bytes, validate_plan,
)
from layerscope.enclave.protocol import (
    HEADER, BoundaryError, Channel, Msg, batch_boundary_bytes, decode_forward, decode_json, encode_forward,
    encode_json, pack_tensor, unpack_tensor,
)
from layerscope.enclave.runner import COST_CSV_COLUMNS, cost_csv, run_partitioned_training, sweep_cuts
from layerscope.enclave.worker import serve
from layerscope.model import VGG7, VGG7_DROPOUT, DivergenceError, TrainConfig, init_model, train

SMALL = "4C3-MP-D50-8FC-4SM"
CFG = TrainConfig(epochs=2, batch_size=32, learning_rate=0.01, seed=3)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(num_classes=4, per_class=30, image_shape=(1, 8, 8), margin=3.0, seed=1)


@pytest.fixture(scope="module")
def small(data):
    return init_model(SMALL, data.image_shape, 0)


@pytest.fixture(scope="module")
def vgg():
    return init_model(VGG7_DROPOUT, (1, 28, 28), 0)


# -- memory accounting -----------------------------------------------------------

def test_head_only_region(vgg):
    acct = account_memory(vgg, PartitionPlan(len(vgg.layers) - 1))
    (head,) = acct.layers
    assert head.params_bytes == 650 * ELEM == 5200
    assert head.grads_bytes == head.momentum_bytes == 5200
    assert acct.copied_front_layers == []
    assert acct.total_bytes == sum(m.total for m in acct.layers) + acct.boundary_bytes


def test_copy_rule_maxpool(vgg):
    mp3 = [i for i, s in enumerate(vgg.specs) if s.kind == "maxpool"][-1]
    acct = account_memory(vgg, PartitionPlan(mp3))
    (copied,) = acct.copied_front_layers
    assert copied["pos"] == mp3 - 1
    assert acct.copied_front_bytes == param_bytes(vgg.layers[mp3 - 1]) == (32 * 32 * 9 + 32) * ELEM


def test_copy_rule_dropout(vgg):
    d = [i for i, s in enumerate(vgg.specs) if s.kind == "dropout"][0]
    acct = account_memory(vgg, PartitionPlan(d))
    # the nearest parameterized layer in front of the dropout is the last conv
    assert acct.copied_front_layers[0]["pos"] == d - 2
    assert acct.copied_front_bytes > 0


def test_no_copy_when_region_starts_with_params(vgg):
    for cut in vgg.param_layers:
        assert account_memory(vgg, PartitionPlan(cut)).copied_front_bytes == 0


def test_empty_region(vgg):
    plan = PartitionPlan(len(vgg.layers), budget_bytes=0)
    assert account_memory(vgg, plan).total_bytes == 0
    validate_plan(vgg, plan)


def test_tiny_budget_rejected(vgg):
    for cut in range(len(vgg.layers)):
        with pytest.raises(BudgetError) as info:
            validate_plan(vgg, PartitionPlan(cut, budget_bytes=1024))
        assert info.value.budget == 1024 and info.value.total > 1024


def test_last_four_layers_fit(vgg):
    cut = vgg.param_layers[-4]
    acct = validate_plan(vgg, PartitionPlan(cut, DEFAULT_BUDGET))
    assert acct.total_bytes < DEFAULT_BUDGET


def test_vgg7_feasible_param_counts(vgg):
    feasible = set()
    for cut in range(len(vgg.layers)):
        if account_memory(vgg, PartitionPlan(cut)).total_bytes <= DEFAULT_BUDGET:
            feasible.add(sum(1 for p in vgg.param_layers if p >= cut))
    assert {1, 2, 3, 4} <= feasible


def test_cut_labels():
    m = init_model(VGG7, (1, 28, 28), 0)
    labels = [cut_label(m, c) for c in range(len(m.layers) + 1)]
    assert labels == ["C1", "C2", "MP1", "C3", "C4", "MP2", "C5", "C6", "MP3", "FC", "SM", "none"]


def test_plan_bounds(vgg):
    with pytest.raises(ValueError):
        account_memory(vgg, PartitionPlan(len(vgg.layers) + 1))


# -- protocol ----------------------------------------------------------------------

def test_tensor_roundtrip_bitwise():
    a = np.random.default_rng(0).standard_normal((3, 2, 5))
    b, off = unpack_tensor(pack_tensor(a))
    assert b.tobytes() == a.tobytes() and off == len(pack_tensor(a))


def test_forward_frame_roundtrip():
    acts = np.random.default_rng(1).random((4, 3))
    epoch, batch, labels, back = decode_forward(encode_forward(2, 7, [1, 0, 3, 9], acts))
    assert (epoch, batch) == (2, 7) and labels.tolist() == [1, 0, 3, 9]
    assert back.tobytes() == acts.tobytes()


def test_json_frame_roundtrip():
    tensors = [np.arange(6.0).reshape(2, 3), np.zeros(0)]
    obj, back = decode_json(encode_json({"a": 1}, tensors))
    assert obj == {"a": 1} and all(x.tobytes() == y.tobytes() for x, y in zip(tensors, back))


def test_channel_counts_and_errors():
    buf = io.BytesIO()
    out = Channel(None, buf)
    out.send(Msg.LOSS, b"abc")
    assert out.sent == HEADER.size + 3
    inp = Channel(io.BytesIO(buf.getvalue()), None)
    assert inp.recv(Msg.LOSS) == (Msg.LOSS, b"abc")
    with pytest.raises(BoundaryError):
        Channel(io.BytesIO(buf.getvalue()), None).recv(Msg.STEP_DONE)
    with pytest.raises(BoundaryError):
        Channel(io.BytesIO(buf.getvalue()[:-1]), None).recv()
    with pytest.raises(BoundaryError):
        Channel(io.BytesIO(HEADER.pack(0, 77)), None).recv()


def test_boundary_arithmetic():
    b, shape = 16, (8, 3, 3)
    act = 8 * b * 72
    framing = 4 * HEADER.size + 12 + 2 * b + 2 * (1 + 4 * 4) + (1 + 4) + 4
    assert batch_boundary_bytes(b, shape, True) == act + 8 * b + act + framing


def test_worker_rejects_budget_at_start(small):
    cut = len(small.layers) - 1
    init = {"arch": small.arch, "input_shape": list(small.input_shape), "seed": 0, "cut": cut, "budget": 10,
            "batch_size": 32, "frozen": {str(cut): [False, False]}, "start": 0, "lr": 0.01, "momentum": 0.9,
            "train_seed": 0}
    frames = io.BytesIO()
    Channel(None, frames).send(Msg.INIT, encode_json(init, [p.value for p in small.layers[cut].params]))
    replies = io.BytesIO()
    assert serve(Channel(io.BytesIO(frames.getvalue()), replies)) == 5
    kind, payload = Channel(io.BytesIO(replies.getvalue()), None).recv(Msg.ERROR)
    assert payload.startswith(b"budget")


# -- partitioned training --------------------------------------------------------------

def test_equivalence_every_cut(small, data):
    mono, _ = train(small, data, CFG)
    for cut in range(len(small.layers) + 1):
        trained, report = run_partitioned_training(small, PartitionPlan(cut, DEFAULT_BUDGET, CFG.batch_size),
                                                   data, CFG)
        assert trained.same_params(mono), cut
        assert report.max_param_diff == 0.0
        assert report.measured_boundary_bytes == report.expected_boundary_bytes
        assert report.crossings_per_batch == 2


def test_equivalence_with_frozen_prefix(small, data):
    mask = [True, False, False]
    mono, _ = train(small, data, CFG, freeze_mask=mask)
    trained, report = run_partitioned_training(small, PartitionPlan(3), data, CFG, freeze_mask=mask)
    assert trained.same_params(mono)
    # nothing trainable on the host, so no cut gradient travels back
    assert report.boundary_bytes_per_batch == batch_boundary_bytes(CFG.batch_size, small.layers[3].in_shape, False)


def test_boundary_bytes_per_batch(small, data):
    cut = len(small.layers) - 1
    _, report = run_partitioned_training(small, PartitionPlan(cut, DEFAULT_BUDGET, CFG.batch_size), data, CFG,
                                         compare=False)
    n = len(data)
    full, last = divmod(n, CFG.batch_size)
    shape = small.layers[cut].in_shape
    expected = CFG.epochs * (full * batch_boundary_bytes(CFG.batch_size, shape, True)
                             + (batch_boundary_bytes(last, shape, True) if last else 0))
    assert report.measured_boundary_bytes == expected
    assert report.boundary_bytes_per_batch == batch_boundary_bytes(CFG.batch_size, shape, True)


def test_empty_region_no_overhead(small, data):
    _, report = run_partitioned_training(small, PartitionPlan(len(small.layers)), data, CFG)
    assert report.overhead_fraction == 0.0 and report.secure_bytes == 0


def test_budget_checked_before_spawn(small, data, monkeypatch):
    def boom():
        raise AssertionError("worker must not start")
    monkeypatch.setattr(runner, "_spawn", boom)
    with pytest.raises(BudgetError):
        run_partitioned_training(small, PartitionPlan(0, budget_bytes=1024), data, CFG)


def test_worker_crash_is_boundary_error(small, data, monkeypatch):
    import subprocess
    import tempfile

    def dying():
        err = tempfile.TemporaryFile()
        cmd = [sys.executable, "-c", "import sys; sys.stderr.write('gone'); sys.exit(3)"]
        return subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=err), err
    monkeypatch.setattr(runner, "_spawn", dying)
    with pytest.raises(BoundaryError, match="gone"):
        run_partitioned_training(small, PartitionPlan(len(small.layers) - 1), data, CFG, compare=False)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_worker_divergence_reported(small, data):
    cfg = TrainConfig(epochs=1, batch_size=32, learning_rate=1e300)
    with pytest.raises(DivergenceError):
        run_partitioned_training(small, PartitionPlan(len(small.layers) - 1), data, cfg, compare=False)


# -- sweeps -------------------------------------------------------------------------

def test_sweep_budget_zero_skips_all(small, data, monkeypatch):
    monkeypatch.setattr(runner, "_spawn", lambda: pytest.fail("no worker expected"))
    reports = sweep_cuts(small, data, CFG, budget=0)
    assert len(reports) == len(small.layers) and all(r.skipped for r in reports)


def test_sweep_order_and_csv(small, data):
    reports = sweep_cuts(small, data, CFG, budget=DEFAULT_BUDGET)
    assert [r.cut_label for r in reports] == ["SM", "FC", "D", "MP", "C"]
    assert [r.param_layers_secure for r in reports] == [1, 2, 2, 2, 3]
    lines = cost_csv(reports).splitlines()
    assert lines[0].split(",")[:len(COST_CSV_COLUMNS)] == COST_CSV_COLUMNS
    assert len(lines) == 1 + len(reports)
    blank = cost_csv(reports, include_timing=False).splitlines()[1].split(",")
    assert blank[4:7] == ["", "", ""]


def test_sweep_overhead_trend():
    # small batches keep the boundary cost well above timing noise
    data = gen_synthetic(num_classes=4, per_class=50, image_shape=(1, 8, 8), margin=3.0, seed=1)
    model = init_model("4C3-4C3-MP-8FC-4SM", data.image_shape, 0)
    reports = sweep_cuts(model, data, TrainConfig(epochs=2, batch_size=4), repeats=3)
    assert all(r.overhead_fraction >= 0 for r in reports)
    by_label = {r.cut_label: r for r in reports}
    assert by_label["C1"].overhead_fraction >= by_label["SM"].overhead_fraction
