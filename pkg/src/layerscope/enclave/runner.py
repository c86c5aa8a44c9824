"""Host side of partitioned training, cost reports and cut sweeps."""

from __future__ import annotations

import csv
import io
import logging
import struct
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from layerscope.enclave.memory import (
    DEFAULT_BUDGET, BudgetError, MemoryAccount, PartitionPlan, account_memory, cut_label, validate_plan,
)
from layerscope.enclave.protocol import (
    BoundaryError, Channel, Msg, batch_boundary_bytes, decode_json, encode_forward, encode_json, unpack_tensor,
)
from layerscope.model import (
    DivergenceError, Model, TrainConfig, backward_range, clear_caches, epoch_order, first_trainable,
    forward_range, sgd_step, train,
)

log = logging.getLogger(__name__)

COST_CSV_COLUMNS = [
    "cut_label", "param_layers_secure", "secure_bytes", "copied_front_bytes", "wall_monolithic_s",
    "wall_partitioned_s", "overhead_fraction", "bytes_per_batch",
]
CROSSINGS_PER_BATCH = 2  # activations in, loss + activation gradients out


@dataclass
class CostReport:
    cut_index: int
    cut_label: str
    param_layers_secure: int
    memory_account: MemoryAccount
    wall_time_monolithic_s: float = 0.0
    wall_time_partitioned_s: float = 0.0
    overhead_fraction: float = 0.0
    boundary_bytes_per_batch: int = 0
    crossings_per_batch: int = CROSSINGS_PER_BATCH
    measured_boundary_bytes: int = 0  # instrumented total over the whole run
    expected_boundary_bytes: int = 0  # protocol arithmetic over the whole run
    batches: int = 0
    max_param_diff: float | None = None
    skipped: bool = False
    reason: str = ""

    @property
    def secure_bytes(self) -> int:
        return self.memory_account.total_bytes

    @property
    def copied_front_bytes(self) -> int:
        return self.memory_account.copied_front_bytes


def _spawn():
    err = tempfile.TemporaryFile()
    proc = subprocess.Popen([sys.executable, "-m", "layerscope.enclave.worker"],
                            stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=err)
    return proc, err


def _worker_failure(proc, errfile, exc):
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        proc.kill()
    errfile.seek(0)
    tail = errfile.read().decode(errors="replace")[-2000:]
    msg = str(exc)
    if "worker error: divergence" in msg:
        epoch, batch, loss = msg.split("divergence", 1)[1].split()[:3]
        return DivergenceError(int(epoch), int(batch), float(loss))
    return BoundaryError(f"{msg} (worker exit {proc.returncode}) {tail}".strip())


def run_partitioned_training(model: Model, plan: PartitionPlan, dataset, config: TrainConfig,
                             freeze_mask=None, compare: bool = True):
    """Train with ``layers[plan.cut_index:]`` and the cost in a separate worker process.

    The host runs the prefix, ships cut activations and labels, receives
    per-example losses and cut gradients, and each side steps its own
    optimizer. Returns the assembled trained model and a CostReport. With
    ``compare`` the monolithic ``train`` is also run for timing and for the
    largest absolute parameter difference.
    """
    acct = validate_plan(model, plan)  # budget checked before any process starts
    host = model.copy()
    if freeze_mask is not None:
        host.set_freeze_mask(freeze_mask)
    layers = host.layers
    n_layers = len(layers)
    cut = plan.cut_index
    report = CostReport(cut, cut_label(host, cut), sum(1 for p in range(cut, n_layers) if layers[p].params), acct)

    mono = None
    if compare:
        t0 = time.perf_counter()
        mono, _ = train(host, dataset, config)
        report.wall_time_monolithic_s = time.perf_counter() - t0

    if cut >= n_layers:
        # nothing is secure: the partitioned run is the monolithic run
        t0 = time.perf_counter()
        trained = mono if mono is not None else train(host, dataset, config)[0]
        report.wall_time_partitioned_s = report.wall_time_monolithic_s if mono is not None else time.perf_counter() - t0
    else:
        trained, t_part = _partitioned(host, plan, dataset, config, report)
        report.wall_time_partitioned_s = t_part
    if compare:
        report.overhead_fraction = (report.wall_time_partitioned_s - report.wall_time_monolithic_s) / max(
            report.wall_time_monolithic_s, 1e-12)
        report.max_param_diff = max(
            (float(np.max(np.abs(p.value - q.value))) for p, q in zip(trained.params(), mono.params()) if p.size),
            default=0.0)
    return trained, report


def _partitioned(host: Model, plan: PartitionPlan, dataset, config: TrainConfig, report: CostReport):
    layers = host.layers
    n_layers = len(layers)
    cut = plan.cut_index
    start = first_trainable(layers)
    host_trains = start is not None and start < cut
    act_shape = layers[cut].in_shape
    report.boundary_bytes_per_batch = batch_boundary_bytes(config.batch_size, act_shape, host_trains)

    secure_tensors = [p.value for pos in range(cut, n_layers) for p in layers[pos].params]
    front = [c["pos"] for c in report.memory_account.copied_front_layers]
    front_tensors = [p.value for pos in front for p in layers[pos].params]
    init = {
        "arch": host.arch, "input_shape": list(host.input_shape), "seed": host.seed, "cut": cut,
        "budget": plan.budget_bytes, "batch_size": plan.batch_size,
        "frozen": {str(pos): [p.frozen for p in layers[pos].params] for pos in range(cut, n_layers)},
        "start": n_layers if start is None else start,
        "lr": config.learning_rate, "momentum": config.momentum, "train_seed": config.seed,
    }

    proc, errfile = _spawn()
    chan = Channel(proc.stdout, proc.stdin)
    try:
        chan.send(Msg.INIT, encode_json(init, secure_tensors + front_tensors))
        chan.recv(Msg.READY)
        base_sent, base_recv = chan.sent, chan.received
        t0 = time.perf_counter()
        velocity = {}
        n = len(dataset)
        expected = 0
        batches = 0
        if start is not None:
            for epoch in range(config.epochs):
                order = epoch_order(n, config.seed, epoch, config.shuffle)
                for batch, b0 in enumerate(range(0, n, config.batch_size)):
                    idx = order[b0:b0 + config.batch_size]
                    x, y = dataset.images[idx], dataset.labels[idx]
                    acts = forward_range(layers, x, 0, cut, True, config.seed, epoch, batch)
                    chan.send(Msg.FORWARD_ACT, encode_forward(epoch, batch, y, acts))
                    _, payload = chan.recv(Msg.LOSS)
                    losses, _ = unpack_tensor(payload)
                    _, payload = chan.recv(Msg.BACKWARD_GRAD)
                    grad, _ = unpack_tensor(payload)
                    _, payload = chan.recv(Msg.STEP_DONE)
                    struct.unpack("<I", payload)
                    if host_trains:
                        backward_range(layers, grad, 0, cut, start)
                        sgd_step(layers, 0, cut, velocity, config.learning_rate, config.momentum)
                    expected += batch_boundary_bytes(len(idx), act_shape, host_trains)
                    batches += 1
        elapsed = time.perf_counter() - t0
        report.measured_boundary_bytes = (chan.sent - base_sent) + (chan.received - base_recv)
        report.expected_boundary_bytes = expected
        report.batches = batches
        chan.send(Msg.SHUTDOWN)
        _, payload = chan.recv(Msg.PARAMS)
        _, secure_params = decode_json(payload)
        proc.stdin.close()
        if proc.wait(timeout=30) != 0:
            raise BoundaryError(f"worker exited with {proc.returncode}")
    except (BoundaryError, BrokenPipeError, OSError) as exc:
        raise _worker_failure(proc, errfile, exc) from exc
    finally:
        if proc.poll() is None:
            proc.kill()
        errfile.close()
    clear_caches(layers)
    it = iter(secure_params)
    for pos in range(cut, n_layers):
        for p in layers[pos].params:
            p.value = next(it)
    return host, elapsed


def sweep_cuts(model: Model, dataset, config: TrainConfig, budget: int = DEFAULT_BUDGET,
               repeats: int = 1, freeze_mask=None) -> list[CostReport]:
    """One CostReport per cut, moving the cut from the last layer towards the input.

    Cuts whose memory account exceeds ``budget`` are reported as skipped
    without starting a worker. With ``repeats > 1`` each timing is the
    minimum over the runs.
    """
    reports = []
    for cut in range(len(model.layers) - 1, -1, -1):
        plan = PartitionPlan(cut, budget, config.batch_size)
        try:
            acct = validate_plan(model, plan)
        except BudgetError as err:
            acct = account_memory(model, plan)
            n_params = sum(1 for p in range(cut, len(model.layers)) if model.layers[p].params)
            reports.append(CostReport(cut, cut_label(model, cut), n_params, acct, skipped=True, reason=str(err)))
            continue
        runs = [run_partitioned_training(model, plan, dataset, config, freeze_mask)[1] for _ in range(repeats)]
        rep = runs[0]
        if repeats > 1:
            # the fastest run is the least disturbed by other load on the machine
            rep.wall_time_monolithic_s = min(r.wall_time_monolithic_s for r in runs)
            rep.wall_time_partitioned_s = min(r.wall_time_partitioned_s for r in runs)
            if rep.cut_index < len(model.layers):
                rep.overhead_fraction = (rep.wall_time_partitioned_s - rep.wall_time_monolithic_s) / max(
                    rep.wall_time_monolithic_s, 1e-12)
        reports.append(rep)
    return reports


def cost_csv(reports, include_timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_CSV_COLUMNS + ["skipped"])
    for r in reports:
        timing = [repr(r.wall_time_monolithic_s), repr(r.wall_time_partitioned_s), repr(r.overhead_fraction)]
        if not include_timing:
            timing = ["", "", ""]
        w.writerow([r.cut_label, r.param_layers_secure, r.secure_bytes, r.copied_front_bytes, *timing,
                    r.boundary_bytes_per_batch, int(r.skipped)])
    return buf.getvalue()
