"""Secure-side process: owns the layers from the cut onwards and the cost.

Run as ``python -m layerscope.enclave.worker``; frames arrive on stdin and
replies go to stdout.
"""

from __future__ import annotations

import struct
import sys

import numpy as np

from layerscope import ops
from layerscope.enclave.memory import BudgetError, PartitionPlan, validate_plan
from layerscope.enclave.protocol import (
    Channel, Msg, decode_forward, decode_json, encode_json, pack_tensor,
)
from layerscope.model import backward_range, forward_range, init_model, sgd_step


class SecureSide:
    def __init__(self, cfg: dict, tensors: list):
        model = init_model(cfg["arch"], cfg["input_shape"], cfg["seed"])
        self.cut = cfg["cut"]
        plan = PartitionPlan(self.cut, cfg["budget"], cfg["batch_size"])
        it = iter(tensors)
        for pos in range(self.cut, len(model.layers)):
            for p, frozen in zip(model.layers[pos].params, cfg["frozen"][str(pos)]):
                p.value = next(it)
                p.frozen = frozen
        self.front_copy = list(it)
        validate_plan(model, plan)  # raises BudgetError before any training
        # keep nothing from the untrusted prefix
        self.layers = [None] * self.cut + model.layers[self.cut:]
        self.n = len(self.layers)
        self.start = cfg["start"]
        self.lr = cfg["lr"]
        self.momentum = cfg["momentum"]
        self.seed = cfg["train_seed"]
        self.velocity = {}

    def step(self, epoch, batch, labels, acts):
        logits = forward_range(self.layers, acts, self.cut, self.n, True, self.seed, epoch, batch)
        losses = ops.cross_entropy_per_example(logits, labels)
        if not np.isfinite(losses.mean()):
            return losses, None, 0, False
        grad = ops.softmax_cross_entropy_backward(ops.softmax(logits), labels)
        grad = backward_range(self.layers, grad, self.cut, self.n, self.start)
        sgd_step(self.layers, self.cut, self.n, self.velocity, self.lr, self.momentum)
        correct = int((logits.argmax(axis=1) == labels).sum())
        return losses, grad, correct, True

    def params(self):
        return [p.value for pos in range(self.cut, self.n) for p in self.layers[pos].params]


def serve(chan: Channel) -> int:
    _, payload = chan.recv(Msg.INIT)
    cfg, tensors = decode_json(payload)
    try:
        side = SecureSide(cfg, tensors)
    except BudgetError as err:
        chan.send(Msg.ERROR, f"budget: {err}".encode())
        return 5
    chan.send(Msg.READY)
    while True:
        kind, payload = chan.recv()
        if kind is Msg.SHUTDOWN:
            chan.send(Msg.PARAMS, encode_json({}, side.params()))
            return 0
        if kind is not Msg.FORWARD_ACT:
            chan.send(Msg.ERROR, f"unexpected {kind.name}".encode())
            return 1
        epoch, batch, labels, acts = decode_forward(payload)
        losses, grad, correct, ok = side.step(epoch, batch, labels, acts)
        if not ok:
            chan.send(Msg.ERROR, f"divergence {epoch} {batch} {float(losses.mean())}".encode())
            return 4
        chan.send(Msg.LOSS, pack_tensor(losses))
        chan.send(Msg.BACKWARD_GRAD, pack_tensor(grad if grad is not None else np.zeros(0)))
        chan.send(Msg.STEP_DONE, struct.pack("<I", correct))


def main() -> int:
    return serve(Channel(sys.stdin.buffer, sys.stdout.buffer))


if __name__ == "__main__":
    sys.exit(main())
