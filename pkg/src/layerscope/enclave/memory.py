"""Partition plans and memory accounting for the secure (enclave) side."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from layerscope.model import Model

MIB = 1024 * 1024
DEFAULT_BUDGET = 16 * MIB
ELEM = 8  # float64


class BudgetError(RuntimeError):
    def __init__(self, total: int, budget: int):
        super().__init__(f"secure region needs {total} bytes, budget is {budget}")
        self.total = total
        self.budget = budget


@dataclass(frozen=True)
class PartitionPlan:
    """Layers ``cut_index..end`` (stack positions, parameterless layers
    included) plus the cost computation run on the secure side."""

    cut_index: int
    budget_bytes: int = DEFAULT_BUDGET
    batch_size: int = 128

    def secure_positions(self, model: Model) -> range:
        if not 0 <= self.cut_index <= len(model.layers):
            raise ValueError(f"cut {self.cut_index} outside 0..{len(model.layers)}")
        return range(self.cut_index, len(model.layers))


@dataclass
class LayerMemory:
    pos: int
    token: str
    params_bytes: int = 0
    grads_bytes: int = 0
    momentum_bytes: int = 0
    activation_bytes: int = 0

    @property
    def total(self) -> int:
        return self.params_bytes + self.grads_bytes + self.momentum_bytes + self.activation_bytes


@dataclass
class MemoryAccount:
    layers: list = field(default_factory=list)
    copied_front_layers: list = field(default_factory=list)  # [{"pos", "token", "bytes"}]
    boundary_bytes: int = 0  # incoming cut activation and its gradient

    @property
    def copied_front_bytes(self) -> int:
        return sum(c["bytes"] for c in self.copied_front_layers)

    @property
    def total_bytes(self) -> int:
        return sum(m.total for m in self.layers) + self.copied_front_bytes + self.boundary_bytes


def param_bytes(layer) -> int:
    return ELEM * sum(p.size for p in layer.params)


def account_memory(model: Model, plan: PartitionPlan) -> MemoryAccount:
    """Bytes the secure side holds for one in-flight batch.

    Each secure parameterized layer counts parameters, gradients and momentum
    buffers; every secure layer counts its output and output-gradient buffers
    for ``plan.batch_size`` examples (max pooling adds its argmax indices,
    dropout its mask). A region whose first layer has no parameters also
    holds a copy of the nearest parameterized layer in front of it.
    """
    secure = plan.secure_positions(model)
    acct = MemoryAccount()
    if len(secure) == 0:
        return acct
    b = plan.batch_size
    for pos in secure:
        layer = model.layers[pos]
        out = int(np.prod(layer.out_shape))
        mem = LayerMemory(pos, layer.spec.token, activation_bytes=2 * ELEM * b * out)
        if layer.params:
            mem.params_bytes = mem.grads_bytes = mem.momentum_bytes = param_bytes(layer)
        if layer.spec.kind in ("maxpool", "dropout"):
            mem.activation_bytes += ELEM * b * out if layer.spec.kind == "maxpool" else b * int(np.prod(layer.in_shape))
        acct.layers.append(mem)
    first = model.layers[secure.start]
    if not first.params:
        front = next((p for p in range(secure.start - 1, -1, -1) if model.layers[p].params), None)
        if front is not None:
            acct.copied_front_layers.append(
                {"pos": front, "token": model.layers[front].spec.token, "bytes": param_bytes(model.layers[front])})
    acct.boundary_bytes = 2 * ELEM * b * int(np.prod(first.in_shape))
    return acct


def validate_plan(model: Model, plan: PartitionPlan) -> MemoryAccount:
    """The plan's memory account, or BudgetError when it exceeds the budget."""
    acct = account_memory(model, plan)
    if acct.total_bytes > plan.budget_bytes:
        raise BudgetError(acct.total_bytes, plan.budget_bytes)
    return acct


def cut_label(model: Model, cut: int) -> str:
    """Short name of the first secure layer, e.g. SM, FC, D, MP3 or C6."""
    if cut >= len(model.layers):
        return "none"
    spec = model.specs[cut]
    same = [i for i, s in enumerate(model.specs) if s.label == spec.label]
    return spec.label if len(same) == 1 else f"{spec.label}{same.index(cut) + 1}"
