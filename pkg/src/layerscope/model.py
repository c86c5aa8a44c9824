"""Architecture strings, the layer-stack model, SGD training and evaluation."""

from __future__ import annotations

import copy
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from layerscope import ops
from layerscope.ops import DTYPE, ParamTensor

# Six conv layers and one hidden FC layer ahead of a 10-way softmax classifier.
VGG7 = "16C3-16C3-MP-32C3-32C3-MP-32C3-32C3-MP-64FC-10SM"
# Same stack with the dropout layer that the deployed network carries in front of the FC layer.
VGG7_DROPOUT = "16C3-16C3-MP-32C3-32C3-MP-32C3-32C3-MP-D50-64FC-10SM"


class ArchParseError(ValueError):
    def __init__(self, message: str, position: int, token: str):
        super().__init__(f"token {position} ({token!r}): {message}")
        self.position = position
        self.token = token


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "maxpool" | "dropout" | "fc"
    size: int = 0  # filters or units
    kernel: int = 3
    rate: float = 0.0
    softmax: bool = False  # the classifier head: FC without ReLU, followed by softmax

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "fc")

    @property
    def token(self) -> str:
        if self.kind == "conv":
            return f"{self.size}C{self.kernel}"
        if self.kind == "maxpool":
            return "MP"
        if self.kind == "dropout":
            return f"D{round(self.rate * 100)}"
        return f"{self.size}{'SM' if self.softmax else 'FC'}"

    @property
    def label(self) -> str:
        """Short layer-type label: C, MP, D, FC or SM."""
        return {"conv": "C", "maxpool": "MP", "dropout": "D"}.get(self.kind) or ("SM" if self.softmax else "FC")


_TOKEN = re.compile(r"^(?:(\d+)C(\d+)|MP|(\d+)FC|(\d+)SM|D(\d+))$")


def parse_arch(spec: str) -> list[LayerSpec]:
    """Parse a dash-separated architecture string such as ``VGG7``.

    ``<n>C<k>`` conv with n filters of size k (ReLU implied), ``MP`` 2x2 max pool,
    ``<n>FC`` dense layer (ReLU implied), ``D<p>`` dropout with rate p percent,
    ``<n>SM`` the final n-way dense layer feeding the softmax.
    """
    tokens = spec.strip().split("-")
    layers = []
    for pos, tok in enumerate(tokens):
        m = _TOKEN.match(tok)
        if not m:
            raise ArchParseError("unknown token", pos, tok)
        conv_n, conv_k, fc_n, sm_n, drop = m.groups()
        if conv_n is not None:
            n, k = int(conv_n), int(conv_k)
            if n < 1 or k < 1:
                raise ArchParseError("filters and kernel size must be >= 1", pos, tok)
            layers.append(LayerSpec("conv", n, kernel=k))
        elif tok == "MP":
            layers.append(LayerSpec("maxpool"))
        elif fc_n is not None:
            if int(fc_n) < 1:
                raise ArchParseError("units must be >= 1", pos, tok)
            layers.append(LayerSpec("fc", int(fc_n)))
        elif sm_n is not None:
            if int(sm_n) < 1:
                raise ArchParseError("classes must be >= 1", pos, tok)
            if pos != len(tokens) - 1:
                raise ArchParseError("softmax head must be the last token", pos, tok)
            layers.append(LayerSpec("fc", int(sm_n), softmax=True))
        else:
            rate = int(drop)
            if rate >= 100:
                raise ArchParseError("dropout rate must be below 100 percent", pos, tok)
            layers.append(LayerSpec("dropout", rate=rate / 100))
    if not layers[-1].softmax:
        raise ArchParseError("architecture must end with a <n>SM head", len(tokens) - 1, tokens[-1])
    return layers


def format_arch(specs) -> str:
    return "-".join(s.token for s in specs)


# ---------------------------------------------------------------------------
# runtime layers


class Layer:
    params: list[ParamTensor] = []

    def __init__(self, spec: LayerSpec, in_shape: tuple):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = in_shape
        self.cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, need_input=True):
        raise NotImplementedError

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params)


class Conv(Layer):
    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape)
        c, h, w = in_shape
        k = spec.kernel
        pad = k // 2
        self.pad = pad
        self.out_shape = (spec.size, ops.conv_output_size(h, k, 1, pad), ops.conv_output_size(w, k, 1, pad))
        if min(self.out_shape[1:]) < 1:
            raise ops.ShapeError(f"conv {spec.token} collapses input {in_shape}")
        fan_in = c * k * k
        self.params = [
            ParamTensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.size, c, k, k))),
            ParamTensor(np.zeros(spec.size)),
        ]

    def forward(self, x, train=False, rng=None):
        z, conv_cache = ops.conv2d_forward(x, self.params[0].value, self.params[1].value, 1, self.pad)
        out, mask = ops.relu_forward(z)
        self.cache = (conv_cache, mask)
        return out

    def backward(self, grad, need_input=True):
        conv_cache, mask = self.cache
        gx, gw, gb = ops.conv2d_backward(ops.relu_backward(grad, mask), conv_cache, need_input)
        self.params[0].grad, self.params[1].grad = gw, gb
        return gx


class MaxPool(Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ops.ShapeError(f"max pool needs at least 2x2 input, got {in_shape}")
        self.out_shape = (c, h // 2, w // 2)

    def forward(self, x, train=False, rng=None):
        out, self.cache = ops.maxpool2d_forward(x, 2, 2)
        return out

    def backward(self, grad, need_input=True):
        return ops.maxpool2d_backward(grad, self.cache) if need_input else None


class Dropout(Layer):
    def forward(self, x, train=False, rng=None):
        out, self.cache = ops.dropout_forward(x, self.spec.rate, train, rng)
        return out

    def backward(self, grad, need_input=True):
        return ops.dropout_backward(grad, self.cache) if need_input else None


class Dense(Layer):
    def __init__(self, spec, in_shape, rng):
        super().__init__(spec, in_shape)
        fan_in = int(np.prod(in_shape))
        self.out_shape = (spec.size,)
        # He scaling suits the ReLU layers; the softmax head starts small so outputs begin near uniform
        std = 0.01 if spec.softmax else np.sqrt(2.0 / fan_in)
        self.params = [
            ParamTensor(rng.normal(0.0, std, (fan_in, spec.size))),
            ParamTensor(np.zeros(spec.size)),
        ]

    def forward(self, x, train=False, rng=None):
        z, fc_cache = ops.fc_forward(x.reshape(len(x), -1), self.params[0].value, self.params[1].value)
        if self.spec.softmax:
            self.cache = (fc_cache, None)
            return z
        out, mask = ops.relu_forward(z)
        self.cache = (fc_cache, mask)
        return out

    def backward(self, grad, need_input=True):
        fc_cache, mask = self.cache
        if mask is not None:
            grad = ops.relu_backward(grad, mask)
        gx, gw, gb = ops.fc_backward(grad, fc_cache, need_input)
        self.params[0].grad, self.params[1].grad = gw, gb
        return None if gx is None else gx.reshape((len(gx),) + tuple(self.in_shape))


def build_layers(specs, input_shape, rng) -> list[Layer]:
    layers = []
    shape = tuple(input_shape)
    for spec in specs:
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ops.ShapeError(f"conv {spec.token} after a dense layer")
            layer = Conv(spec, shape, rng)
        elif spec.kind == "maxpool":
            if len(shape) != 3:
                raise ops.ShapeError("max pool after a dense layer")
            layer = MaxPool(spec, shape)
        elif spec.kind == "dropout":
            layer = Dropout(spec, shape)
        else:
            layer = Dense(spec, shape, rng)
        layers.append(layer)
        shape = layer.out_shape
    return layers


# ---------------------------------------------------------------------------
# model container


@dataclass
class Model:
    specs: list[LayerSpec]
    input_shape: tuple
    seed: int
    layers: list[Layer] = field(repr=False)

    @property
    def arch(self) -> str:
        return format_arch(self.specs)

    @property
    def param_layers(self) -> list[int]:
        """Stack positions of every layer that holds parameters (head included)."""
        return [i for i, s in enumerate(self.specs) if s.has_params]

    @property
    def target_layers(self) -> list[int]:
        """Stack positions of the measurable layers l = 1..L_p: every conv and hidden FC."""
        return [i for i, s in enumerate(self.specs) if s.has_params and not s.softmax]

    @property
    def num_target_layers(self) -> int:
        return len(self.target_layers)

    @property
    def freeze_mask(self) -> tuple[bool, ...]:
        return tuple(self.layers[i].frozen for i in self.param_layers)

    def set_freeze_mask(self, mask):
        mask = list(mask)
        if len(mask) != len(self.param_layers):
            raise ValueError(f"freeze mask has {len(mask)} entries, model has {len(self.param_layers)} parameterized layers")
        for i, frozen in zip(self.param_layers, mask):
            for p in self.layers[i].params:
                p.frozen = bool(frozen)

    def params(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params]

    def copy(self) -> "Model":
        twin = copy.copy(self)
        twin.specs = list(self.specs)
        clear_caches(self.layers)
        twin.layers = copy.deepcopy(self.layers)
        return twin

    def forward(self, x):
        """Eval-mode logits."""
        out = forward_range(self.layers, x, 0, len(self.layers), False, 0, 0, 0)
        clear_caches(self.layers)
        return out

    def same_params(self, other: "Model") -> bool:
        a, b = self.params(), other.params()
        return len(a) == len(b) and all(p.value.tobytes() == q.value.tobytes() for p, q in zip(a, b))


def init_model(specs, input_shape, seed: int) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)) for conv and hidden FC layers,
    N(0, 0.01) for the softmax head, zero biases, all layers trainable."""
    if isinstance(specs, str):
        specs = parse_arch(specs)
    rng = np.random.default_rng(seed)
    layers = build_layers(specs, tuple(input_shape), rng)
    return Model(list(specs), tuple(int(d) for d in input_shape), int(seed), layers)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError(f"invalid training config {self}")


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def layer_rng(seed: int, epoch: int, batch: int, pos: int) -> np.random.Generator:
    """Dropout stream for one layer in one batch; independent of data order and freezing."""
    return np.random.default_rng([seed, epoch, batch, pos])


def forward_range(layers, x, lo, hi, train, seed, epoch, batch):
    for pos in range(lo, hi):
        x = layers[pos].forward(x, train, layer_rng(seed, epoch, batch, pos) if train else None)
    return x


def first_trainable(layers, lo: int = 0) -> int | None:
    for pos in range(lo, len(layers)):
        if layers[pos].params and not layers[pos].frozen:
            return pos
    return None


def backward_range(layers, grad, lo, hi, stop_at):
    """Backprop from ``hi`` down to ``lo``; input gradients are produced only while
    a trainable layer remains at a position >= ``stop_at``."""
    for pos in range(hi - 1, lo - 1, -1):
        if pos < stop_at:
            break
        layer = layers[pos]
        need_input = pos > stop_at
        grad = layer.backward(grad, need_input=need_input)
    return grad


def sgd_step(layers, lo, hi, velocity, lr, momentum):
    """Momentum SGD: v <- mu*v + g; p <- p - lr*v. Frozen tensors are skipped."""
    for pos in range(lo, hi):
        for k, p in enumerate(layers[pos].params):
            if p.frozen:
                continue
            key = (pos, k)
            v = velocity.get(key)
            v = p.grad.copy() if v is None else momentum * v + p.grad
            velocity[key] = v
            p.value -= lr * v


def train(model: Model, dataset, config: TrainConfig, freeze_mask=None):
    """Mini-batch SGD with momentum on a copy of ``model``.

    Returns the trained copy and a per-epoch history of mean loss and
    accuracy. With ``freeze_mask`` given it replaces the model's own mask.
    """
    trained = model.copy()
    if freeze_mask is not None:
        trained.set_freeze_mask(freeze_mask)
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    history = fit(trained.layers, dataset.images, dataset.labels, config)
    return trained, history


def fit(layers, inputs, labels, config: TrainConfig, lo: int = 0) -> list[dict]:
    """Train ``layers[lo:]`` in place on ``inputs``, the activations entering position ``lo``.

    ``lo > 0`` is only valid when every layer before ``lo`` is frozen and
    deterministic, so that the inputs equal what those layers would produce.
    """
    n_layers = len(layers)
    start = first_trainable(layers, lo)
    history = []
    if config.epochs == 0 or start is None:
        return history
    velocity = {}
    n = len(labels)
    for epoch in range(config.epochs):
        order = epoch_order(n, config.seed, epoch, config.shuffle)
        total_loss, correct = 0.0, 0
        for batch, b0 in enumerate(range(0, n, config.batch_size)):
            idx = order[b0:b0 + config.batch_size]
            x, y = inputs[idx], labels[idx]
            logits = forward_range(layers, x, lo, n_layers, True, config.seed, epoch, batch)
            losses = ops.cross_entropy_per_example(logits, y)
            loss = float(losses.mean())
            if not np.isfinite(loss):
                raise DivergenceError(epoch, batch, loss)
            grad = ops.softmax_cross_entropy_backward(ops.softmax(logits), y)
            backward_range(layers, grad, lo, n_layers, start)
            sgd_step(layers, lo, n_layers, velocity, config.learning_rate, config.momentum)
            total_loss += float(losses.sum())
            correct += int((logits.argmax(axis=1) == y).sum())
        history.append({"epoch": epoch, "loss": total_loss / n, "accuracy": correct / n})
    clear_caches(layers)
    return history


def clear_caches(layers):
    for layer in layers:
        layer.cache = None


def activations(layers, inputs, lo: int, hi: int, batch_size: int = 500) -> np.ndarray:
    """Eval-mode activations leaving position ``hi - 1`` for inputs entering ``lo``."""
    if lo == hi:
        return inputs
    out = [forward_range(layers, inputs[b:b + batch_size], lo, hi, False, 0, 0, 0)
           for b in range(0, len(inputs), batch_size)]
    clear_caches(layers)
    return np.concatenate(out)


def costs_from(layers, inputs, labels, lo: int = 0, batch_size: int = 500):
    """Per-example cross-entropy and predictions, running ``layers[lo:]`` in eval mode."""
    costs, preds = [], []
    for b in range(0, len(labels), batch_size):
        logits = forward_range(layers, inputs[b:b + batch_size], lo, len(layers), False, 0, 0, 0)
        costs.append(ops.cross_entropy_per_example(logits, labels[b:b + batch_size]))
        preds.append(logits.argmax(axis=1))
    clear_caches(layers)
    return np.concatenate(costs), np.concatenate(preds)


def per_example_cost(model: Model, dataset, batch_size: int = 500) -> np.ndarray:
    """Cross-entropy of every example under eval-mode inference."""
    return costs_from(model.layers, dataset.images, dataset.labels, 0, batch_size)[0]


def predict(model: Model, images, batch_size: int = 500) -> np.ndarray:
    return costs_from(model.layers, images, np.zeros(len(images), dtype=np.int64), 0, batch_size)[1]


def evaluate(model: Model, dataset, batch_size: int = 500) -> tuple[float, float]:
    """Accuracy and mean cross-entropy over ``dataset`` with dropout disabled."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    costs, preds = costs_from(model.layers, dataset.images, dataset.labels, 0, batch_size)
    return float(np.mean(preds == dataset.labels)), float(costs.mean())


# ---------------------------------------------------------------------------
# checkpoints
#
# header: magic(8) version(u32) arch_len(u32) arch(utf-8) C,H,W(u32 x3) seed(i64) count(u32)
# then per tensor: ndim(u32) dims(u32 x ndim) data(float64 LE, row-major)

MAGIC = b"LSCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    arch = model.arch.encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(arch)), arch,
             struct.pack("<IIIqI", *model.input_shape, model.seed, len(model.params()))]
    for p in model.params():
        parts.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        parts.append(p.value.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a layerscope checkpoint")
    off = 8
    version, alen = struct.unpack_from("<II", buf, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    arch = buf[off:off + alen].decode()
    off += alen
    c, h, w, seed, count = struct.unpack_from("<IIIqI", buf, off)
    off += struct.calcsize("<IIIqI")
    model = init_model(parse_arch(arch), (c, h, w), seed)
    params = model.params()
    if count != len(params):
        raise CheckpointError(f"{path}: {count} tensors stored, architecture needs {len(params)}")
    for p in params:
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        if tuple(dims) != p.value.shape:
            raise CheckpointError(f"{path}: tensor shape {dims} != expected {p.value.shape}")
        nbytes = 8 * int(np.prod(dims))
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated tensor data")
        p.value = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).astype(DTYPE).reshape(dims)
        off += nbytes
    return model
