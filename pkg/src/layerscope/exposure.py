"""Per-layer exposure of the private training set.

For each measurable layer l of a model M trained on the private half S of
X, two copies are fine-tuned with every other layer frozen: M_s on S alone
and M_b on all of X. Their generalization errors (mean cost on T minus mean
cost on S) give the exposure risk (eps_s - eps_b) / eps_s of layer l.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from layerscope import __version__
from layerscope.data import Dataset, PrivateSplit, split_private
from layerscope.model import (
    DivergenceError, LayerSpec, Model, TrainConfig, activations, costs_from, evaluate,
    fit, format_arch, init_model, train,
)

log = logging.getLogger(__name__)

UNDEFINED_EPS = 1e-9

CSV_COLUMNS = [
    "dataset", "layer", "eps_s_mean", "eps_s_ci", "eps_b_mean", "eps_b_ci", "risk_mean", "risk_ci",
    "neurons", "risk_per_neuron_mean", "risk_per_neuron_ci", "excluded_cells",
]


def generalization_error(model: Model, S: Dataset, T: Dataset) -> float:
    """Mean cost on T minus mean cost on S."""
    return evaluate(model, T)[1] - evaluate(model, S)[1]


def exposure_risk(eps_s: float, eps_b: float) -> tuple[float, bool]:
    """``(eps_s - eps_b) / eps_s`` and an undefined flag for ``|eps_s| < 1e-9`` (risk is NaN then)."""
    if abs(eps_s) < UNDEFINED_EPS:
        return float("nan"), True
    return (eps_s - eps_b) / eps_s, False


def neuron_count(spec: LayerSpec, output_shape=None) -> int:
    """Neurons of a parameterized layer: filters for a conv layer, units for a dense one."""
    if not spec.has_params:
        raise ValueError(f"{spec.token} has no neurons to count")
    return spec.size


def _only(model: Model, l: int) -> list[bool]:
    """Freeze mask leaving just the l-th measurable layer (1-based) trainable."""
    if not 1 <= l <= model.num_target_layers:
        raise ValueError(f"layer index {l} outside 1..{model.num_target_layers}")
    pos = model.target_layers[l - 1]
    return [p != pos for p in model.param_layers]


def make_ms(M: Model, l: int, S: Dataset, finetune: TrainConfig) -> Model:
    """Copy of M with layer l fine-tuned on the private set S and everything else frozen."""
    return train(M, S, finetune, _only(M, l))[0]


def make_mb(M: Model, l: int, X: Dataset, finetune: TrainConfig) -> Model:
    """Copy of M with layer l fine-tuned on the whole training set X = S + T."""
    return train(M, X, finetune, _only(M, l))[0]


# ---------------------------------------------------------------------------
# report types


@dataclass
class ExposureConfig:
    base_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, learning_rate=0.01))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, learning_rate=0.001))
    repeats: int = 5
    ci_level: float = 0.95
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if self.repeats < 1 or self.repeats != len(self.seeds):
            raise ValueError(f"repeats={self.repeats} must be >= 1 and match {len(self.seeds)} seeds")


@dataclass
class LayerExposure:
    layer_index: int
    eps_s: float
    eps_b: float
    risk: float
    risk_clamped: float
    neurons: int
    risk_per_neuron: float
    undefined: bool

    @classmethod
    def from_errors(cls, l, eps_s, eps_b, neurons):
        risk, undefined = exposure_risk(eps_s, eps_b)
        clamped = float("nan") if undefined else min(1.0, max(0.0, risk))
        return cls(l, eps_s, eps_b, risk, clamped, neurons, clamped / neurons, undefined)


@dataclass
class Cell:
    """One (seed, layer) measurement."""

    seed: int
    layer: int
    exposure: LayerExposure | None
    costs: dict = field(default_factory=dict)
    excluded: str | None = None

    @property
    def sign_anomaly(self) -> bool:
        return self.exposure is not None and self.exposure.eps_s < self.exposure.eps_b


def mean_ci(values, level=0.95) -> tuple[float, float]:
    """Mean and Student-t half-width; the half-width is 0 for fewer than two values."""
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    half = stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return float(v.mean()), float(half)


@dataclass
class ExposureReport:
    arch: str
    dataset: str
    config: dict
    seeds: list
    layers: list  # per-layer aggregate dicts
    cells: list  # per-cell dicts
    base: list  # per-seed base-model stats
    ci_defined: bool

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.layers:
            w.writerow([self.dataset, row["layer"]] + [_fmt(row[c]) for c in CSV_COLUMNS[2:8]]
                       + [row["neurons"], _fmt(row["risk_per_neuron_mean"]), _fmt(row["risk_per_neuron_ci"]),
                          row["excluded_cells"]])
        return buf.getvalue()

    def column(self, name) -> list:
        return [row[name] for row in self.layers]


def _fmt(x) -> str:
    return repr(float(x))


def _clean(x):
    # NaN (undefined risk, empty aggregates) becomes null
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


# ---------------------------------------------------------------------------
# measurement pipeline


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**asdict(cfg), "seed": seed})


def measure_seed(M: Model, split: PrivateSplit, finetune: TrainConfig) -> list[Cell]:
    """All per-layer cells for one trained base model and its split.

    Layers before the fine-tuned one are frozen and dropout-free in the
    measured stacks, so their activations are computed once per layer and
    reused for both fine-tunes and all four cost evaluations.
    """
    X = split.X
    n_s = len(split.S)
    layers = M.layers
    feats, at = X.images, 0
    cells = []
    for l, pos in enumerate(M.target_layers, start=1):
        if all(layers[p].spec.kind != "dropout" for p in range(pos)):
            feats, at = activations(layers, feats, at, pos), pos
        else:  # a dropout layer in front: recompute from the images
            feats, at = X.images, 0
        cell = Cell(split.seed, l, None)
        try:
            eps = {}
            for tag, lo_hi in (("s", (0, n_s)), ("b", (0, len(X)))):
                tuned = M.copy()
                tuned.set_freeze_mask(_only(M, l))
                fit(tuned.layers, feats[lo_hi[0]:lo_hi[1]], X.labels[lo_hi[0]:lo_hi[1]], finetune, at)
                cost, _ = costs_from(tuned.layers, feats, X.labels, at)
                cost_s, cost_t = float(cost[:n_s].mean()), float(cost[n_s:].mean())
                cell.costs[f"M{tag}_S"], cell.costs[f"M{tag}_T"] = cost_s, cost_t
                eps[tag] = cost_t - cost_s
            cell.exposure = LayerExposure.from_errors(l, eps["s"], eps["b"], neuron_count(M.specs[pos]))
        except DivergenceError as err:
            log.warning("seed %d layer %d excluded: %s", split.seed, l, err)
            cell.excluded = str(err)
        cells.append(cell)
    return cells


def _run_seed(args):
    specs, input_shape, X, seed, cfg, model, split = args
    if split is None:
        split = split_private(X, seed)
    base_stats = {"seed": seed}
    try:
        if model is None:
            model, hist = train(init_model(specs, input_shape, seed), split.S, _with_seed(cfg.base_train, seed))
            base_stats["train_loss"] = hist[-1]["loss"] if hist else None
        acc_s, cost_s = evaluate(model, split.S)
        acc_t, cost_t = evaluate(model, split.T)
        base_stats.update(acc_S=acc_s, acc_T=acc_t, cost_S=cost_s, cost_T=cost_t, eps=cost_t - cost_s)
    except DivergenceError as err:
        base_stats["diverged"] = str(err)
        n = sum(1 for s in specs if s.has_params and not s.softmax)
        return base_stats, [Cell(seed, l, None, excluded=f"base model: {err}") for l in range(1, n + 1)]
    return base_stats, measure_seed(model, split, _with_seed(cfg.finetune, seed))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LAYERSCOPE_THREADS", "1")))
    except ValueError:
        return 1


def measure_all(M: Model | None, split: PrivateSplit, cfg: ExposureConfig) -> ExposureReport:
    """Repeat the per-layer measurement over ``cfg.seeds`` and aggregate.

    Each seed re-splits X = S + T and retrains the base model on its S; the
    given ``M`` (trained on ``split.S``) is reused for the seed equal to
    ``split.seed``. Seeds run in a process pool capped by LAYERSCOPE_THREADS
    and are folded in seed order.
    """
    X = split.X
    specs = M.specs if M is not None else None
    input_shape = M.input_shape if M is not None else X.image_shape
    if specs is None:
        raise ValueError("measure_all needs a model (or use measure_dataset)")
    # the given model keeps the split it was trained on; other seeds re-split X
    jobs = [(specs, input_shape, X, s, cfg, *((M, split) if s == split.seed else (None, None)))
            for s in cfg.seeds]
    return _aggregate(M.arch, X.name, specs, cfg, _run_jobs(jobs))


def measure_dataset(arch_specs, X: Dataset, cfg: ExposureConfig) -> ExposureReport:
    """Full pipeline from scratch: split, base training and per-layer fine-tuning for every seed."""
    jobs = [(list(arch_specs), X.image_shape, X, s, cfg, None, None) for s in cfg.seeds]
    return _aggregate(format_arch(arch_specs), X.name, list(arch_specs), cfg, _run_jobs(jobs))


def _run_jobs(jobs):
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [_run_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_seed, jobs))


def _aggregate(arch, dataset_name, specs, cfg: ExposureConfig, results) -> ExposureReport:
    targets = [i for i, s in enumerate(specs) if s.has_params and not s.softmax]
    bases, cells = [], []
    for base, seed_cells in results:
        bases.append(base)
        cells.extend(seed_cells)
    rows = []
    for l, pos in enumerate(targets, start=1):
        mine = [c for c in cells if c.layer == l]
        ok = [c.exposure for c in mine if c.exposure is not None]
        defined = [e for e in ok if not e.undefined]
        row = {"layer": l, "token": specs[pos].token, "neurons": neuron_count(specs[pos]),
               "excluded_cells": sum(c.exposure is None for c in mine),
               "undefined_cells": len(ok) - len(defined),
               "sign_anomalies": sum(c.sign_anomaly for c in mine)}
        for name, values in (
            ("eps_s", [e.eps_s for e in ok]),
            ("eps_b", [e.eps_b for e in ok]),
            ("risk", [e.risk_clamped for e in defined]),
            ("risk_raw", [e.risk for e in defined]),
            ("risk_per_neuron", [e.risk_per_neuron for e in defined]),
        ):
            row[f"{name}_mean"], row[f"{name}_ci"] = mean_ci(values, cfg.ci_level)
        rows.append(row)
    cell_dicts = []
    for c in cells:
        d = {"seed": c.seed, "layer": c.layer, "excluded": c.excluded, "costs": c.costs,
             "sign_anomaly": c.sign_anomaly}
        if c.exposure is not None:
            d.update({k: v for k, v in asdict(c.exposure).items() if k != "layer_index"})
        cell_dicts.append(d)
    config = {"base_train": asdict(cfg.base_train), "finetune": asdict(cfg.finetune), "repeats": cfg.repeats,
              "ci_level": cfg.ci_level, "version": __version__}
    return ExposureReport(arch, dataset_name, config, list(cfg.seeds), rows, cell_dicts, bases,
                          ci_defined=cfg.repeats > 1)
