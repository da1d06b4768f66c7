"""Lasso-regularised cross-entropy training, evaluation and magnitude pruning."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DivergedError, IntegrityError, InvalidInputError
from .graph import GridGraph, build_grid_graph
from .model import ModelParams, check_input, forward

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lam: float = 1e-4
    epochs: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    prune_threshold: float = 1e-3
    retrain_epochs: int = 0
    update_rule: str = "product"
    accumulate: int = 8
    threads: int = 1

    def __post_init__(self):
        # lr == 0 is accepted here so a no-op run is expressible; the CLI rejects it.
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise InvalidInputError(f"learning rate must be a finite non-negative number, got {self.lr}")
        if self.lam < 0:
            raise InvalidInputError(f"lasso coefficient must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInputError(f"optimizer must be one of {OPTIMIZERS}")
        if self.prune_threshold < 0:
            raise InvalidInputError("prune threshold must be >= 0")
        if self.accumulate < 1 or self.threads < 1 or self.retrain_epochs < 0:
            raise InvalidInputError("accumulate and threads must be >= 1, retrain_epochs >= 0")


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray
    mean_loss: float

    @classmethod
    def from_predictions(cls, labels: Sequence[int], preds: Sequence[int], losses: Sequence[float], num_classes: int):
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
        total = int(confusion.sum())
        return cls(
            accuracy=float(np.trace(confusion)) / total if total else 0.0,
            confusion=confusion,
            mean_loss=float(np.mean(losses)) if len(losses) else 0.0,
        )

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class SparsityReport:
    per_matrix: dict[str, float]
    overall: float
    threshold: float = 0.0

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "overall": self.overall, "per_matrix": dict(self.per_matrix)}


def _labelled_graphs(dataset) -> list[tuple[GridGraph, int]]:
    out = []
    for item in dataset:
        if isinstance(item, tuple):
            graph, label = item
        else:
            graph, label = build_grid_graph(item.image), item.label
        out.append((graph, int(label)))
    return out


def loss_ce_lasso(logits, true_class: int, params: ModelParams, lam: float) -> Tensor:
    """Cross-entropy plus ``lam`` times the L1 norm of every weight matrix (biases excluded)."""
    if lam < 0:
        raise InvalidInputError(f"lasso coefficient must be >= 0, got {lam}")
    ce = ad.cross_entropy(logits, true_class)
    if lam == 0:
        return ce
    penalty = None
    for name, value in params.named_parameters():
        if np.ndim(value.data if isinstance(value, Tensor) else value) != 2:
            continue
        term = ad.abs_sum(value)
        penalty = term if penalty is None else ad.add(penalty, term)
    return ad.add(ce, ad.scale(penalty, lam))


def sample_gradients(model: ModelParams, graph: GridGraph, label: int, lam: float):
    """Loss, logits and per-parameter gradients for one sample."""
    bound, leaves = model.bind(requires_grad=True)
    with Tape() as tape:
        logits, _ = forward(bound, graph)
        loss = loss_ce_lasso(logits, label, bound, lam)
    grads = ad.backward(tape, loss, wrt=leaves.values())
    return (
        loss.item(),
        logits.data.copy(),
        {name: grads.get(leaf, np.zeros_like(leaf.data)) for name, leaf in leaves.items()},
    )


def _guarded_gradients(args):
    try:
        return sample_gradients(*args)
    except (IntegrityError, FloatingPointError):
        return float("nan"), None, None


class _Adam:
    def __init__(self, values: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in values.items()}
        self.v = {k: np.zeros_like(v) for k, v in values.items()}

    def step(self, values, grads):
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for name, g in grads.items():
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            values[name] = values[name] - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class _Sgd:
    def __init__(self, values, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, values, grads):
        for name, g in grads.items():
            values[name] = values[name] - self.cfg.lr * g


def train(
    model: ModelParams,
    dataset,
    cfg: TrainConfig,
    mask: dict[str, np.ndarray] | None = None,
) -> tuple[ModelParams, list[Metrics]]:
    """Train with per-sample gradients averaged over accumulation windows.

    ``dataset`` holds :class:`~sargnn.dataset.Sample` objects or
    ``(GridGraph, label)`` pairs. ``mask`` (name -> boolean array) pins the
    masked-out entries of those parameters at exactly zero, which is how
    pruned models are retrained.
    """
    data = _labelled_graphs(dataset)
    if not data:
        raise InvalidInputError("cannot train on an empty dataset")
    for graph, label in data:
        check_input(model, graph)
        if not 0 <= label < model.num_classes:
            raise InvalidInputError(f"label {label} outside [0, {model.num_classes})")

    rng = np.random.default_rng(cfg.seed)
    values = {name: np.array(v, copy=True) for name, v in model.copy().named_parameters()}
    if mask:
        for name, keep in mask.items():
            values[name] = np.where(keep, values[name], 0.0).astype(values[name].dtype)
    optimizer = (_Adam if cfg.optimizer == "adam" else _Sgd)(values, cfg)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(data))
            labels, preds, losses = [], [], []
            for start in range(0, len(order), cfg.accumulate):
                window = order[start : start + cfg.accumulate]
                current = model.with_values(values)
                jobs = [(current, data[i][0], data[i][1], cfg.lam) for i in window]
                results = pool.map(_guarded_gradients, jobs) if pool else map(_guarded_gradients, jobs)
                total = None
                for i, (loss, logits, grads) in zip(window, results):
                    if not math.isfinite(loss):
                        raise DivergedError(epoch, int(i), loss)
                    labels.append(data[i][1])
                    preds.append(int(np.argmax(logits)))
                    losses.append(loss)
                    if total is None:
                        total = grads
                    else:
                        for name, g in grads.items():
                            total[name] = total[name] + g
                grads = {name: g / len(window) for name, g in total.items()}
                optimizer.step(values, grads)
                if mask:
                    for name, keep in mask.items():
                        values[name] = np.where(keep, values[name], 0.0).astype(values[name].dtype)
            metrics = Metrics.from_predictions(labels, preds, losses, model.num_classes)
            log.info("epoch=%d loss=%.6f acc=%.4f", epoch, metrics.mean_loss, metrics.accuracy)
            history.append(metrics)
    finally:
        if pool:
            pool.shutdown()
    return model.with_values(values), history


def evaluate(model: ModelParams, dataset, threads: int = 1) -> Metrics:
    """Accuracy, confusion matrix (rows: true class) and mean cross-entropy."""
    data = _labelled_graphs(dataset)
    if not data:
        raise InvalidInputError("cannot evaluate on an empty dataset")

    def one(item):
        graph, label = item
        logits, _ = forward(model, graph)
        return int(np.argmax(logits.data)), ad.cross_entropy(logits, label).item()

    for graph, _ in data:
        check_input(model, graph)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(one, data))
    else:
        outs = [one(item) for item in data]
    return Metrics.from_predictions(
        [label for _, label in data], [p for p, _ in outs], [l for _, l in outs], model.num_classes
    )


def weight_fraction_below(model: ModelParams, threshold: float) -> float:
    """Fraction of weight-matrix entries with ``|w| < threshold``."""
    weights = [np.asarray(v) for name, v in model.named_parameters() if np.ndim(v) == 2]
    total = sum(w.size for w in weights)
    return sum(int(np.count_nonzero(np.abs(w) < threshold)) for w in weights) / total if total else 0.0


def sparsity_report(model: ModelParams, threshold: float = 0.0) -> SparsityReport:
    per = {}
    zeros = total = 0
    for name, value in model.named_parameters():
        if np.ndim(value) != 2:
            continue
        nz = int(np.count_nonzero(np.asarray(value) == 0))
        per[name] = nz / value.size
        zeros += nz
        total += value.size
    return SparsityReport(per, zeros / total if total else 0.0, threshold)


def prune_weights(model: ModelParams, tau: float) -> tuple[ModelParams, SparsityReport]:
    """Zero every weight with ``|w| < tau``; biases are left alone."""
    if tau < 0:
        raise InvalidInputError(f"prune threshold must be >= 0, got {tau}")

    def prune(name, value):
        value = np.array(value, copy=True)
        if value.ndim == 2:
            value[np.abs(value) < tau] = 0.0
        return value

    pruned = model.map_parameters(prune)
    return pruned, sparsity_report(pruned, tau)


def pruning_mask(model: ModelParams) -> dict[str, np.ndarray]:
    """``True`` where a weight is still alive."""
    return {name: np.asarray(v) != 0 for name, v in model.named_parameters() if np.ndim(v) == 2}


def metrics_document(history: Iterable[Metrics], final: Metrics | None = None, **extra) -> dict:
    doc = {"epochs": [dict(epoch=k, **m.to_dict()) for k, m in enumerate(history, start=1)]}
    if final is not None:
        doc["final"] = final.to_dict()
    doc.update(extra)
    return doc


def write_metrics_json(path, document: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")
