"""Loss, optimiser, training loop and repeated evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import InstanceBag
from .errors import ConfigurationError, DataError, TrainingError
from .metrics import accuracy, roc_auc
from .model import MmilModel, base_partition, derive_seed, mmil_forward, plan_bag, save_checkpoint

LOG_HEADER = ("epoch", "split", "loss", "accuracy", "auc", "seed")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    if label not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {label!r}")
    if not np.all(np.isfinite(logits.data)):
        raise TrainingError("non-finite logits")
    return ad.softmax_cross_entropy(logits, int(label))


def positive_probability(logits: Tensor) -> float:
    z = logits.data.reshape(-1)
    d = float(z[0] - z[1])
    if d > 0:
        e = math.exp(-d)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(d))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update from ``param.grad``, in place.

    Weight decay is the coupled L2 form: ``grad + weight_decay * param``.
    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    eval_seed: int = 12345
    eval_masking: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight decay must be non-negative")


class BagRunner:
    """Caches each bag's level-0 partition and runs masked forward passes."""

    def __init__(self, model: MmilModel, seed: int):
        self.model = model
        self.seed = seed
        self._base: dict[str, object] = {}

    def plans(self, bag: InstanceBag, mask_seed: int, masking: bool = True):
        cfg = self.model.config
        base = self._base.get(bag.id)
        if base is None:
            base = self._base[bag.id] = base_partition(cfg, bag.embeddings, bag.coords, self.seed, bag.id)
        return plan_bag(cfg, base, bag.embeddings, bag.coords, mask_seed=mask_seed, masking=masking,
                        group_seed=derive_seed(self.seed, bag.id))

    def logits(self, bag: InstanceBag, mask_seed: int, masking: bool = True) -> Tensor:
        return mmil_forward(bag.embeddings, self.model, self.plans(bag, mask_seed, masking))


@dataclass
class SplitMetrics:
    loss: float
    accuracy: float
    auc: float
    scores: list[float]


def _summarize(losses, scores, labels) -> SplitMetrics:
    try:
        auc = roc_auc(scores, labels)
    except Exception:
        auc = float("nan")
    return SplitMetrics(float(np.mean(losses)), accuracy(scores, labels), auc, list(scores))


def score_bags(runner: BagRunner, bags: Sequence[InstanceBag], mask_seed: int, masking: bool) -> SplitMetrics:
    losses, scores = [], []
    with ad.no_grad():
        for bag in bags:
            logits = runner.logits(bag, derive_seed(mask_seed, bag.id), masking)
            losses.append(cross_entropy(logits, bag.label).item())
            scores.append(positive_probability(logits))
    return _summarize(losses, scores, [b.label for b in bags])


@dataclass
class TrainResult:
    rows: list[tuple]
    best_epoch: int
    best_params: dict[str, np.ndarray]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in self.rows:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), row[5]])
        return buf.getvalue()


def train(model: MmilModel, train_bags: Sequence[InstanceBag], val_bags: Sequence[InstanceBag] = (),
          config: TrainConfig | None = None, out_dir=None, progress=None) -> TrainResult:
    """One bag per optimiser step; masks are redrawn every epoch.

    The checkpoint with the best validation AUC (ties: lower validation
    loss, then earlier epoch) is kept; epoch 0 rows describe the untrained
    model.  With ``out_dir`` the CSV log, ``best.ckpt`` and ``last.ckpt``
    are written there.
    """
    config = config or TrainConfig()
    config.validate()
    if not train_bags:
        raise DataError("training set is empty")
    runner = BagRunner(model, config.seed)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    rows: list[tuple] = []
    best_key, best_epoch = None, 0
    best_params = {k: p.data.copy() for k, p in model.params.items()}

    def validate(epoch):
        nonlocal best_key, best_epoch, best_params
        if not val_bags:
            return
        vm = score_bags(runner, val_bags, derive_seed(config.eval_seed, "val"), config.eval_masking)
        rows.append((epoch, "val", vm.loss, vm.accuracy, vm.auc, config.seed))
        auc = -1.0 if math.isnan(vm.auc) else vm.auc
        key = (auc, -vm.loss)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}

    validate(0)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(len(train_bags))
        losses, scores, labels = [], [], []
        for i in order:
            bag = train_bags[i]
            tape = ad.Tape()
            with tape:
                logits = runner.logits(bag, derive_seed(config.seed, "mask", epoch, bag.id))
                loss = cross_entropy(logits, bag.label)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"loss diverged at epoch {epoch}, bag {bag.id!r}")
                ad.backward(loss)
            tape.clear()
            adam_step(model.params, state)
            model.zero_grad()
            losses.append(value)
            scores.append(positive_probability(logits))
            labels.append(bag.label)
        tm = _summarize(losses, scores, labels)
        rows.append((epoch, "train", tm.loss, tm.accuracy, tm.auc, config.seed))
        validate(epoch)
        if progress:
            progress(epoch, rows)

    if not val_bags:
        best_epoch = config.epochs
        best_params = {k: p.data.copy() for k, p in model.params.items()}
    result = TrainResult(rows, best_epoch, best_params)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.csv_text())
        meta = {"seed": config.seed, "epoch": config.epochs}
        save_checkpoint(out / "last.ckpt", model, meta)
        save_checkpoint(out / "best.ckpt", with_params(model, best_params), {**meta, "epoch": best_epoch})
    return result


def with_params(model: MmilModel, values: Mapping[str, np.ndarray]) -> MmilModel:
    m = model.clone()
    for k, v in values.items():
        m.params[k].data = v.copy()
    return m


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    runs: list[dict]
    seeds: list[int]

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def evaluate(model: MmilModel, bags: Sequence[InstanceBag], repeats: int = 10, seed: int = 0,
             eval_seed: int = 12345, masking: bool = True) -> EvalReport:
    """Average accuracy/AUC over ``repeats`` passes with distinct mask seeds.

    ``seed`` must be the training seed so random grouping reproduces the
    partitions the model was trained with.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    labels = [b.label for b in bags]
    if len(set(labels)) < 2:
        roc_auc([0.0] * len(labels), labels)  # raises the undefined-AUC error
    runner = BagRunner(model, seed)
    runs, seeds = [], []
    for r in range(repeats):
        s = derive_seed(eval_seed, "repeat", r)
        sm = score_bags(runner, bags, s, masking)
        runs.append({"seed": s, "accuracy": sm.accuracy, "auc": sm.auc, "loss": sm.loss})
        seeds.append(s)
    return EvalReport(
        float(np.mean([r["accuracy"] for r in runs])),
        float(np.mean([r["auc"] for r in runs])),
        runs,
        seeds,
    )


# ---------------------------------------------------------------------------
# baseline


def mean_pool_probe(train_bags: Sequence[InstanceBag], test_bags: Sequence[InstanceBag],
                    l2: float = 1e-2, iterations: int = 50) -> np.ndarray:
    """Logistic regression on standardised mean-pooled embeddings (Newton steps).

    Returns positive-class probabilities for ``test_bags``.
    """
    X = np.stack([b.embeddings.mean(0) for b in train_bags])
    y = np.array([b.label for b in train_bags], dtype=np.float64)
    mu, sd = X.mean(0), X.std(0) + 1e-12

    def design(A):
        return np.hstack([(A - mu) / sd, np.ones((len(A), 1))])

    Z = design(X)
    w = np.zeros(Z.shape[1])
    reg = l2 * np.eye(Z.shape[1])
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-Z @ w))
        hess = Z.T @ (Z * (p * (1 - p))[:, None]) + reg
        step = np.linalg.solve(hess, Z.T @ (p - y) + l2 * w)
        w -= step
        if np.max(np.abs(step)) < 1e-12:
            break
    T = design(np.stack([b.embeddings.mean(0) for b in test_bags]))
    return 1.0 / (1.0 + np.exp(-T @ w))
