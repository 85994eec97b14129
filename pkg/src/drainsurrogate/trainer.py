"""Minibatch training with a hand-rolled Adam update, validation tracking and checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Dataset, Normalizer, SampleBatch
from .graph import DrainageGraph
from .model import DivergenceError, ModelConfig, ModelInputs, Surrogate, loss_terms, model_inputs, save_checkpoint

CURVE_FIELDS = ("epoch", "time_s", "train_loss", "val_loss", "mse_node", "mse_edge", "bce_flood")
MOVING_AVERAGE = 500


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_interval: int = 1
    keep_best: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr = 0 is allowed as a no-op smoke run
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite number >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("need 0 <= beta < 1 and eps > 0")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be >= 1")


@dataclass
class AdamMoments:
    first: dict[str, torch.Tensor]
    second: dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamMoments":
        return cls({k: torch.zeros_like(v) for k, v in params.items()}, {k: torch.zeros_like(v) for k, v in params.items()})


def adam_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    moments: AdamMoments,
    step: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], AdamMoments]:
    """One bias-corrected Adam step; ``step`` counts from 1. Returns new tensors, inputs are untouched."""
    if step < 1:
        raise ValueError("step counts from 1")
    new_params, first, second = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = beta1 * moments.first[name] + (1.0 - beta1) * g
        v = beta2 * moments.second[name] + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (torch.sqrt(v / c2) + eps)
        if not bool(torch.isfinite(update).all()):
            raise DivergenceError(f"non-finite update for {name}")
        new_params[name] = p - update
        first[name], second[name] = m, v
    return new_params, AdamMoments(first, second)


@dataclass
class CurveRecord:
    epoch: int
    time_s: float
    train_loss: float
    val_loss: float
    mse_node: float
    mse_edge: float
    bce_flood: float
    val_loss_ma: float = math.nan


@dataclass
class TrainingCurve:
    records: list[CurveRecord] = field(default_factory=list)

    def append(self, rec: CurveRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("curve epochs must increase")
        window = [r.val_loss for r in self.records[-(MOVING_AVERAGE - 1) :]] + [rec.val_loss]
        rec.val_loss_ma = float(np.mean(window))
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def history(self) -> list[dict]:
        """Records without wall-clock time, for reproducible checkpoint sidecars."""
        return [{k: v for k, v in asdict(r).items() if k != "time_s"} for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in CURVE_FIELDS[1:]])

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.records]


@dataclass
class TrainResult:
    model: Surrogate
    curve: TrainingCurve
    initial_loss: dict[str, float]
    best_state: dict[str, torch.Tensor]
    best_epoch: int
    best_val_loss: float
    steps: int
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def evaluate_loss(model: Surrogate, inp: ModelInputs, chunk: int = 64) -> dict[str, float]:
    """Sample-weighted mean loss components over ``inp``, evaluated in chunks."""
    totals = {"mse_node": 0.0, "mse_edge": 0.0, "bce_flood": 0.0}
    with torch.no_grad():
        for start in range(0, len(inp), chunk):
            part = inp.select(range(start, min(start + chunk, len(inp))))
            terms = loss_terms(model(part), part)
            for k in totals:
                totals[k] += float(getattr(terms, k)) * len(part)
    out = {k: v / len(inp) for k, v in totals.items()}
    out["total"] = out["mse_node"] + out["mse_edge"] + out["bce_flood"]
    return out


def _params(model: Surrogate) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def _load_params(model: Surrogate, params: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(params[name])


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: Dataset,
    graph: DrainageGraph,
    val: SampleBatch | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    """Fit a surrogate on ``dataset`` (physical-unit samples plus training normalizer).

    The loop is deterministic: a seeded permutation per epoch, fixed batch
    order, and single-threaded reductions. Validation falls back to the
    training set when no validation batch is given.
    """
    train_config.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    normalizer: Normalizer = dataset.normalizer
    model = Surrogate(model_config, graph, normalizer)
    train_inp = model_inputs(dataset.samples, normalizer)
    val_inp = model_inputs(val, normalizer) if val is not None and len(val) else train_inp
    rng = np.random.default_rng(train_config.seed)
    tc = train_config
    names = [k for k, _ in model.named_parameters()]
    moments = AdamMoments.zeros_like(_params(model))

    last_good = _params(model)
    try:
        initial = evaluate_loss(model, train_inp)
    except DivergenceError as exc:
        raise _diverged(model, last_good, out_dir, f"before training: {exc}") from None
    best_val, best_epoch, best_state = math.inf, 0, _params(model)
    curve = TrainingCurve()
    step = 0
    t0 = time.monotonic()
    n = len(train_inp)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        sums = {"mse_node": 0.0, "mse_edge": 0.0, "bce_flood": 0.0}
        for start in range(0, n, tc.batch_size):
            batch = train_inp.select(order[start : start + tc.batch_size])
            try:
                terms = loss_terms(model(batch), batch)
            except DivergenceError as exc:
                raise _diverged(model, last_good, out_dir, f"epoch {epoch}: {exc}") from None
            if not math.isfinite(float(terms.total.detach())):
                raise _diverged(model, last_good, out_dir, f"non-finite loss at epoch {epoch}")
            grads = torch.autograd.grad(terms.total, [p for _, p in model.named_parameters()], allow_unused=True)
            params = {k: p.detach() for k, p in model.named_parameters()}
            grads = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}
            step += 1
            try:
                new, moments = adam_update(params, grads, moments, step, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
            except DivergenceError as exc:
                raise _diverged(model, last_good, out_dir, str(exc)) from None
            _load_params(model, new)
            for k in sums:
                sums[k] += float(getattr(terms, k).detach()) * len(batch)
        last_good = _params(model)
        if epoch % tc.validation_interval and epoch != tc.epochs:
            continue
        comps = {k: v / n for k, v in sums.items()}
        try:
            val_loss = evaluate_loss(model, val_inp)["total"]
        except DivergenceError as exc:
            raise _diverged(model, last_good, out_dir, f"validation at epoch {epoch}: {exc}") from None
        curve.append(
            CurveRecord(
                epoch=epoch,
                time_s=time.monotonic() - t0,
                train_loss=comps["mse_node"] + comps["mse_edge"] + comps["bce_flood"],
                val_loss=val_loss,
                **comps,
            )
        )
        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, _params(model)
        if log is not None:
            log(f"epoch {epoch} train {curve.records[-1].train_loss:.6g} val {val_loss:.6g}")

    result = TrainResult(model, curve, initial, best_state, best_epoch, best_val, step)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"training_step": step, "loss_history": curve.history(), "train_config": asdict(tc)}
        result.checkpoint = save_checkpoint(model, out_dir / "model", extra)
        if tc.keep_best:
            best = copy.deepcopy(model)
            _load_params(best, best_state)
            result.best_checkpoint = save_checkpoint(best, out_dir / "best", {**extra, "best_epoch": best_epoch})
        curve.to_csv(out_dir / "curve.csv")
        (out_dir / "curve.json").write_text(json.dumps(curve.to_json(), indent=1) + "\n")
    return result


def _diverged(model: Surrogate, last_good: dict, out_dir, message: str) -> DivergenceError:
    _load_params(model, last_good)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(out_dir) / "last_good", {"diverged": message})
    err = DivergenceError(message)
    err.last_good = last_good
    return err
