"""Loss, optimizer, cosine schedule, the training loop and grid sweeps."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .cohort import AugmentConfig
from .evaluation.metrics import UndefinedMetricError, metric_report
from .evaluation.predictions import PredictionSet
from .fusion import FusionSpec, NeuralSystem, assemble, predict_logits, sigmoid

log = logging.getLogger(__name__)

SELECTION_METRICS = ("auc", "pr", "f1", "accuracy")


class TrainingDivergedError(FloatingPointError):
    """Loss became NaN or infinite."""


def bce_loss(logit, label, reduction: str = "mean"):
    """Binary cross-entropy on raw logits in the log-sum-exp form
    ``max(z, 0) - z*y + log1p(exp(-|z|))``."""
    z = torch.as_tensor(logit)
    if not z.is_floating_point():
        z = z.double()
    y = torch.as_tensor(label, dtype=z.dtype)
    loss = z.clamp(min=0) - z * y + torch.log1p(torch.exp(-z.abs()))
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def cosine_lr(t: int, T: int, lr_max: float, lr_min: float = 0.0) -> float:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise ValueError(f"iteration {t} outside [0, {T}]")
    if t == 0:
        return float(lr_max)
    if t == T:
        return float(lr_min)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


class AdamW(torch.optim.Optimizer):
    """Adam with weight decay decoupled from the gradient step.

    ``p <- p - lr_t * m_hat / (sqrt(v_hat) + eps) - eta_t * weight_decay * p``

    ``lr_t`` is the group's scheduled rate and ``eta_t`` the schedule
    multiplier (1 when no schedule is set).  Decay is not scaled by the
    learning rate, so parameters shrink even when ``lr = 0``.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if lr < 0 or weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        for g in self.param_groups:
            g.setdefault("base_lr", g["lr"])
            g.setdefault("eta", 1.0)

    def set_lr_scale(self, eta: float) -> None:
        """Scale every group to ``base_lr * eta``; decay follows ``eta`` too."""
        for g in self.param_groups:
            g["lr"] = g["base_lr"] * eta
            g["eta"] = eta

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for g in self.param_groups:
            b1, b2 = g["betas"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                state["step"] += 1
                m, v, k = state["m"], state["v"], state["step"]
                m.mul_(b1).add_(p.grad, alpha=1 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                direction = (m / (1 - b1 ** k)) / ((v / (1 - b2 ** k)).sqrt() + g["eps"])
                decay = g["eta"] * g["weight_decay"]
                if decay:
                    p.mul_(1.0 - decay)
                p.add_(direction, alpha=-g["lr"])
        return loss


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    selection_metric: str = "auc"
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    lr_min: float = 0.0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    augment_validation: bool = False
    threshold: float = 0.5
    eval_batch_size: int = 64
    keep_all_checkpoints: bool = False

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(f"selection_metric must be one of {SELECTION_METRICS}")
        if self.lr_min < 0 or self.weight_decay < 0:
            raise ValueError("lr_min and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class Checkpoint:
    epoch: int
    state: dict
    metrics: dict
    path: Path | None = None


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def values(self, metric: str) -> list[float]:
        return [r[f"val_{metric}"] for r in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        cols = ["epoch", "train_loss"] + [k for k in self.rows[0] if k.startswith("val_")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])
        return path


def select_best(values) -> int:
    """1-based index of the maximum; ties go to the earliest."""
    best, arg = -math.inf, None
    for i, v in enumerate(values, 1):
        if v > best:
            best, arg = v, i
    if arg is None:
        raise ValueError("no finite metric values")
    return arg


def _validation_metrics(model, table, threshold, batch_size) -> dict:
    prob = sigmoid(predict_logits(model, table, batch_size))
    preds = PredictionSet(table.image_id, table.patient_id, prob, table.label, table.diabetes)
    rep = metric_report(preds, threshold)
    if rep.auc is None:
        raise UndefinedMetricError("validation split has a single class; AUC undefined")
    return {"auc": rep.auc, "pr": rep.pr, "f1": rep.f1, "accuracy": rep.accuracy}


def train(model: NeuralSystem, train_table, val_table, cfg: TrainConfig = TrainConfig(),
          checkpoint_dir=None) -> tuple[Checkpoint, TrainHistory]:
    """Mini-batch training with per-iteration cosine decay and best-epoch selection.

    The returned model state is the selected checkpoint's.
    """
    if not isinstance(model, NeuralSystem):
        raise TypeError(f"{type(model).__name__} is fitted, not trained; call .fit()")
    if len(train_table) == 0 or len(val_table) == 0:
        raise ValueError("training and validation splits must be non-empty")
    shared = set(train_table.patient_id) & set(val_table.patient_id)
    if shared:
        raise ValueError(f"train and validation share {len(shared)} patients")
    if model.uses_images and train_table.images is None:
        raise ValueError("model needs images but the table was built without them")

    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    augment_rng = np.random.default_rng([cfg.seed, 1])
    n = len(train_table)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    history = TrainHistory()
    best: Checkpoint | None = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        groups = model.param_groups()
        opt = AdamW(groups, betas=cfg.betas, weight_decay=cfg.weight_decay)
        augment = cfg.augment if model.uses_images else None
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = shuffle_rng.permutation(n)
            loss_sum = 0.0
            for b in range(per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                inputs, y = train_table.batch(idx, augment, augment_rng)
                for g in opt.param_groups:
                    g["lr"] = cosine_lr(step, total, g["base_lr"], cfg.lr_min)
                    g["eta"] = cosine_lr(step, total, 1.0, 0.0)
                loss = bce_loss(model(inputs), y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch {b + 1}; "
                        f"learning rates {[g['lr'] for g in opt.param_groups]}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                loss_sum += loss.item() * len(idx)
                step += 1
            metrics = _validation_metrics(model, val_table, cfg.threshold, cfg.eval_batch_size)
            history.rows.append({"epoch": epoch, "train_loss": loss_sum / n,
                                 **{f"val_{k}": v for k, v in metrics.items()}})
            log.info("epoch %d loss %.4f val %s %.4f", epoch, loss_sum / n,
                     cfg.selection_metric, metrics[cfg.selection_metric])
            value = metrics[cfg.selection_metric]
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite validation {cfg.selection_metric} at epoch {epoch}")
            is_best = best is None or value > best.metrics[cfg.selection_metric]
            if is_best or cfg.keep_all_checkpoints:
                state = copy.deepcopy(model.state_dict())
                ck = Checkpoint(epoch, state, metrics)
                if ckpt_dir is not None and cfg.keep_all_checkpoints:
                    ck.path = ckpt_dir / f"epoch{epoch:03d}.pt"
                    torch.save(state, ck.path)
                if is_best:
                    best = ck

    model.load_state_dict(best.state)
    model.trained = True
    if ckpt_dir is not None:
        if best.path is None:
            best.path = ckpt_dir / "best.pt"
            torch.save(best.state, best.path)
        index = {"selection_metric": cfg.selection_metric, "best_epoch": best.epoch,
                 "best_path": best.path.name,
                 "epochs": [{"epoch": r["epoch"], "train_loss": r["train_loss"],
                             **{k[4:]: v for k, v in r.items() if k.startswith("val_")},
                             **({"path": f"epoch{r['epoch']:03d}.pt"} if cfg.keep_all_checkpoints else {})}
                            for r in history.rows]}
        (ckpt_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return best, history


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepGrid:
    head_learning_rates: list = field(default_factory=lambda: [1e-2, 5e-2, 1e-3, 5e-3])
    backbone_learning_rates: list = field(
        default_factory=lambda: [1e-4, 5e-4, 1e-5, 5e-5, 1e-6, 5e-6])
    feature_dims: list | None = None
    image_sizes: list | None = None

    def __post_init__(self):
        for name in ("head_learning_rates", "backbone_learning_rates", "feature_dims", "image_sizes"):
            v = getattr(self, name)
            if v is not None and len(v) == 0:
                raise ValueError(f"{name} must be non-empty")

    def cells(self, spec: FusionSpec) -> list[dict]:
        enc = spec.encoder
        axes = {
            "head_learning_rate": self.head_learning_rates,
            "backbone_learning_rate": self.backbone_learning_rates,
            "fundus_feature_dim": self.feature_dims or [enc.fundus_feature_dim],
            "image_size": self.image_sizes or [enc.image_size],
        }
        keys = list(axes)
        return [dict(zip(keys, combo)) for combo in itertools.product(*axes.values())]


@dataclass
class SweepResult:
    rows: list[dict]

    @property
    def best(self) -> dict:
        ok = [r for r in self.rows if r["error"] is None]
        if not ok:
            raise RuntimeError("every sweep cell failed")
        return ok[0]

    def matrix(self, row_key: str, col_key: str):
        """(row labels, col labels, AUC grid) taking the max over other axes."""
        rl = sorted({r[row_key] for r in self.rows}, key=_sort_key)
        cl = sorted({r[col_key] for r in self.rows}, key=_sort_key)
        grid = np.full((len(rl), len(cl)), np.nan)
        for r in self.rows:
            if r["error"] is None:
                i, j = rl.index(r[row_key]), cl.index(r[col_key])
                grid[i, j] = np.fmax(grid[i, j], r["val_auc"])
        return rl, cl, grid

    def render_matrix(self, row_key: str, col_key: str) -> str:
        rl, cl, grid = self.matrix(row_key, col_key)
        lines = [f"{row_key} \\ {col_key}\t" + "\t".join(_label(c) for c in cl)]
        for i, r in enumerate(rl):
            lines.append(_label(r) + "\t" + "\t".join(
                "failed" if np.isnan(v) else f"{v:.3f}" for v in grid[i]))
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> Path:
        path = Path(path)
        cols = ["rank", "head_learning_rate", "backbone_learning_rate", "fundus_feature_dim",
                "image_size", "val_auc", "best_epoch", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, r in enumerate(self.rows, 1):
                w.writerow([i] + [("" if r[c] is None else r[c]) for c in cols[1:]])
        return path


def _label(v) -> str:
    return "native" if v is None else str(v)


def _sort_key(v):
    return (v is None, v if v is not None else 0)


def sweep(spec: FusionSpec, grid: SweepGrid, data, cfg: TrainConfig | None = None) -> SweepResult:
    """Train one model per grid cell and rank cells by best validation AUC.

    ``data`` is a ``(train_table, val_table)`` pair, or a callable mapping an
    image size to such a pair when the grid varies image size.  A failing
    cell is recorded with its error and does not stop the sweep.
    """
    cfg = cfg if cfg is not None else TrainConfig(epochs=25)
    rows = []
    for cell in grid.cells(spec):
        row = dict(cell, val_auc=None, best_epoch=None, error=None)
        try:
            enc = replace(spec.encoder, **cell)
            cell_spec = FusionSpec(spec.strategy, spec.head_kind, enc, spec.paths,
                                   spec.prerequisites, spec.head_grid, spec.head_epochs, spec.seed)
            train_t, val_t = data(cell["image_size"]) if callable(data) else data
            best, _ = train(assemble(cell_spec), train_t, val_t, cfg)
            row["val_auc"] = best.metrics["auc"]
            row["best_epoch"] = best.epoch
        except Exception as exc:  # recorded, not fatal
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("sweep cell %s failed: %s", cell, row["error"])
        rows.append(row)
    rows.sort(key=lambda r: (r["error"] is not None, -(r["val_auc"] or 0.0)))
    return SweepResult(rows)

