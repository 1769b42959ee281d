"""Loss, Adam, mini-batch training and the two evaluation protocols."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build_model
from .nn import ShapeMismatch

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 1000
    batch_size: int = 100
    w1: float = 10.0
    w2: float = 10.0
    seed: int = 0
    early_stop: int = 0        # patience in epochs on validation loss; 0 disables

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr and epochs must be non-negative, batch_size positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ValueError("Adam betas must lie in [0, 1) and epsilon be positive")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")


# --------------------------------------------------------------------------
# losses

def rmse(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"rmse: prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    return float(np.sqrt(np.mean(d * d)))


def rmse_grad(pred, target):
    """Gradient of :func:`rmse` w.r.t. ``pred`` (zero where the RMSE is zero)."""
    r = rmse(pred, target)
    if r == 0:
        return np.zeros_like(pred)
    return (pred - target) / (pred.size * r)


def loss_weights(w1, w2):
    return (1.0, w1, w2)


def fused_loss(preds, targets, w1=10.0, w2=10.0):
    """``RMSE_X + w1 * RMSE_Y + w2 * RMSE_Z``."""
    if len(preds) != 3 or len(targets) != 3:
        raise ShapeMismatch("fused_loss needs three predictions and three targets")
    return sum(w * rmse(p, t) for w, p, t in zip(loss_weights(w1, w2), preds, targets))


def fused_loss_grad(preds, targets, w1=10.0, w2=10.0):
    return [w * rmse_grad(p, t) for w, p, t in zip(loss_weights(w1, w2), preds, targets)]


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.dtype, copy=False)
    return params, state


# --------------------------------------------------------------------------
# training loop

@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    rmse: list = field(default_factory=list)      # per epoch (x, y, z) on validation
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def save_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "rmse_x", "rmse_y", "rmse_z"])
            for e, (tl, vl, r) in enumerate(zip(self.train_loss, self.val_loss, self.rmse), start=1):
                w.writerow([e, repr(tl), repr(vl), *(repr(v) for v in r)])


def _net_params(net):
    return [layer.params[k] for layer in net.layers for k in layer.params]


def _net_grads(net):
    return [layer.grads[k] for layer in net.layers for k in layer.params]


def _targets(y, dtype):
    return [np.ascontiguousarray(y[:, i, :], dtype=dtype) for i in range(3)]


def predict(model: Model, x, batch_size=500):
    """Infer-mode predictions stacked as ``(N, 3, 29)``."""
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(np.stack(model.forward(x[i:i + batch_size], train=False), axis=1))
    if not outs:
        return np.zeros((0, 3, model.cfg.out_len))
    return np.concatenate(outs).astype(np.float64)


def evaluate_loss(model: Model, ds, cfg: TrainConfig):
    """``(loss, (rmse_x, rmse_y, rmse_z))`` in infer mode.

    The fused variant is scored by the weighted loss, the independent one by
    the plain sum of its per-axis RMSEs.
    """
    pred = predict(model, ds.x)
    r = tuple(rmse(pred[:, i], ds.y[:, i]) for i in range(3))
    w = loss_weights(cfg.w1, cfg.w2) if model.cfg.variant == "fused" else (1.0, 1.0, 1.0)
    return sum(wi * ri for wi, ri in zip(w, r)), r


def train_step(model: Model, xb, yb, states, cfg: TrainConfig):
    """One forward/backward/Adam update on a mini-batch; returns the batch loss."""
    dtype = np.dtype(model.cfg.dtype)
    preds = model.forward(xb, train=True)
    targets = _targets(yb, dtype)
    if model.cfg.variant == "fused":
        loss = fused_loss(preds, targets, cfg.w1, cfg.w2)
        grads = fused_loss_grad(preds, targets, cfg.w1, cfg.w2)
    else:
        per_axis = [rmse(p, t) for p, t in zip(preds, targets)]
        loss = sum(per_axis)
        grads = [rmse_grad(p, t) for p, t in zip(preds, targets)]
    if not np.isfinite(loss):
        raise Diverged(f"non-finite training loss at Adam step {states[0].t + 1}")
    model.backward(grads)
    for net, st in zip(model.nets, states):
        adam_step(_net_params(net), _net_grads(net), st, cfg)
    return loss


def train(model: Model, train_ds, val_ds, cfg: TrainConfig, progress=None):
    """Shuffled mini-batch Adam training with best-validation checkpointing.

    For the independent variant each per-axis network keeps its own optimizer
    and its own best epoch (judged on that axis's validation RMSE).
    """
    if len(train_ds) == 0:
        raise ValueError("training dataset is empty")
    if train_ds.x.shape[1:] != (model.cfg.n_sensors, model.cfg.in_len):
        raise ShapeMismatch(f"dataset windows {train_ds.x.shape[1:]} do not fit the model input")
    rng = np.random.default_rng(cfg.seed)
    states = [AdamState.like(_net_params(net)) for net in model.nets]
    hist = History()
    use_val = val_ds is not None and len(val_ds) > 0
    n = len(train_ds)
    independent = model.cfg.variant == "independent"
    best = [np.inf] * len(model.nets)
    snaps = [None] * len(model.nets)
    since_best = 0
    x_all = train_ds.x.astype(model.cfg.dtype)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            total += train_step(model, x_all[idx], train_ds.y[idx], states, cfg) * len(idx)
        train_loss = total / n
        if use_val:
            val_loss, r = evaluate_loss(model, val_ds, cfg)
            if not np.isfinite(val_loss):
                raise Diverged(f"non-finite validation loss after epoch {epoch + 1}")
        else:
            val_loss, r = train_loss, (np.nan, np.nan, np.nan)
        hist.train_loss.append(float(train_loss))
        hist.val_loss.append(float(val_loss))
        hist.rmse.append(tuple(float(v) for v in r))
        scores = list(r) if independent and use_val else [val_loss] * len(model.nets)
        improved = False
        for k, net in enumerate(model.nets):
            if scores[k] < best[k]:
                best[k] = scores[k]
                snaps[k] = [a.copy() for layer in net.layers
                            for a in (*layer.params.values(), *layer.buffers.values())]
                improved = True
        if improved:
            hist.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if progress is not None:
            progress(epoch, hist)
        if cfg.early_stop and since_best >= cfg.early_stop:
            break
    for net, snap in zip(model.nets, snaps):
        if snap is None:
            continue
        arrays = [a for layer in net.layers for a in (*layer.params.values(), *layer.buffers.values())]
        for a, s in zip(arrays, snap):
            a[...] = s
    return model, hist


# --------------------------------------------------------------------------
# config I/O (flat key=value text)

def config_to_text(obj, prefix=""):
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{prefix}{f.name}={'' if v is None else v}")
    return lines


def coerce(value: str, like):
    """Parse ``value`` into the type of ``like``."""
    from fractions import Fraction
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, Fraction):
        return Fraction(value)
    if isinstance(like, tuple):
        if not value:
            return ()
        items = [s.strip() for s in value.split(",")]
        if like and isinstance(like[0], int) and not isinstance(like[0], bool):
            return tuple(int(s) for s in items)
        if like and isinstance(like[0], str):
            return tuple(items)
        return tuple(float(s) for s in items)
    return value


# --------------------------------------------------------------------------
# cross validation

def cross_validate(steps, model_cfg: ModelConfig, train_cfg: TrainConfig, aug=None, k=6, seed=0,
                   progress=None):
    """Subject-disjoint k-fold evaluation.

    Returns ``(reports, summary)`` where ``summary`` holds the mean per-axis
    error across folds and the fold with the lowest X error.
    """
    from .pipeline import AugmentSpec, SplitSpec, build_dataset, split_steps
    from .trajectory import aggregate_report, evaluate_steps

    if k < 2:
        raise ValueError("cross validation needs k >= 2")
    aug = aug or AugmentSpec()
    folds = split_steps(steps, SplitSpec(mode="by_subject_kfold", k=k, seed=seed))
    reports = []
    for part in folds:
        train_subj = {steps[i].subject_id for i in part.train + part.val}
        test_subj = {steps[i].subject_id for i in part.test}
        if train_subj & test_subj:
            raise AssertionError(f"fold {part.fold} leaks subjects {sorted(train_subj & test_subj)}")
        tr, va, _, _ = build_dataset(steps, aug, part, seed)
        model = build_model(model_cfg, seed=seed + part.fold)
        model, _ = train(model, tr, va, train_cfg, progress=progress)
        results = evaluate_steps(model, [steps[i] for i in part.test], aug)
        reports.append(aggregate_report(results, protocol=f"independent-walker fold {part.fold}"))
    mean = tuple(float(np.mean([r.mean[i] for r in reports])) for i in range(3))
    best = min(range(len(reports)), key=lambda i: reports[i].mean[0])
    return reports, {"mean": mean, "best_fold": best, "best": reports[best]}
