"""Training loops, loss assembly, early stopping, evaluation and the landscape probe.

Losses are computed in normalized field units.  One complementary step draws
two paired samples (``alpha``, ``beta``) and one unpaired LR sample (``gamma``),
builds the supervised and pseudo-supervised terms for both models, and takes a
single Adam step on the gradient of their sum.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import grad
from .errors import ConfigError, ContractError, DivergenceError, ValidationError
from .meshcore import DEFAULT_K, project
from .models import Architecture, ModelParams, decode_f, decode_g, extract, forward_f, save_checkpoint
from .mpnn import KINDS

MODES = ("complementary", "supervised")
CENTERING = {"none": (False, False), "n": (True, False), "m": (False, True), "nm": (True, True)}
LOSS_KEYS = ("l_f_sup", "l_f_unsup", "l_g_sup", "l_g_unsup")


@dataclass
class TrainConfig:
    mode: str = "complementary"
    mpnn: str = "mgn"
    node_centering: bool = True
    message_centering: bool = True
    hidden: int = 30
    n_lr_layers: int = 3
    n_hr_layers: int = 3
    k: int = DEFAULT_K
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 50
    val_fraction: float = 0.1
    loss_weights: list | None = None
    seed: int = 0
    # None means one step per training sample, as in the reference loop
    steps_per_epoch: int | None = None
    divergence_threshold: float = 1e6

    @classmethod
    def from_dict(cls, obj):
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    def validate(self, n_paired=None, d=None):
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.mode not in MODES:
            bad("mode", f"expected one of {MODES}, got {self.mode!r}")
        if self.mpnn not in KINDS:
            bad("mpnn", f"expected one of {KINDS}, got {self.mpnn!r}")
        if self.mpnn == "gcn" and self.message_centering:
            bad("message_centering", "not defined for gcn")
        for name in ("hidden", "k", "max_epochs"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be >= 1")
        for name in ("n_lr_layers", "n_hr_layers", "patience"):
            if int(getattr(self, name)) < 0:
                bad(name, "must be >= 0")
        if not self.lr > 0:
            bad("lr", "must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad("beta1/beta2", "must lie in [0, 1)")
        if not self.eps > 0:
            bad("eps", "must be positive")
        if not 0 <= self.val_fraction < 1:
            bad("val_fraction", "must lie in [0, 1)")
        if self.steps_per_epoch is not None and int(self.steps_per_epoch) < 1:
            bad("steps_per_epoch", "must be >= 1")
        if not self.divergence_threshold > 0:
            bad("divergence_threshold", "must be positive")
        if self.loss_weights is not None:
            w = np.asarray(self.loss_weights, dtype=np.float64)
            if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
                bad("loss_weights", "must be a list of finite non-negative numbers")
            if d is not None and w.size != d:
                bad("loss_weights", f"{w.size} weights for {d} solution columns")
        if n_paired is not None:
            n_val = validation_size(n_paired, self.val_fraction)
            if n_paired - n_val < 2:
                raise ValidationError(
                    f"{n_paired} paired samples leave {n_paired - n_val} for training "
                    f"after holding out {n_val} for validation; need at least 2")
        return self

    def architecture(self, d, dim):
        return Architecture(kind=self.mpnn, hidden=self.hidden, n_lr_layers=self.n_lr_layers,
                            n_hr_layers=self.n_hr_layers, node_centering=self.node_centering,
                            message_centering=self.message_centering, k=self.k, d=d, dim=dim)

    def adam(self, params):
        return grad.AdamState.for_params(params, lr=self.lr, beta1=self.beta1,
                                         beta2=self.beta2, eps=self.eps)


def validation_size(n_paired, fraction):
    """Held-out paired count: the given fraction, but never fewer than 2."""
    return max(2, int(round(fraction * n_paired)))


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_rmse: float | None = None
    test_rmse: float | None = None
    knn_test_rmse: float | None = None

    def add_epoch(self, record, seconds):
        for key, value in record.items():
            if key != "epoch" and not math.isfinite(value):
                raise ContractError(f"non-finite metric {key}={value} at epoch {record['epoch']}")
        self.epochs.append(record)
        self.seconds.append(seconds)

    def column(self, key):
        return [r[key] for r in self.epochs]


# --- loss assembly ------------------------------------------------------------

def _u(sample, stats):
    return grad.Tensor(stats.norm_values(sample.values))


def complementary_losses(params, alpha, beta, gamma=None, weights=None):
    """The four loss terms for one (alpha, beta, gamma) triple, as tensors.

    ``alpha`` and ``beta`` are paired samples and ``gamma`` an unpaired one
    (its HR field is never read).  Without ``gamma`` both unsupervised terms
    are zero.
    """
    stats, k, shared = params.stats, params.shared.k, params.shared
    mesh_a, mesh_b = alpha.hr.mesh, beta.hr.mesh
    u_a, u_b = _u(alpha.hr, stats), _u(beta.hr, stats)

    x_a = extract(shared, alpha.lr, mesh_a)
    x_b = extract(shared, beta.lr, mesh_b)
    f_a = decode_f(params, x_a, alpha.lr, mesh_a)
    f_b = decode_f(params, x_b, beta.lr, mesh_b)
    g_ab = decode_g(params, x_a, x_b, alpha.lr, beta.lr, mesh_a, mesh_b)

    losses = {
        "l_f_sup": grad.add(grad.mse(f_a, u_a, weights), grad.mse(f_b, u_b, weights)),
        "l_g_sup": grad.mse(g_ab, grad.sub(u_a, project(u_b, mesh_b, mesh_a, k)), weights),
    }
    if gamma is None:
        zero = grad.Tensor(np.array(0.0))
        losses["l_f_unsup"] = zero
        losses["l_g_unsup"] = zero
        return losses

    mesh_g = gamma.hr_mesh
    x_g = extract(shared, gamma.lr, mesh_g)
    f_g = decode_f(params, x_g, gamma.lr, mesh_g)
    g_bg = decode_g(params, x_b, x_g, beta.lr, gamma.lr, mesh_b, mesh_g)
    g_ga = decode_g(params, x_g, x_a, gamma.lr, alpha.lr, mesh_g, mesh_a)
    u_a_on_g = project(u_a, mesh_a, mesh_g, k)

    # pseudo-targets stay on the tape: the total loss is differentiated as a whole
    losses["l_f_unsup"] = grad.add(
        grad.mse(f_g, grad.add(g_ga, u_a_on_g), weights),
        grad.mse(f_g, project(grad.sub(u_b, g_bg), mesh_b, mesh_g, k), weights))
    losses["l_g_unsup"] = grad.add(
        grad.mse(g_ga, grad.sub(f_g, u_a_on_g), weights),
        grad.mse(g_bg, grad.sub(u_b, project(f_g, mesh_g, mesh_b, k)), weights))
    return losses


def total_loss(losses):
    out = losses[LOSS_KEYS[0]]
    for key in LOSS_KEYS[1:]:
        out = grad.add(out, losses[key])
    return out


def supervised_loss(params, pair, weights=None):
    return grad.mse(forward_f(params, pair.lr, pair.hr.mesh), _u(pair.hr, params.stats), weights)


def _check_finite(values, threshold, params, dump_dir, where):
    bad = {k: v for k, v in values.items() if not math.isfinite(v) or abs(v) > threshold}
    if not bad:
        return
    dump = None
    if dump_dir is not None:
        dump = save_checkpoint(params, Path(dump_dir) / "divergence",
                               extra={"where": where, "losses": {k: repr(v) for k, v in values.items()}})
    raise DivergenceError(f"loss diverged at {where}: {bad}", dump)


def step_complementary(params, batch, optstate, weights=None, threshold=1e6, dump_dir=None,
                       where="step"):
    """One joint update of every parameter; returns the loss components as floats."""
    alpha, beta, gamma = batch
    plist = params.parameters()
    with grad.Tape() as tape:
        tape.watch(*plist)
        losses = complementary_losses(params, alpha, beta, gamma, weights)
        total = total_loss(losses)
        values = {k: float(losses[k].data) for k in LOSS_KEYS}
        values["total"] = float(total.data)
        _check_finite(values, threshold, params, dump_dir, where)
        grads = grad.backward(total, plist)
    grad.adam_step(plist, grads, optstate)
    return values


def step_supervised(params, pair, optstate, weights=None, threshold=1e6, dump_dir=None,
                    where="step"):
    """One update of the primary model alone; the auxiliary decoder is untouched."""
    plist = params.f_parameters()
    with grad.Tape() as tape:
        tape.watch(*plist)
        loss = supervised_loss(params, pair, weights)
        value = float(loss.data)
        _check_finite({"loss": value}, threshold, params, dump_dir, where)
        grads = grad.backward(loss, plist)
    grad.adam_step(plist, grads, optstate)
    return value


# --- evaluation ---------------------------------------------------------------

def _squared_errors(pairs, predict, stats):
    if not pairs:
        raise ContractError("cannot evaluate RMSE on an empty set")
    sq, count = None, 0
    for pair in pairs:
        err = predict(pair) - stats.norm_values(pair.hr.values)
        s = np.sum(err * err, axis=0)
        sq = s if sq is None else sq + s
        count += err.shape[0]
    return sq, count


def _report(sq, count):
    return {"rmse": float(np.sqrt(sq.sum() / (count * sq.size))),
            "per_column": [float(v) for v in np.sqrt(sq / count)]}


def _predict_f(params):
    return lambda pair: forward_f(params, pair.lr, pair.hr.mesh).data


def _predict_knn(stats, k):
    return lambda pair: project(stats.norm_values(pair.lr.values), pair.lr.mesh,
                                pair.hr.mesh, k).data


def evaluate_rmse(params, pairs):
    """Pooled RMSE of the primary model over all samples, nodes and columns."""
    return _report(*_squared_errors(pairs, _predict_f(params), params.stats))["rmse"]


def knn_baseline_rmse(pairs, stats, k=DEFAULT_K):
    """RMSE of plain kNN upsampling of the LR field."""
    return _report(*_squared_errors(pairs, _predict_knn(stats, k), stats))["rmse"]


def rmse_report(params, pairs):
    """Overall and per-column RMSE of the model and of the kNN baseline."""
    model = _report(*_squared_errors(pairs, _predict_f(params), params.stats))
    base = _report(*_squared_errors(pairs, _predict_knn(params.stats, params.shared.k),
                                    params.stats))
    return {"rmse": model["rmse"], "per_column": model["per_column"],
            "knn_rmse": base["rmse"], "knn_per_column": base["per_column"],
            "n_samples": len(pairs)}


# --- training loop --------------------------------------------------------------

def split_validation(paired, fraction, rng):
    n_val = validation_size(len(paired), fraction)
    order = rng.permutation(len(paired))
    val = sorted(order[:n_val].tolist())
    train = sorted(order[n_val:].tolist())
    return [paired[i] for i in train], [paired[i] for i in val]


def _rngs(seed):
    init, split, sample = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(split),
            np.random.default_rng(sample))


def run_training(config, dataset, dump_dir=None, on_epoch=None, log=None):
    """Train from scratch; returns the best-validation parameters and the metrics.

    ``on_epoch(epoch, params)`` is called after every epoch, before early
    stopping is checked.
    """
    config.validate(n_paired=len(dataset.paired), d=dataset.d)
    init_seed, split_rng, sample_rng = _rngs(config.seed)
    arch = config.architecture(dataset.d, dataset.dim)
    params = ModelParams.init(arch, dataset.stats, init_seed)
    train_pairs, val_pairs = split_validation(dataset.paired, config.val_fraction, split_rng)
    unpaired = list(dataset.unpaired) if config.mode == "complementary" else []
    weights = config.loss_weights

    if config.mode == "complementary":
        optstate = config.adam(params.parameters())
    else:
        optstate = config.adam(params.f_parameters())
    n_steps = config.steps_per_epoch or (len(train_pairs) + len(unpaired))

    metrics = RunMetrics()
    best, since_best = None, 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        for step in range(n_steps):
            where = f"epoch {epoch} step {step + 1}"
            if config.mode == "complementary":
                a, b = sample_rng.choice(len(train_pairs), size=2, replace=False)
                gamma = unpaired[sample_rng.integers(len(unpaired))] if unpaired else None
                vals = step_complementary(params, (train_pairs[a], train_pairs[b], gamma),
                                          optstate, weights, config.divergence_threshold,
                                          dump_dir, where)
                for key in LOSS_KEYS:
                    sums[key] += vals[key]
            else:
                pair = train_pairs[sample_rng.integers(len(train_pairs))]
                sums["l_f_sup"] += step_supervised(params, pair, optstate, weights,
                                                   config.divergence_threshold, dump_dir, where)
        record = {"epoch": epoch}
        record.update({key: sums[key] / n_steps for key in LOSS_KEYS})
        record["val_rmse"] = evaluate_rmse(params, val_pairs)
        metrics.add_epoch(record, time.perf_counter() - start)
        if log is not None:
            log(record)
        if on_epoch is not None:
            on_epoch(epoch, params)

        if best is None or record["val_rmse"] < metrics.best_val_rmse:
            best = params.snapshot()
            metrics.best_epoch, metrics.best_val_rmse = epoch, record["val_rmse"]
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break

    params.restore(best)
    if dataset.test:
        metrics.test_rmse = evaluate_rmse(params, dataset.test)
        metrics.knn_test_rmse = knn_baseline_rmse(dataset.test, dataset.stats, config.k)
    return params, metrics


# --- loss landscape -----------------------------------------------------------

@dataclass
class ProbePoint:
    loss: float
    perturbed_loss: float

    @property
    def finite(self):
        return math.isfinite(self.loss) and math.isfinite(self.perturbed_loss)


def probe_point(params, loss_fn, lr, multiplier=4.0):
    """Loss at ``params`` and after a step of ``multiplier * lr`` along the gradient.

    ``loss_fn()`` builds a scalar loss tensor from ``params``.  The parameters
    are restored afterwards.  Non-finite values are reported, not raised.
    """
    params = list(params)
    with grad.Tape() as tape, np.errstate(all="ignore"):
        tape.watch(*params)
        loss = loss_fn()
        grads = grad.backward(loss, params)
    value = float(loss.data)
    saved = [p.data.copy() for p in params]
    try:
        with np.errstate(all="ignore"):
            for p, g in zip(params, grads):
                p.data -= multiplier * lr * g
            perturbed = float(loss_fn().data)
    finally:
        for p, s in zip(params, saved):
            p.data[...] = s
    return ProbePoint(value, perturbed)


def probe_loss_landscape(params, dataset, steps, multiplier=4.0, lr=1e-3, mode="complementary",
                         seed=0, weights=None):
    """Probe ``steps`` seeded batches of ``dataset``; returns a list of :class:`ProbePoint`."""
    if mode not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    paired, unpaired = dataset.paired, dataset.unpaired
    out = []
    for _ in range(int(steps)):
        if mode == "complementary":
            a, b = rng.choice(len(paired), size=2, replace=False)
            gamma = unpaired[rng.integers(len(unpaired))] if unpaired else None
            plist = params.parameters()

            def loss_fn(a=a, b=b, gamma=gamma):
                return total_loss(complementary_losses(params, paired[a], paired[b], gamma,
                                                       weights))
        else:
            pair = paired[rng.integers(len(paired))]
            plist = params.f_parameters()

            def loss_fn(pair=pair):
                return supervised_loss(params, pair, weights)
        try:
            point = probe_point(plist, loss_fn, lr, multiplier)
        except FloatingPointError:
            point = ProbePoint(float("nan"), float("nan"))
        out.append(point)
    return out


# --- metrics export -----------------------------------------------------------

METRIC_COLUMNS = ("epoch",) + LOSS_KEYS + ("val_rmse",)


def write_metrics_csv(metrics, path):
    """Per-epoch losses and validation RMSE; values are written with ``repr``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in metrics.epochs:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]])


def write_timing_csv(metrics, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("epoch", "seconds"))
        for r, s in zip(metrics.epochs, metrics.seconds):
            w.writerow([r["epoch"], f"{s:.6f}"])


def summary(metrics, config):
    return {"test_rmse": metrics.test_rmse, "knn_test_rmse": metrics.knn_test_rmse,
            "best_epoch": metrics.best_epoch, "best_val_rmse": metrics.best_val_rmse,
            "epochs_run": len(metrics.epochs), "seed": config.seed, "config": config.to_dict()}


def write_summary(metrics, config, path):
    with open(path, "w") as f:
        json.dump(summary(metrics, config), f, indent=2, sort_keys=True)
        f.write("\n")
