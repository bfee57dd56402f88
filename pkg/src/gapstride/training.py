"""Training loops for the proposed model and the neural baselines.

The proposed model follows the residual recipe: BIC-select and fit the
mixed model on the training partition, take its marginal prediction
``g_stat`` as a fixed offset, and fit the transformer residual to
``u = y - g_stat`` with Adam, shuffled minibatches and validation-MSE early
stopping.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .baselines import (STRATS_CONFIG, GrudConfig, GrudModel, StratsModel,
                        training_mean)
from .cohort import COVARIATE_BLOCKS, compute_train_stats
from .mixedfx import predict_samples, select_by_bic
from .model import GapTransformer, ModelConfig, make_batch, tokenize_samples

DEFAULT_LR = {"proposed": 3e-4, "strats": 3e-4, "grud": 1e-3}


class TrainingError(ValueError):
    pass


class NumericAbort(RuntimeError):
    """A loss or activation became non-finite; carries the offending batch."""

    def __init__(self, epoch, batch, cause):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch}: {cause}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float | None = None   # None -> per-architecture default
    patience: int = 10
    val_fraction: float = 0.25
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")

    def learning_rate(self, arch):
        return DEFAULT_LR[arch] if self.lr is None else self.lr

    def to_json(self):
        return asdict(self)


# --- objectives -------------------------------------------------------------


def compute_objective(y, g, r, form="empirical"):
    """Mean squared error of ``g + r`` against ``y``.

    ``form="empirical"`` evaluates ``mean((y - g - r)^2)``; ``"residual"``
    first forms ``u = y - g`` and evaluates ``mean((u - r)^2)``. Both use the
    same operation order, so the two agree bit for bit. ``r`` may be a
    Tensor (the loss is then differentiable) or an array.
    """
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if form == "empirical":
        e = ad.sub(ad.Tensor(y - g), r)
    elif form == "residual":
        u = residual_targets(y, g)
        e = ad.sub(ad.Tensor(u), r)
    else:
        raise ValueError(f"unknown objective form {form!r}")
    return ad.mean(ad.square(e))


def residual_targets(y, g):
    return np.asarray(y, dtype=np.float64) - np.asarray(g, dtype=np.float64)


# --- generic loop -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    batch_loss: float | None
    seconds: float
    lambdas: list | None = None

    def to_json(self):
        return asdict(self)


@dataclass
class FitResult:
    best_epoch: int
    best_val_mse: float
    log: list = field(default_factory=list)
    stopped_early: bool = False

    def log_json(self):
        return [r.to_json() for r in self.log]


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.data = snap[k].copy()


def _eval_mse(forward, rows, targets, batch_size=256):
    preds = [forward(rows[i:i + batch_size]).data for i in range(0, len(rows), batch_size)]
    pred = np.concatenate(preds) if preds else np.zeros(0)
    return float(np.mean((targets - pred) ** 2)), pred


def fit_network(params, forward, rows_tr, t_tr, rows_va, t_va, config, lr,
                lambdas=None, on_step=None):
    """Minimise mean squared error of ``forward(rows)`` against targets.

    ``forward(rows, rng=None)`` returns a (B,) Tensor; ``rng`` enables
    dropout. ``on_step(epoch, batch, params)`` runs after every optimizer
    step. Epoch 0 is evaluated before any update. The returned
    checkpoint is the epoch with the lowest validation MSE among epochs whose
    full-pass training loss does not exceed the epoch-0 loss; ``params`` are
    left holding it.
    """
    if len(rows_va) == 0:
        raise TrainingError("empty validation set")
    if len(rows_tr) == 0:
        raise TrainingError("empty training set")
    t_tr = np.asarray(t_tr, dtype=np.float64)
    t_va = np.asarray(t_va, dtype=np.float64)
    plist = list(params.values())
    opt = ad.Adam(plist, lr)
    order_rng = np.random.default_rng([config.seed, 0])
    drop_rng = np.random.default_rng([config.seed, 1])

    start = time.perf_counter()
    train0, _ = _eval_mse(forward, rows_tr, t_tr)
    val0, _ = _eval_mse(forward, rows_va, t_va)
    lam = None if lambdas is None else lambdas().tolist()
    log = [EpochRecord(0, train0, val0, None, time.perf_counter() - start, lam)]
    best = (val0, 0, _snapshot(params))
    since = 0
    stopped = False
    n = len(rows_tr)
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    pred = forward([rows_tr[i] for i in idx], rng=drop_rng)
                    loss = ad.mean(ad.square(ad.sub(ad.Tensor(t_tr[idx]), pred)))
                ad.backward(tape, loss)
            except ad.NonFiniteError as exc:
                raise NumericAbort(epoch, b, exc) from exc
            if not np.isfinite(loss.item()):
                raise NumericAbort(epoch, b, "loss")
            ad.clip_grad_norm(plist, config.grad_clip)
            opt.step()
            if on_step is not None:
                on_step(epoch, b, params)
            losses.append(loss.item())
        train_loss, _ = _eval_mse(forward, rows_tr, t_tr)
        val, _ = _eval_mse(forward, rows_va, t_va)
        lam = None if lambdas is None else lambdas().tolist()
        log.append(EpochRecord(epoch, train_loss, val, float(np.mean(losses)),
                               time.perf_counter() - start, lam))
        if val < best[0] and train_loss <= train0:
            best = (val, epoch, _snapshot(params))
            since = 0
        else:
            since += 1
            if since >= config.patience:
                stopped = True
                break
    _restore(params, best[2])
    return FitResult(best[1], best[0], log, stopped)


# --- trained models ---------------------------------------------------------


@dataclass
class TrainedLmm:
    fit: object
    selection: list
    arch: str = "lmm"

    def predict(self, samples):
        return np.asarray(predict_samples(self.fit, list(samples)), dtype=np.float64)


@dataclass
class TrainedProposed:
    model: GapTransformer
    lmm: TrainedLmm
    train_stats: dict
    result: FitResult
    arch: str = "proposed"

    def g_stat(self, samples):
        return self.lmm.predict(samples)

    def predict(self, samples):
        samples = list(samples)
        rows = tokenize_samples(samples, self.train_stats, self.model.config.m_max)
        return self.g_stat(samples) + self.model.residuals(rows)

    def checkpoint(self, meta=None):
        return ad.params_to_dict(self.model.params, {"arch": self.arch, **(meta or {})})


@dataclass
class TrainedBaseline:
    model: object
    result: FitResult
    arch: str = ""

    def predict(self, samples):
        return self.model.predict(list(samples))

    def checkpoint(self, meta=None):
        return ad.params_to_dict(self.model.params, {"arch": self.arch, **(meta or {})})


def fit_lmm_baseline(train, candidate_blocks=COVARIATE_BLOCKS):
    """BIC forward selection then ML fit on the training partition."""
    steps = []
    _, fit = select_by_bic(candidate_blocks, list(train), log=steps)
    return TrainedLmm(fit, steps)


def train_proposed(train, val, config=TrainConfig(), model_config=ModelConfig(),
                   candidate_blocks=COVARIATE_BLOCKS, lmm=None, on_step=None):
    """Fit the residual gap-aware transformer on a train/validation partition."""
    train, val = list(train), list(val)
    if not val:
        raise TrainingError("empty validation set")
    lmm = lmm or fit_lmm_baseline(train, candidate_blocks)
    stats = compute_train_stats(train)
    model = GapTransformer(model_config, seed=config.seed)
    rows_tr = tokenize_samples(train, stats, model_config.m_max)
    rows_va = tokenize_samples(val, stats, model_config.m_max)
    u_tr = residual_targets([s.y for s in train], lmm.predict(train))
    u_va = residual_targets([s.y for s in val], lmm.predict(val))

    def forward(rows, rng=None):
        return model.forward(make_batch(rows), rng)

    result = fit_network(model.params, forward, rows_tr, u_tr, rows_va, u_va, config,
                         config.learning_rate("proposed"), lambdas=model.lambdas,
                         on_step=on_step)
    return TrainedProposed(model, lmm, stats, result)


def train_baseline(arch, train, val, config=TrainConfig(), model_config=None, on_step=None):
    """Fit GRU-D (``"grud"``) or STraTS (``"strats"``) on the raw target."""
    train, val = list(train), list(val)
    if not val:
        raise TrainingError("empty validation set")
    stats = compute_train_stats(train)
    if arch == "grud":
        model = GrudModel(model_config or GrudConfig(), training_mean(train, stats), stats,
                          seed=config.seed)
    elif arch == "strats":
        model = StratsModel(model_config or STRATS_CONFIG, stats, seed=config.seed)
    else:
        raise TrainingError(f"unknown baseline {arch!r}")
    rows_tr, rows_va = model.prepare(train), model.prepare(val)
    result = fit_network(model.params, model.forward_rows, rows_tr,
                         [s.y for s in train], rows_va, [s.y for s in val], config,
                         config.learning_rate(arch), on_step=on_step)
    return TrainedBaseline(model, result, arch)
