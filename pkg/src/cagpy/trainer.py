"""Adam-based model selection for exact and computation-aware GPs."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import cagp, exact_gp
from .actions import ActionMatrix, actions_cg, actions_sparse_init
from .data import Dataset
from .errors import ConfigError, NonFiniteGradient
from .kernels import HyperParams, KernelSpec
from .losses import LossKind, loss_and_grad
from .metrics import EvalReport, eval_predictive

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    EXACT = "exact"
    CAGP_CG = "cagp_cg"
    CAGP_OPT = "cagp_opt"


DEFAULT_LOSS = {Method.EXACT: LossKind.EXACT_NLL, Method.CAGP_CG: LossKind.ELBO, Method.CAGP_OPT: LossKind.ELBO}


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.CAGP_OPT
    loss_kind: LossKind | None = None
    epochs: int = 300
    lr_initial: float = 0.1
    lr_end_factor: float = 0.1
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    budget_i: int = 16
    cg_tol: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    action_lr: float | None = None
    grad_clip: float = 1e3
    init_outputscale: float = 1.0
    init_lengthscale: float = 1.0
    init_noise: float = 0.1
    kernel: KernelSpec = field(default_factory=KernelSpec)
    alpha: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        loss = DEFAULT_LOSS[self.method] if self.loss_kind is None else LossKind(self.loss_kind)
        object.__setattr__(self, "loss_kind", loss)
        if (self.method is Method.EXACT) != (loss is LossKind.EXACT_NLL):
            raise ConfigError(f"loss {loss.value} is incompatible with method {self.method.value}")
        if self.epochs < 0 or self.eval_every < 1 or self.budget_i < 1:
            raise ConfigError("epochs must be >= 0, eval_every and budget_i >= 1")
        if self.lr_initial <= 0 or not 0 < self.lr_end_factor <= 1:
            raise ConfigError("need lr_initial > 0 and lr_end_factor in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["loss_kind"] = self.loss_kind.value
        d["adam_betas"] = list(self.adam_betas)
        d["kernel"] = {"family": self.kernel.family.value, "ard": self.kernel.ard}
        return d


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    params_snapshot: HyperParams
    test_nll: float
    test_rmse: float
    wallclock_s: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "params": self.params_snapshot.to_dict(),
                "test_nll": self.test_nll, "test_rmse": self.test_rmse, "wallclock_s": self.wallclock_s}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecord":
        return cls(d["epoch"], d["loss"], HyperParams.from_dict(d["params"]), d["test_nll"], d["test_rmse"],
                   d["wallclock_s"])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, x, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. ``lr`` may be a scalar or per-coordinate."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != state.m.shape or np.shape(x) != grads.shape:
        raise ValueError(f"shape mismatch: params {np.shape(x)}, grads {grads.shape}, state {state.m.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NonFiniteGradient(int(bad[0]), float(grads[bad[0]]))
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return np.asarray(x, dtype=float) - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


def lr_schedule(epoch: int, total_epochs: int, lr_initial: float, end_factor: float) -> float:
    """Linear decay from lr_initial (first epoch) to lr_initial * end_factor (last)."""
    if not 0 <= epoch < max(total_epochs, 1):
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs <= 1:
        return lr_initial
    frac = epoch / (total_epochs - 1)
    return lr_initial * (1.0 + (end_factor - 1.0) * frac)


@dataclass
class TrainResult:
    params: HyperParams
    actions: ActionMatrix | None
    records: list
    diverged_at: int | None = None
    config: TrainConfig | None = None


def initial_params(config: TrainConfig, d: int) -> HyperParams:
    nl = config.kernel.n_lengthscales(d)
    return HyperParams(math.log(config.init_outputscale), np.full(nl, math.log(config.init_lengthscale)),
                       math.log(config.init_noise))


@dataclass(frozen=True)
class FittedPosterior:
    """A fitted posterior; ``predict(Xstar)`` gives (mean, latent var, predictive var)."""

    state: object
    predict: Callable


def posterior_for(config: TrainConfig, params: HyperParams, X, y, actions: ActionMatrix | None) -> FittedPosterior:
    if config.method is Method.EXACT:
        post = exact_gp.fit_exact(config.kernel, params, X, y)

        def predict(Xs):
            m, v = exact_gp.predict_exact(post, Xs)
            return m, v, v + params.noise_var

        return FittedPosterior(post, predict)
    if config.method is Method.CAGP_CG:
        actions = actions_cg(config.kernel, params, X, y, config.budget_i, config.cg_tol)
    state = cagp.fit_batch(config.kernel, params, X, y, actions)
    return FittedPosterior(state, lambda Xs: cagp.predict_cagp(state, Xs))


def evaluate(config: TrainConfig, params: HyperParams, dataset: Dataset, actions=None) -> EvalReport:
    post = posterior_for(config, params, dataset.X_train, dataset.y_train, actions)
    if dataset.y_test.size == 0:
        return EvalReport(float("nan"), float("nan"), float("nan"), 0)
    mean, _, pvar = post.predict(dataset.X_test)
    return eval_predictive(mean, pvar, dataset.y_test, dataset.target_mean, dataset.target_std, config.alpha)


def train(config: TrainConfig, dataset: Dataset, params: HyperParams | None = None,
          actions: ActionMatrix | None = None, records_path=None,
          callback: Callable | None = None) -> TrainResult:
    """Run Adam on the configured loss for ``config.epochs`` epochs.

    CaGP-Opt optimizes hyperparameters and block values jointly; CaGP-CG
    rebuilds its residual actions from the current hyperparameters at every
    evaluation and optimizes hyperparameters only. ``callback(epoch,
    params, actions)`` is invoked before each update.
    """
    X, y = dataset.X_train, dataset.y_train
    n, d = X.shape
    if config.method is not Method.EXACT and config.budget_i > n:
        raise ConfigError(f"budget_i={config.budget_i} exceeds n_train={n}")
    params = params or initial_params(config, d)
    if config.method is Method.CAGP_OPT and actions is None:
        actions = actions_sparse_init(n, config.budget_i, config.seed)
    p = params.size
    x = params.to_vector()
    if config.method is Method.CAGP_OPT:
        x = np.r_[x, actions.trainable()]
    lr_scale = np.ones_like(x)
    if config.method is Method.CAGP_OPT and config.action_lr is not None:
        lr_scale[p:] = config.action_lr / config.lr_initial
    adam = AdamState.zeros(x.size)
    records = []
    out = open(records_path, "w") if records_path else None
    t0 = time.perf_counter()
    diverged = None
    try:
        for epoch in range(config.epochs):
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    params, actions, value, grad, rec = _epoch_eval(config, dataset, x, p, actions, epoch, t0)
            except (ArithmeticError, ValueError) as exc:
                # overflowing hyperparameters, failed factorizations, non-finite gradients
                log.warning("epoch %d: %s", epoch, exc)
                diverged = epoch
                break
            if not math.isfinite(value.total):
                diverged = epoch
                break
            if callback is not None:
                callback(epoch, params, actions)
            if rec is not None:
                records.append(rec)
                if out:
                    out.write(json.dumps(rec.to_dict()) + "\n")
                    out.flush()
            g = grad.flat()
            gnorm = float(np.linalg.norm(g))
            if gnorm > config.grad_clip:
                g = g * (config.grad_clip / gnorm)
            lr = lr_schedule(epoch, config.epochs, config.lr_initial, config.lr_end_factor)
            x, adam = adam_step(adam, x, g, lr * lr_scale, config.adam_betas, config.adam_eps)
            if not np.all(np.isfinite(x)):
                diverged = epoch
                break
    finally:
        if out:
            out.close()
    if diverged is None:
        params = HyperParams.from_vector(x[:p])
        if config.method is Method.CAGP_OPT:
            actions = actions.with_values(x[p:])
    if config.method is Method.CAGP_CG:
        actions = actions_cg(config.kernel, params, X, y, config.budget_i, config.cg_tol)
    return TrainResult(params, actions, records, diverged, config)


def _epoch_eval(config, dataset, x, p, actions, epoch, t0):
    """Loss, gradient and (on eval epochs) a record at the current point."""
    X, y = dataset.X_train, dataset.y_train
    params = HyperParams.from_vector(x[:p])
    if config.method is Method.CAGP_OPT:
        actions = actions.with_values(x[p:])
    elif config.method is Method.CAGP_CG:
        actions = actions_cg(config.kernel, params, X, y, config.budget_i, config.cg_tol)
    value, grad = loss_and_grad(config.loss_kind, config.kernel, params, X, y, actions,
                                wrt_actions=config.method is Method.CAGP_OPT)
    rec = None
    if math.isfinite(value.total) and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
        rep = evaluate(config, params, dataset, actions if config.method is Method.CAGP_OPT else None)
        rec = TrainRecord(epoch, value.total, params, rep.test_nll, rep.test_rmse, time.perf_counter() - t0)
    return params, actions, value, grad, rec


def read_records(path) -> list:
    with open(path) as fh:
        return [TrainRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_checkpoint(fh, config: TrainConfig, params: HyperParams, actions: ActionMatrix | None,
                    dataset: Dataset, epoch: int) -> None:
    """Params, actions and training data as an ``.npz`` container."""
    header = {"format": "cagpy-checkpoint", "version": 1, "epoch": epoch, "config": config.to_dict(),
              "params": params.to_dict(), "target_mean": dataset.target_mean, "target_std": dataset.target_std,
              "actions": None}
    arrays = {"X_train": dataset.X_train, "y_train": dataset.y_train}
    if actions is not None:
        header["actions"] = {"layout": actions.layout, "n": actions.n, "i": actions.i}
        if actions.is_sparse:
            arrays.update(action_bounds=actions.bounds, action_values=actions.values)
        else:
            arrays.update(action_cols=actions.cols)
    np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["adam_betas"] = tuple(d["adam_betas"])
    d["kernel"] = KernelSpec(d["kernel"]["family"], d["kernel"]["ard"])
    return TrainConfig(**d)


def load_checkpoint(fh) -> dict:
    with np.load(fh, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        if h.get("format") != "cagpy-checkpoint":
            raise ValueError("not a cagpy checkpoint")
        actions = None
        if h["actions"] is not None:
            a = h["actions"]
            if a["layout"] == "block_sparse":
                actions = ActionMatrix(a["n"], bounds=z["action_bounds"], values=z["action_values"])
            else:
                actions = ActionMatrix(a["n"], cols=z["action_cols"].reshape(a["n"], a["i"]))
        return {"config": config_from_dict(h["config"]), "params": HyperParams.from_dict(h["params"]),
                "actions": actions, "X_train": z["X_train"], "y_train": z["y_train"], "epoch": h["epoch"],
                "target_mean": h["target_mean"], "target_std": h["target_std"]}
