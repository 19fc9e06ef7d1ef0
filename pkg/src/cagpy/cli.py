"""Command-line harness: ``cagpy train | eval | verify | diagnose-policies``.

Config files are flat ``key = value`` text; ``#`` starts a comment and
blank lines are ignored. Flags given on the command line win over the
file. See README.md for the list of keys and the output schemas.

Exit codes: 0 success, 1 config / IO / contract error (or a failing
verify suite), 2 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from .actions import EIGEN_ORACLE_CAP, actions_cg, actions_eigen_oracle, actions_random
from .data import Dataset, load_csv, synth_gp
from .errors import ConfigError, ContractViolation, ParseError
from .kernels import Family, HyperParams, KernelSpec
from .metrics import grassmann_distance
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .verify import SUITES, run_suite

log = logging.getLogger("cagpy")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run: data source, model, optimizer, output."""

    dataset: str = "synth"
    target_col: str = "y"
    train_fraction: float = 0.9
    standardize: bool = False
    synth_n: int = 512
    synth_d: int = 1
    synth_outputscale: float = 1.0
    synth_lengthscale: float = 0.1
    synth_noise: float = 0.1
    out: str = "runs/default"
    seed: int = 0
    method: str = "cagp_opt"
    loss: str = ""
    kernel: str = "matern32"
    ard: bool = True
    epochs: int = 300
    lr: float = 0.1
    lr_end_factor: float = 0.1
    action_lr: float = 0.0
    budget_i: int = 16
    cg_tol: float = 1e-4
    eval_every: int = 1
    grad_clip: float = 1e3
    init_outputscale: float = 1.0
    init_lengthscale: float = 1.0
    init_noise: float = 0.1
    alpha: float = 0.95

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(Family(self.kernel), self.ard)

    def train_config(self) -> TrainConfig:
        return TrainConfig(method=self.method, loss_kind=self.loss or None, epochs=self.epochs,
                           lr_initial=self.lr, lr_end_factor=self.lr_end_factor, budget_i=self.budget_i,
                           cg_tol=self.cg_tol, seed=self.seed, eval_every=self.eval_every,
                           action_lr=self.action_lr or None, grad_clip=self.grad_clip,
                           init_outputscale=self.init_outputscale, init_lengthscale=self.init_lengthscale,
                           init_noise=self.init_noise, kernel=self.kernel_spec(), alpha=self.alpha)

    def build_dataset(self) -> Dataset:
        if self.dataset == "synth":
            spec = self.kernel_spec()
            ls = [self.synth_lengthscale] * spec.n_lengthscales(self.synth_d)
            truth = HyperParams.from_natural(self.synth_outputscale, ls, self.synth_noise)
            return synth_gp(spec, truth, self.synth_n, self.synth_d, self.seed, self.train_fraction,
                            self.standardize)
        return load_csv(self.dataset, self.target_col, self.seed, self.train_fraction)

    def dumps(self) -> str:
        lines = [f"# cagpy {__version__} run config"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}
FLAG_KEYS = ("seed", "out", "dataset", "target_col", "method", "loss", "budget_i", "epochs", "lr", "alpha")


def _coerce(key, raw, where):
    kind = FIELD_TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        raise ParseError(f"{where}: {key} expects {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse the flat key = value grammar into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ParseError(f"{where}: expected 'key = value', got {body!r}", row=lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in FIELD_TYPES:
            raise ParseError(f"{where}: unknown key {key!r}", row=lineno)
        if key in out:
            raise ParseError(f"{where}: duplicate key {key!r}", row=lineno)
        out[key] = _coerce(key, raw, where)
    return out


def load_run_config(path: str | None, overrides: dict, base: dict | None = None) -> RunConfig:
    """Defaults, then ``base``, then the file at ``path``, then non-None ``overrides``."""
    values = dict(base or {})
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read(), path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    if cfg.dataset != "synth" and not os.path.exists(cfg.dataset):
        raise ConfigError(f"dataset file not found: {cfg.dataset}")
    if not 0 < cfg.alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    cfg.train_config()  # validates method / loss / optimizer settings
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _eval_payload(cfg: RunConfig, report, params, epochs_run, diverged_at, wallclock):
    out = report.to_dict()
    out.update(method=cfg.method, loss=cfg.train_config().loss_kind.value, budget_i=cfg.budget_i,
               alpha=cfg.alpha, epochs_run=epochs_run, diverged_at=diverged_at,
               params=params.to_dict(), wallclock_s=wallclock, seed=cfg.seed)
    return out


def cmd_train(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "run.cfg"), "w") as fh:
        fh.write(cfg.dumps())
    tc = cfg.train_config()
    ds = cfg.build_dataset()
    t0 = time.perf_counter()
    res = train(tc, ds, records_path=os.path.join(cfg.out, "records.jsonl"))
    epochs_run = res.diverged_at if res.diverged_at is not None else tc.epochs
    with open(os.path.join(cfg.out, "checkpoint.bin"), "wb") as fh:
        save_checkpoint(fh, tc, res.params, res.actions, ds, epochs_run)
    if res.diverged_at is not None:
        print(f"diverged at epoch {res.diverged_at}", file=sys.stderr)
        _write_json(os.path.join(cfg.out, "final.eval.json"),
                    {"diverged_at": res.diverged_at, "epochs_run": epochs_run, "params": res.params.to_dict(),
                     "method": cfg.method, "seed": cfg.seed})
        return EXIT_DIVERGED
    rep = evaluate(tc, res.params, ds, res.actions)
    payload = _eval_payload(cfg, rep, res.params, epochs_run, None, time.perf_counter() - t0)
    _write_json(os.path.join(cfg.out, "final.eval.json"), payload)
    print(json.dumps(rep.to_dict()))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    path = checkpoint or os.path.join(cfg.out, "checkpoint.bin")
    with open(path, "rb") as fh:
        ck = load_checkpoint(fh)
    ds = cfg.build_dataset()
    if ds.X_train.shape != ck["X_train"].shape or not np.array_equal(ds.X_train, ck["X_train"]):
        raise ConfigError("checkpoint was trained on a different dataset than the config describes")
    t0 = time.perf_counter()
    rep = evaluate(ck["config"], ck["params"], ds, ck["actions"])
    payload = _eval_payload(cfg, rep, ck["params"], ck["epoch"], None, time.perf_counter() - t0)
    _write_json(os.path.join(os.path.dirname(path) or ".", "eval.json"), payload)
    print(json.dumps(rep.to_dict()))
    return EXIT_OK


def cmd_verify(suite: str, seed: int) -> int:
    if suite != "all" and suite not in SUITES:
        print(f"unknown suite {suite!r}; choose from: all, {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_ERROR
    results = run_suite(suite, seed)
    width = max(len(f"{r.suite}/{r.name}") for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {f'{r.suite}/{r.name}':<{width}}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return EXIT_OK if n_fail == 0 else EXIT_ERROR


DIAGNOSE_DEFAULTS = {"synth_n": 200, "synth_d": 2, "synth_lengthscale": 0.3, "budget_i": 8, "epochs": 50,
                     "method": "cagp_opt", "out": "runs/diagnose"}


def policy_distances(cfg: RunConfig, ds: Dataset) -> list:
    """Train, and at every eval epoch measure each policy's distance to the top-i eigenspace.

    Returns rows (epoch, policy, distance).
    """
    tc = cfg.train_config()
    n = ds.n_train
    if n > EIGEN_ORACLE_CAP:
        raise ContractViolation(f"n_train={n} exceeds the eigen-oracle cap {EIGEN_ORACLE_CAP}")
    i = tc.budget_i
    X, y = ds.X_train, ds.y_train
    rows = []

    def record(epoch, params, actions):
        if epoch % tc.eval_every and epoch != tc.epochs - 1:
            return
        U = actions_eigen_oracle(tc.kernel, params, X, i).cols
        spans = {
            "cg": actions_cg(tc.kernel, params, X, y, i, tol=0.0).cols,
            "random": actions_random(n, i, cfg.seed * 100003 + epoch).cols,
        }
        if actions is not None and tc.method.value == "cagp_opt":
            spans["opt"] = actions.dense()
        for name, S in spans.items():
            rows.append((epoch, name, grassmann_distance(U, S)))

    res = train(tc, ds, callback=record)
    if res.diverged_at is not None:
        log.warning("training diverged at epoch %d", res.diverged_at)
    return rows


def cmd_diagnose(cfg: RunConfig) -> int:
    ds = cfg.build_dataset()
    rows = policy_distances(cfg, ds)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "policy_distances.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "policy", "distance"])
        w.writerows((e, p, f"{d:.12g}") for e, p, d in rows)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagpy", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cagpy {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--dataset", help="'synth' or a CSV path")
        p.add_argument("--target-col", dest="target_col")
        p.add_argument("--method", choices=["exact", "cagp_cg", "cagp_opt"])
        p.add_argument("--loss", choices=["elbo", "projected_nll", "exact_nll"])
        p.add_argument("--budget-i", dest="budget_i", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--alpha", type=float)

    run_flags(sub.add_parser("train", help="train a model and write records, checkpoint and final eval"))
    p_eval = sub.add_parser("eval", help="re-evaluate a saved checkpoint on the configured test split")
    run_flags(p_eval)
    p_eval.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
    p_ver = sub.add_parser("verify", help="run a property suite")
    p_ver.add_argument("suite", help=f"one of: all, {', '.join(SUITES)}")
    p_ver.add_argument("--seed", type=int, default=0)
    run_flags(sub.add_parser("diagnose-policies", help="CSV of policy-to-eigenspace Grassmann distances"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.suite, args.seed)
        overrides = {k: getattr(args, k) for k in FLAG_KEYS}
        if args.command == "diagnose-policies":
            return cmd_diagnose(load_run_config(args.config, overrides, DIAGNOSE_DEFAULTS))
        cfg = load_run_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_eval(cfg, args.checkpoint)
    except (ParseError, ConfigError, ContractViolation, OSError, KeyError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
