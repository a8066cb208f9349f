"""Config-driven experiment runs, report emission and cross-run comparison.

Every random stream is derived from the master seed through
``sabma.seeding`` (stream id, index):

    DATA      dataset draw when the dataset spec has no seed of its own
    INIT      point-model initialization
    TRAIN     per-step posterior noise during fine-tuning
    SAMPLE    BMA sample i uses index i
    LANCZOS   start vector for sample i uses index i; the averaged Hessian uses index M
    SHUFFLE   minibatch order for stage s uses index s; random BMA ordering uses index 100
    CORRUPT   corruption noise at severity s uses index s
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .autodiff import ParamVector
from .bma import ORDERS, metrics, ordered_bma_from_probs, sample_probs
from .data import Dataset, corrupt, gen_dataset, gen_validation, load_csv
from .errors import ConfigError
from .models import build_mlp, partition_params
from .optimizers import (FIM_MODES, SCHEDULES, LrSchedule, PerturbationConfig, fsam_step, lr_at, sabma_step,
                         sam_step, sgd_point_step, vi_sgd_step)
from .posterior import GROUPS, SwagCollector, moped_from_dnn, sample, save_posterior, swag_fit
from .spectroscopy import hessian_operator, lanczos_topk, summarize, weyl_certificate

SCHEMA_VERSION = "sabma.report/1"
MODES = ("dnn", "sam", "fsam", "swag", "sabma_swag", "sabma_vi")
POSTERIOR_MODES = ("swag", "sabma_swag", "sabma_vi")
SABMA_MODES = ("sabma_swag", "sabma_vi")
PATIENCE = 20
RANDOM_ORDER_INDEX = 100


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "two_moons"
    n_per_class: int = 10
    noise: float = 0.1
    path: str | None = None
    test_path: str | None = None
    seed: int | None = None
    classes: int = 2
    dim: int = 2
    center_distance: float = 10.0


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (16, 16)
    norm: bool = True
    activation: str = "tanh"


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 5e-2
    pretrain_lr: float = 5e-2
    momentum: float = 0.9
    wd: float = 5e-4
    gamma: float = 0.1
    alpha: float = 1e-4
    delta: float = 0.05
    beta: float = 0.0
    K: int = 5
    schedule: str = "constant"
    warmup_steps: int = 0
    fim_mode: str = "samelson_posterior"
    eta_fisher: float = 1.0
    batch_size: int | None = None
    finetune_optimizer: str = "sabma"
    partition: str = "norm+head"
    swag_partition: str = "all"
    train_L: bool = True


@dataclass(frozen=True)
class EvalSpec:
    M: int = 30
    spectroscopy: bool = True
    k: int = 5
    lanczos_iters: int = 40
    lanczos_tol: float = 1e-4
    weyl: bool = True
    orders: tuple = ("flat", "sharp", "random")
    severities: tuple = (1, 2, 3, 4, 5)
    hessian_data: str = "train"


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "sabma_vi"
    seed: int = 0
    epochs: int = 150
    finetune_epochs: int = 100
    early_stopping: bool = True
    output_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        _validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything except the seed and output location."""
        doc = self.to_dict()
        doc.pop("seed")
        doc.pop("output_dir")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)


_NESTED = {"dataset": DatasetSpec, "model": ModelSpec, "optim": OptimSpec, "eval": EvalSpec}
_TUPLES = {"hidden", "orders", "severities"}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if cls is ExperimentConfig and key in _NESTED:
            value = _build(_NESTED[key], value, key)
        elif key in _TUPLES:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key} must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "")


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _validate(cfg: ExperimentConfig):
    d, m, o, e = cfg.dataset, cfg.model, cfg.optim, cfg.eval
    _check(cfg.mode in MODES, f"mode must be one of {MODES}, got {cfg.mode!r}")
    _check(_is_int(cfg.seed) and cfg.seed >= 0, "seed must be a non-negative integer")
    _check(_is_int(cfg.epochs) and cfg.epochs >= 1, "epochs must be >= 1")
    _check(_is_int(cfg.finetune_epochs) and cfg.finetune_epochs >= 1, "finetune_epochs must be >= 1")

    _check(d.kind in ("two_moons", "spirals", "blobs", "csv"), f"unknown dataset kind {d.kind!r}")
    if d.kind == "csv":
        _check(bool(d.path), "dataset.path is required for kind 'csv'")
    _check(_is_int(d.n_per_class) and d.n_per_class >= 1, "dataset.n_per_class must be >= 1")
    _check(d.noise >= 0, "dataset.noise must be >= 0")
    _check(d.seed is None or _is_int(d.seed), "dataset.seed must be an integer or null")

    _check(all(_is_int(h) and h >= 1 for h in m.hidden), "model.hidden entries must be positive integers")
    _check(m.activation in ("tanh", "relu"), "model.activation must be 'tanh' or 'relu'")

    _check(o.lr > 0 and o.pretrain_lr > 0, "learning rates must be positive")
    _check(0 <= o.momentum < 1, "momentum must lie in [0, 1)")
    _check(o.wd >= 0 and o.beta >= 0, "wd and beta must be >= 0")
    _check(o.gamma >= 0, "gamma must be >= 0")
    _check(o.alpha > 0 and o.delta > 0, "alpha and delta must be positive")
    _check(_is_int(o.K) and o.K >= 0, "K must be a non-negative integer")
    _check(o.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}")
    _check(o.fim_mode in FIM_MODES, f"fim_mode must be one of {FIM_MODES}")
    _check(o.batch_size is None or (_is_int(o.batch_size) and o.batch_size >= 1), "batch_size must be >= 1")
    _check(o.finetune_optimizer in ("sabma", "sgd"), "finetune_optimizer must be 'sabma' or 'sgd'")
    for name in ("partition", "swag_partition"):
        _check(getattr(o, name) in ("norm+head", "head", "all"), f"optim.{name} must be norm+head, head or all")
    if cfg.mode in ("swag", "sabma_swag"):
        _check(cfg.finetune_epochs >= max(2, o.K + 1), "finetune_epochs must cover K+1 SWAG snapshots")

    _check(_is_int(e.M) and e.M >= 1, "eval.M must be >= 1")
    _check(_is_int(e.k) and e.k >= 1, "eval.k must be >= 1")
    _check(_is_int(e.lanczos_iters) and e.lanczos_iters >= e.k, "eval.lanczos_iters must be >= eval.k")
    _check(all(x in ORDERS for x in e.orders), f"eval.orders entries must be in {ORDERS}")
    if not e.spectroscopy:
        _check(not {"flat", "sharp"} & set(e.orders), "flat/sharp orderings need eval.spectroscopy")
    _check(all(s in (1, 2, 3, 4, 5) for s in e.severities), "eval.severities must be integers in 1..5")
    _check(e.hessian_data in ("train", "test"), "eval.hessian_data must be 'train' or 'test'")


# -- data and batching ---------------------------------------------------------------


def load_data(cfg: ExperimentConfig):
    """``(train, test, validation or None)`` for the config's dataset spec."""
    d = cfg.dataset
    if d.kind == "csv":
        train = load_csv(d.path)
        test = load_csv(d.test_path) if d.test_path else train
        return train, test, None
    seed = d.seed if d.seed is not None else seeding.int_seed(cfg.seed, seeding.DATA)
    kw = {"classes": d.classes, "dim": d.dim, "center_distance": d.center_distance} if d.kind == "blobs" else {}
    train, test = gen_dataset(d.kind, d.n_per_class, d.noise, seed, **kw)
    val = gen_validation(d.kind, d.noise, seed, **kw) if cfg.early_stopping else None
    return train, test, val


def _batches(data: Dataset, batch_size, rng):
    n = len(data)
    if batch_size is None or batch_size >= n:
        yield data
        return
    idx = rng.permutation(n)
    for start in range(0, n, batch_size):
        j = idx[start:start + batch_size]
        yield Dataset(data.X[j], data.y[j], data.classes)


def _steps_per_epoch(n, batch_size):
    return 1 if batch_size is None or batch_size >= n else math.ceil(n / batch_size)


def _schedule(cfg, base_lr, epochs, n):
    o = cfg.optim
    total = epochs * _steps_per_epoch(n, o.batch_size)
    return LrSchedule(o.schedule, base_lr, total, min(o.warmup_steps, max(total - 1, 0)))


class _EarlyStopper:
    """Tracks held-out NLL; ``step`` returns True once patience runs out."""

    def __init__(self, enabled):
        self.enabled = enabled
        self.best = math.inf
        self.best_state = None
        self.best_epoch = -1
        self.bad = 0

    def step(self, epoch, nll, state):
        if not self.enabled:
            self.best_state = state
            return False
        if nll < self.best:
            self.best, self.best_state, self.best_epoch, self.bad = nll, state, epoch, 0
            return False
        self.bad += 1
        return self.bad >= PATIENCE


def _val_nll(model, params, val):
    return metrics(sample_probs(model, [params], val.X)[0], val.y)[2]


# -- training stages -----------------------------------------------------------------


def train_point(cfg, model, params, train, val, optimizer="sgd", trainable=None, stage=0, collector=None,
                epochs=None, base_lr=None):
    """Point training with SGD/SAM/FSAM; returns ``(params, info)``.

    With ``collector`` every epoch's iterate is recorded and early stopping is off.
    """
    o = cfg.optim
    epochs = epochs or cfg.epochs
    sched = _schedule(cfg, base_lr or o.pretrain_lr, epochs, len(train))
    rng = seeding.rng(cfg.seed, seeding.SHUFFLE, stage)
    stopper = _EarlyStopper(val is not None and collector is None)
    velocity, t, ran = None, 0, 0
    for epoch in range(epochs):
        for batch in _batches(train, o.batch_size, rng):
            lr = lr_at(sched, t)
            if optimizer == "sam":
                params, velocity = sam_step(model, params, batch, o.gamma, lr, o.momentum, o.wd, velocity, trainable)
            elif optimizer == "fsam":
                params, velocity = fsam_step(model, params, batch, o.gamma, lr, o.momentum, o.wd, velocity,
                                             o.eta_fisher, trainable)
            else:
                params, velocity = sgd_point_step(model, params, batch, lr, o.momentum, o.wd, velocity, trainable)
            t += 1
        ran = epoch + 1
        if collector is not None:
            collector.collect(params)
        if stopper.step(epoch, _val_nll(model, params, val) if stopper.enabled else 0.0, params):
            break
    info = {"epochs_run": ran, "best_epoch": stopper.best_epoch if stopper.enabled else ran - 1}
    return stopper.best_state, info


def finetune_posterior(cfg, model, post, train, val, stage=2):
    """SA-BMA (or plain VI-SGD) updates of theta; returns ``(posterior, info)``."""
    o = cfg.optim
    groups = GROUPS if o.train_L else ("mu", "log_sigma")
    pcfg = PerturbationConfig(gamma=o.gamma, fim_mode=o.fim_mode, eta_fisher=o.eta_fisher)
    sched = _schedule(cfg, o.lr, cfg.finetune_epochs, len(train))
    shuffle = seeding.rng(cfg.seed, seeding.SHUFFLE, stage)
    noise = seeding.rng(cfg.seed, seeding.TRAIN, 0)
    stopper = _EarlyStopper(val is not None)
    velocity, t, ran = None, 0, 0
    for epoch in range(cfg.finetune_epochs):
        for batch in _batches(train, o.batch_size, shuffle):
            lr = lr_at(sched, t)
            if o.finetune_optimizer == "sgd":
                post, velocity = vi_sgd_step(model, post, batch, lr, o.momentum, o.wd, noise, velocity, o.beta,
                                             groups)
            else:
                post, velocity = sabma_step(model, post, batch, pcfg, lr, o.momentum, o.wd, noise, velocity,
                                            o.beta, groups)
            t += 1
        ran = epoch + 1
        score = _val_nll(model, post.mean_params(), val) if stopper.enabled else 0.0
        if stopper.step(epoch, score, post):
            break
    info = {"epochs_run": ran, "best_epoch": stopper.best_epoch if stopper.enabled else ran - 1}
    return stopper.best_state, info


def build_model(cfg: ExperimentConfig, train: Dataset):
    return build_mlp(train.dim, list(cfg.model.hidden), train.classes, cfg.model.norm, cfg.model.activation)


def fit_model(cfg: ExperimentConfig, train, val):
    """Run the mode's training pipeline; returns ``(model, point params, posterior or None, stages)``."""
    model = build_model(cfg, train)
    w0 = model.init_params(seeding.int_seed(cfg.seed, seeding.INIT))
    optimizer = cfg.mode if cfg.mode in ("sam", "fsam") else "sgd"
    params, info = train_point(cfg, model, w0, train, val, optimizer, stage=0)
    stages = {"pretrain": info}
    if cfg.mode not in POSTERIOR_MODES:
        return model, params, None, stages

    o = cfg.optim
    if cfg.mode in ("swag", "sabma_swag"):
        policy = o.swag_partition if cfg.mode == "swag" else o.partition
        part = partition_params(model, policy)
        collector = SwagCollector(o.K, part, params.registry)
        params_swag, info = train_point(cfg, model, params, train, None, "sgd", part.trainable, stage=1,
                                        collector=collector, epochs=cfg.finetune_epochs, base_lr=o.lr)
        stages["swag_collect"] = info
        post = swag_fit(collector)
        if cfg.mode == "swag":
            return model, params, post, stages
    else:
        post = moped_from_dnn(params, partition_params(model, o.partition), o.delta, o.alpha, o.K)
    post, info = finetune_posterior(cfg, model, post, train, val)
    stages["finetune"] = info
    return model, params, post, stages


# -- evaluation ----------------------------------------------------------------------


def draw_weights(cfg, params, post):
    if post is None:
        return [params]
    return [sample(post, seeding.rng(cfg.seed, seeding.SAMPLE, i)) for i in range(cfg.eval.M)]


def spectroscopy(cfg, model, weights, data):
    """Per-sample top-k spectra, plus the Weyl certificate when enabled."""
    e = cfg.eval
    fn = model.loss_fn(data.X, data.y)
    dim = weights[0].size
    iters = min(e.lanczos_iters, dim)
    k = min(e.k, iters)
    reports = [
        lanczos_topk(hessian_operator(fn, w), dim, k, iters, e.lanczos_tol,
                     seeding.int_seed(cfg.seed, seeding.LANCZOS, i))
        for i, w in enumerate(weights)
    ]
    out = {"flatness": summarize(reports)}
    if e.weyl:
        mins = [
            lanczos_topk(hessian_operator(fn, w, negate=True), dim, 1, iters, e.lanczos_tol,
                         seeding.int_seed(cfg.seed, seeding.LANCZOS, len(weights) + 1 + i))
            for i, w in enumerate(weights)
        ]
        ops = [hessian_operator(fn, w) for w in weights]
        averaged = lanczos_topk(lambda v: sum(op(v) for op in ops) / len(ops), dim, 1, iters, e.lanczos_tol,
                                seeding.int_seed(cfg.seed, seeding.LANCZOS, len(weights)))
        # Ritz values carry residual-sized error; widen the float slack by it
        slack = (averaged.residuals[0] + np.mean([r.residuals[0] for r in reports])
                 + np.mean([r.residuals[0] for r in mins]))
        out["weyl"] = weyl_certificate([r.lambda1 for r in reports], [-r.lambda1 for r in mins],
                                       averaged.lambda1, extra_slack=float(slack))
        out["averaged"] = averaged
    return out


def _metric_dict(probs, labels):
    acc, ece, nll = metrics(probs, labels)
    return {"acc": acc, "ece": ece, "nll": nll}


def evaluate_run(cfg, model, params, post, train, test):
    e = cfg.eval
    weights = draw_weights(cfg, params, post)
    probs = sample_probs(model, weights, test.X)
    bma_probs = probs.sum(axis=0) / len(weights)
    result = {"metrics": _metric_dict(bma_probs, test.y), "num_samples": len(weights)}

    lambda1s = None
    if e.spectroscopy:
        spec = spectroscopy(cfg, model, weights, train if e.hessian_data == "train" else test)
        result["spectroscopy"] = spec["flatness"].to_dict()
        lambda1s = spec["flatness"].lambda1s
        if "weyl" in spec:
            result["weyl"] = spec["weyl"].to_dict()
            result["averaged_hessian_lambda1"] = spec["averaged"].lambda1

    result["ordered_bma"] = {
        order: ordered_bma_from_probs(probs, test.y, order, lambda1s,
                                      seeding.int_seed(cfg.seed, seeding.SHUFFLE, RANDOM_ORDER_INDEX)).to_dict()
        for order in e.orders
    }
    shift = []
    for s in e.severities:
        Xc = corrupt(test.X, s, seeding.rng(cfg.seed, seeding.CORRUPT, s))
        shift.append({"severity": s, **_metric_dict(sample_probs(model, weights, Xc).mean(axis=0), test.y)})
    result["shift"] = shift
    result["weights"] = weights
    return result


# -- artifacts -------------------------------------------------------------------------


def params_to_dict(params: ParamVector) -> dict:
    return {
        "registry": {k: [s, e, list(shape)] for k, (s, e, shape) in params.registry.items()},
        "values": params.values.tolist(),
    }


def params_from_dict(doc: dict) -> ParamVector:
    registry = {k: (s, e, tuple(shape)) for k, (s, e, shape) in doc["registry"].items()}
    return ParamVector(np.array(doc["values"], dtype=np.float64), registry)


def save_params(params: ParamVector, path) -> None:
    atomic_write(path, json.dumps(params_to_dict(params)))


def load_params(path) -> ParamVector:
    return params_from_dict(json.loads(Path(path).read_text()))


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


# -- orchestration ---------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir=None, canonical: bool = False) -> dict:
    """Train and evaluate one config; writes ``report.json`` (and artifacts) when ``out_dir`` is set.

    On failure a report with ``complete = false`` naming the failed stage is
    written before the exception propagates (it is attached as ``exc.report``).
    """
    out_dir = out_dir if out_dir is not None else cfg.output_dir
    started = time.perf_counter()
    report = {
        "schema_version": SCHEMA_VERSION,
        "complete": False,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
    }
    stage = "data"
    try:
        train, test, val = load_data(cfg)
        report["data"] = {"train_size": len(train), "test_size": len(test), "classes": train.classes,
                          "dim": train.dim, "validation_size": len(val) if val is not None else 0}
        stage = "train"
        model, params, post, stages = fit_model(cfg, train, val)
        report["stages"] = stages
        report["num_params"] = model.num_params
        report["trainable_params"] = post.num_trainable if post is not None else model.num_params
        if post is not None:
            report["p1"] = post.p1
        stage = "evaluate"
        result = evaluate_run(cfg, model, params, post, train, test)
        weights = result.pop("weights")
        report.update(result)
        stage = "write"
        if out_dir is not None:
            out = Path(out_dir)
            artifacts = {"weights": "weights.json"}
            save_params(params, out / "weights.json")
            if post is not None:
                artifacts["posterior"] = "posterior.json"
                artifacts["posterior_mean"] = "posterior_mean.json"
                _save_posterior_atomic(post, out / "posterior.json")
                save_params(post.mean_params(), out / "posterior_mean.json")
                atomic_write(out / "bma_samples.csv", _samples_csv(weights))
            report["artifacts"] = artifacts
        report["complete"] = True
    except Exception as exc:
        report["failed_stage"] = stage
        report["error"] = f"{type(exc).__name__}: {exc}"
        _finish(report, out_dir, canonical, started)
        exc.report = report
        raise
    _finish(report, out_dir, canonical, started)
    return report


def _save_posterior_atomic(post, path):
    tmp = Path(path).with_suffix(".json.tmp")
    save_posterior(post, tmp)
    os.replace(tmp, path)


def _samples_csv(weights) -> str:
    lines = ["sample," + ",".join(f"w{i}" for i in range(weights[0].size))]
    for i, w in enumerate(weights):
        lines.append(f"{i}," + ",".join(f"{v:.17g}" for v in w.values))
    return "\n".join(lines) + "\n"


def _finish(report, out_dir, canonical, started):
    if not canonical:
        report["wall_clock_s"] = time.perf_counter() - started
        report["created_unix"] = time.time()
    if out_dir is not None:
        atomic_write(Path(out_dir) / "report.json", dump_report(report))


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


# -- comparison ------------------------------------------------------------------------

COLUMNS = ("acc", "ece", "nll", "lambda1", "ratio_1_5")


def _row(report):
    spec = report.get("spectroscopy") or {}
    m = report.get("metrics") or {}
    return {
        "acc": m.get("acc"), "ece": m.get("ece"), "nll": m.get("nll"),
        "lambda1": spec.get("mean_lambda1"), "ratio_1_5": spec.get("mean_ratio_1_5"),
    }


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), std


def compare_runs(paths) -> tuple[str, dict]:
    """Per-run rows plus mean and sample std for runs sharing a config hash."""
    if not paths:
        raise ValueError("compare needs at least one report")
    reports = [(str(p), load_report(p)) for p in paths]
    versions = {r.get("schema_version") for _, r in reports}
    if len(versions) != 1:
        raise ConfigError(f"reports mix schema versions: {sorted(map(str, versions))}")
    if versions != {SCHEMA_VERSION}:
        raise ConfigError(f"unsupported report schema {versions.pop()!r}; expected {SCHEMA_VERSION!r}")

    runs = [{"path": p, "mode": r["mode"], "seed": r["seed"], "config_hash": r["config_hash"], **_row(r)}
            for p, r in reports]
    groups = {}
    for run in runs:
        groups.setdefault(run["config_hash"], []).append(run)
    summary = []
    for h, members in groups.items():
        entry = {"config_hash": h, "mode": members[0]["mode"], "n": len(members)}
        for col in COLUMNS:
            mean, std = _mean_std([m[col] for m in members])
            entry[col] = {"mean": mean, "std": std}
        summary.append(entry)
    table = {"schema_version": SCHEMA_VERSION, "runs": runs, "groups": summary}
    return render_table(table), table


def _fmt(x, digits=4):
    return "-" if x is None else f"{x:.{digits}g}"


def render_table(table: dict) -> str:
    head = ["mode", "seed", "hash"] + list(COLUMNS)
    rows = [[r["mode"], str(r["seed"]), r["config_hash"][:8]] + [_fmt(r[c]) for c in COLUMNS]
            for r in table["runs"]]
    lines = _align(head, rows)
    lines.append("")
    ghead = ["mode", "n", "hash"] + list(COLUMNS)
    grows = [[g["mode"], str(g["n"]), g["config_hash"][:8]]
             + [f"{_fmt(g[c]['mean'])} ± {_fmt(g[c]['std'], 2)}" if g[c]["mean"] is not None else "-"
                for c in COLUMNS]
             for g in table["groups"]]
    lines.extend(_align(ghead, grows))
    return "\n".join(lines)


def _align(head, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    return [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]

