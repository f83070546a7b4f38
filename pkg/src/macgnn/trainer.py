"""Data preparation, Adam training, evaluation and parameter sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DataError, NumericError
from .features import ExampleSet, GraphContext
from .grouping import Grouping, group_by_category, group_side
from .macro_graph import MacroNodeRegistry, build_registry
from .metrics import auc, gauc, logloss, per_user_auc
from .micro_graph import ITEM, USER, InteractionLog, build_micro_graph
from .model import ModelConfig, ModelParams, backward, bce_loss, forward, is_table, l2_penalty, touched_rows

log = logging.getLogger(__name__)

LR_GRID = (1e-2, 5e-3, 1e-3)
L2_GRID = (1e-4, 5e-5, 1e-5)
TAU_GRID = tuple(round(0.1 + 0.2 * k, 1) for k in range(10))
K_GRID = (5, 10, 20, 40, 80)
BATCH_SIZE = 1024


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2: float = 1e-5
    batch_size: int = BATCH_SIZE
    tau: float = 1.0
    epochs: int = 10
    seed: int = 0
    k_user: int = 20
    k_item: int = 20
    item_categories: str | None = None
    recent_len: int = 20
    dim: int = 10
    attn_dim: int = 10
    hidden: tuple = (200, 80)
    activation: str = "relu"
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    group_max_iter: int = 100
    group_tol: float = 1e-6
    group_n_init: int = 10
    threads: int = 1
    off_grid: bool = False
    no_weighting: bool = False
    no_recent: bool = False
    no_highorder: bool = False
    no_itemgraph: bool = False
    no_graph: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if not self.off_grid:
            if not any(math.isclose(self.lr, g) for g in LR_GRID):
                raise ValueError(f"lr={self.lr} is off the grid {LR_GRID}; set off_grid=true to override")
            if not any(math.isclose(self.l2, g) for g in L2_GRID):
                raise ValueError(f"l2={self.l2} is off the grid {L2_GRID}; set off_grid=true to override")
            if self.batch_size != BATCH_SIZE:
                raise ValueError(f"batch_size={self.batch_size} differs from {BATCH_SIZE}; set off_grid=true to override")
        if self.lr < 0 or self.l2 < 0 or self.tau <= 0:
            raise ValueError("lr and l2 must be >= 0 and tau > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.recent_len < 1:
            raise ValueError("batch_size >= 1, epochs >= 0 and recent_len >= 1 required")
        if not 0 < self.train_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("train_fraction must be in (0,1) and val_fraction in [0,1)")

    def model_config(self, n_users: int, n_items: int, n_macros: int) -> ModelConfig:
        return ModelConfig(
            n_users=n_users,
            n_items=n_items,
            n_macros=n_macros,
            dim=self.dim,
            attn_dim=self.attn_dim,
            hidden=self.hidden,
            tau=self.tau,
            l2=self.l2,
            activation=self.activation,
            no_weighting=self.no_weighting,
            no_recent=self.no_recent,
            no_highorder=self.no_highorder,
            no_itemgraph=self.no_itemgraph,
            no_graph=self.no_graph,
        )

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def _coerce(name: str, text: str):
    ftype = {f.name: f.default for f in fields(TrainConfig)}[name]
    text = text.strip()
    if name == "hidden":
        return tuple(int(v) for v in text.split(",") if v.strip())
    if name == "item_categories":
        return text or None
    if isinstance(ftype, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(ftype, int):
        return int(text)
    if isinstance(ftype, float):
        return float(text)
    return text


def parse_config(lines, overrides: dict | None = None) -> TrainConfig:
    """Flat ``key=value`` text; ``#`` starts a comment. ``overrides`` win over the file."""
    values = {}
    names = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"config line {lineno}: expected key=value")
        if key not in names:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in names:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return TrainConfig.from_dict(values)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Xavier-uniform weights and embedding tables, zero biases."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in config.shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def chronological_split(log_: InteractionLog, train_fraction: float | None = None, cutoff: int | None = None):
    """Split by time (stable on ties); returns ``(train, test)`` in chronological order."""
    if (train_fraction is None) == (cutoff is None):
        raise ValueError("give exactly one of train_fraction or cutoff")
    order = np.lexsort((np.arange(len(log_)), log_.timestamps))
    if cutoff is not None:
        n_train = int(np.searchsorted(log_.timestamps[order], cutoff, side="left"))
    else:
        n_train = int(math.floor(train_fraction * len(log_) + 1e-9))
    if n_train == 0 or n_train == len(log_):
        raise DataError(f"degenerate split: {n_train} train / {len(log_) - n_train} test records")
    return log_.subset(order[:n_train]), log_.subset(order[n_train:])


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EvalReport:
    auc: float | None
    gauc: float | None
    logloss: float
    count: int
    positives: int
    per_user: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "auc": self.auc,
            "gauc": self.gauc,
            "logloss": self.logloss,
            "count": self.count,
            "positives": self.positives,
            "users_evaluated": len(self.per_user),
        }


def score(params: ModelParams, config: ModelConfig, examples: ExampleSet, batch_size: int = 4096) -> np.ndarray:
    out = [forward(params, b, config).y_hat for b in examples.batches(batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(params: ModelParams, config: ModelConfig, examples: ExampleSet, batch_size: int = 4096) -> EvalReport:
    p = score(params, config, examples, batch_size)
    y = examples.labels
    return EvalReport(
        auc(p, y),
        gauc(p, y, examples.users),
        logloss(p, y),
        len(y),
        int(np.sum(y == 1)),
        per_user_auc(p, y, examples.users),
    )


@dataclass
class PreparedData:
    log: InteractionLog
    train_window: InteractionLog
    fit: InteractionLog
    val: InteractionLog | None
    test: InteractionLog
    user_grouping: Grouping
    item_grouping: Grouping
    registry: MacroNodeRegistry
    fit_context: GraphContext
    test_context: GraphContext
    train_set: ExampleSet
    val_set: ExampleSet | None
    test_set: ExampleSet

    @property
    def test_cutoff(self) -> int:
        return int(self.test.timestamps.min())


def make_groupings(window: InteractionLog, cfg: TrainConfig, categories: dict | None = None) -> tuple[Grouping, Grouping]:
    graph = build_micro_graph(window)
    kw = dict(max_iter=cfg.group_max_iter, tol=cfg.group_tol, n_init=cfg.group_n_init)
    ug = group_side(graph, USER, cfg.k_user, seed=cfg.seed, **kw)
    if categories is not None:
        ig = group_by_category(graph, categories, ITEM)
    else:
        ig = group_side(graph, ITEM, cfg.k_item, seed=cfg.seed + 1, **kw)
    return ug, ig


def prepare(
    log_: InteractionLog,
    cfg: TrainConfig,
    categories: dict | None = None,
    groupings: tuple[Grouping, Grouping] | None = None,
) -> PreparedData:
    """Chronological train/validation/test split plus the graph structures for each.

    Groupings come from the whole training window. Each training record sees
    only edges and recents from strictly before its own timestamp; validation
    examples are scored against the fit-period graph and test examples
    against the full training-window graph, with recents stopping at the
    respective cutoff.
    """
    train_window, test = chronological_split(log_, cfg.train_fraction)
    if cfg.val_fraction > 0:
        fit_log, val = chronological_split(train_window, 1.0 - cfg.val_fraction)
    else:
        fit_log, val = train_window, None
    if groupings is None:
        groupings = make_groupings(train_window, cfg, categories)
    ug, ig = groupings
    registry = build_registry(ug, ig)
    fit_context = GraphContext(fit_log, registry, cfg.recent_len)
    test_context = GraphContext(train_window, registry, cfg.recent_len)
    train_set = fit_context.examples_from_log(fit_log)
    val_set = fit_context.examples_from_log(val, cutoff=int(val.timestamps.min())) if val is not None else None
    test_set = test_context.examples_from_log(test, cutoff=int(test.timestamps.min()))
    return PreparedData(log_, train_window, fit_log, val, test, ug, ig, registry, fit_context, test_context, train_set, val_set, test_set)


@dataclass
class FitResult:
    params: ModelParams
    config: ModelConfig
    curve: list
    best_epoch: int
    train_losses: list


def _check_finite(value: float, epoch: int, batch_no: int, batch) -> None:
    if not np.isfinite(value):
        users = batch.users[:5].tolist()
        raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_no} (first users {users})")


def fit(cfg: TrainConfig, data: PreparedData, params: ModelParams | None = None) -> FitResult:
    """Adam over shuffled mini-batches; keeps the epoch with the best validation AUC."""
    mcfg = cfg.model_config(data.log.n, data.log.m, data.registry.table_size)
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    if params is None:
        params = init_params(mcfg, int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seed)
    opt = Adam(params, cfg.lr)
    curve, losses = [], []
    best_epoch, best_auc, best_params = 0, -np.inf, params.copy()
    with threadpool_limits(cfg.threads):
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(data.train_set))
            total, seen = 0.0, 0
            for batch_no, batch in enumerate(data.train_set.batches(cfg.batch_size, order)):
                trace = forward(params, batch, mcfg)
                value = bce_loss(trace.y_hat, batch.labels)
                if mcfg.l2:
                    value += mcfg.l2 * l2_penalty(params, touched_rows(batch, mcfg))
                _check_finite(value, epoch, batch_no, batch)
                grads = backward(trace, params, mcfg)
                opt.step(params, grads)
                total += value * len(batch)
                seen += len(batch)
            losses.append(total / max(seen, 1))
            for split, examples in (("train", data.train_set), ("val", data.val_set), ("test", data.test_set)):
                if examples is None:
                    continue
                rep = evaluate(params, mcfg, examples)
                curve.append({"epoch": epoch, "split": split, "auc": rep.auc, "gauc": rep.gauc, "logloss": rep.logloss})
                if split == "val":
                    val_auc = rep.auc if rep.auc is not None else -np.inf
            if data.val_set is None:
                val_auc = -losses[-1]
            log.info("epoch %d loss %.5f val %.4f", epoch, losses[-1], val_auc)
            if val_auc > best_auc or best_epoch == 0:
                best_epoch, best_auc, best_params = epoch, val_auc, params.copy()
    if cfg.epochs == 0:
        best_params = params
    return FitResult(best_params, mcfg, curve, best_epoch, losses)


def run_sweep(
    cfg: TrainConfig,
    log_: InteractionLog,
    grid: str,
    values=None,
    categories: dict | None = None,
) -> list[dict]:
    """One fit + test evaluation per grid value of ``tau`` or ``k`` (macro user count)."""
    if grid not in ("tau", "k"):
        raise ValueError("grid must be 'tau' or 'k'")
    values = list(values if values is not None else (TAU_GRID if grid == "tau" else K_GRID))
    if not values:
        raise ValueError("empty sweep grid")
    rows = []
    shared = None
    for value in values:
        row = {"param": grid, "value": value, "auc": None, "gauc": None, "logloss": None, "error": ""}
        try:
            if grid == "tau":
                run_cfg = cfg.replace(tau=float(value))
                if shared is None:
                    shared = make_groupings(chronological_split(log_, cfg.train_fraction)[0], cfg, categories)
                data = prepare(log_, run_cfg, categories, shared)
            else:
                run_cfg = cfg.replace(k_user=int(value))
                data = prepare(log_, run_cfg, categories)
            result = fit(run_cfg, data)
            rep = evaluate(result.params, result.config, data.test_set)
            row.update(auc=rep.auc, gauc=rep.gauc, logloss=rep.logloss)
        except (DataError, NumericError, ValueError) as exc:
            row["error"] = str(exc)
            log.warning("sweep %s=%s failed: %s", grid, value, exc)
        rows.append(row)
    return rows


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def embedding_tables(params: ModelParams) -> list[str]:
    return [k for k in params if is_table(k)]
