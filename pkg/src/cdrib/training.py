"""Mini-batch optimization with Adam, early stopping and grid search."""

from __future__ import annotations

import itertools
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import ProcessedScenario
from .evaluation import evaluate
from .model import ConfigError, Hyper, ModelState, init_state, save_checkpoint
from .objectives import Batch, LossBreakdown, LossSwitches, total_loss

log = logging.getLogger(__name__)

# value grids searched for each hyperparameter
DEFAULT_GRID = {
    "beta1": (0.5, 1.0, 1.5, 2.0),
    "beta2": (0.5, 1.0, 1.5, 2.0),
    "dropout": (0.1, 0.2, 0.3, 0.4),
    "l2": (0.001, 0.0005, 0.0001),
    "lr": (0.01, 0.005, 0.001),
    "n_layers": (1, 2, 3, 4),
}


class NumericError(RuntimeError):
    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``epochs`` and ``patience`` defaults are our own choice; no published
    schedule exists.  With ``kl_scale="dim"`` each KL term is averaged over
    nodes and latent dimensions, so beta acts on a size independent scale.
    """

    n_factors: int = 128
    n_layers: int = 1
    beta1: float = 1.0
    beta2: float = 1.0
    dropout: float = 0.3
    l2: float = 0.0005
    lr: float = 0.005
    batch_size: int = 1024
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    negatives_per_positive: int = 1
    slope: float = 0.1
    contrastive: bool = True
    in_domain: bool = True
    eval_negatives: int = 999
    kl_scale: str = "dim"

    def validate(self):
        self.hyper().validate()
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        return self

    def hyper(self) -> Hyper:
        return Hyper(
            self.n_factors, self.n_layers, self.beta1, self.beta2, self.dropout, self.l2, self.slope
        )

    def switches(self) -> LossSwitches:
        return LossSwitches(self.contrastive, self.in_domain, self.negatives_per_positive, self.kl_scale)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ------------------------------------------------------------------ batches


def _chunks(edges, batch_size, rng):
    order = rng.permutation(len(edges))
    return [edges[order[k : k + batch_size]] for k in range(0, len(edges), batch_size)]


def make_batches(pair, batch_size, rng):
    """One epoch of batches; every training edge of each domain appears once.

    Domains are shuffled independently and paired up chunk by chunk; once the
    smaller domain is exhausted its side of the batch is empty.
    """
    ex, ey = pair.graph_x.edges, pair.graph_y.edges
    if len(ex) == 0 or len(ey) == 0:
        raise ValueError("both graphs need training edges")
    if batch_size > max(len(ex), len(ey)):
        log.warning("batch_size %d exceeds edge count; using one full batch", batch_size)
    cx, cy = _chunks(ex, batch_size, rng), _chunks(ey, batch_size, rng)
    empty = np.zeros((0, 2), dtype=np.int64)
    for bx, by in itertools.zip_longest(cx, cy, fillvalue=empty):
        yield Batch(bx, by)


# --------------------------------------------------------------------- adam


class Adam:
    """Adam with bias correction over every parameter of a tape."""

    def __init__(self, tape: nx.ParamTape, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        self.tape = tape
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in tape.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tape.items()}
        self.t = 0

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, param in self.tape.items():
            g = self.tape.grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            param.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam):
    optimizer.step()


# -------------------------------------------------------------------- train


@dataclass
class EpochLog:
    epoch: int
    loss: LossBreakdown
    val_mrr: dict
    wall: float

    def to_line(self) -> str:
        extra = {"epoch": self.epoch}
        extra.update({f"val_mrr[{k}]": v for k, v in self.val_mrr.items()})
        return self.loss.to_line(**extra) + f" wall={self.wall:.3f}"


@dataclass
class TrainResult:
    state: ModelState
    last: ModelState
    log: list
    best_epoch: int
    best_val: float
    warnings: Counter


def _mean_breakdown(items):
    if not items:
        return LossBreakdown()
    keys = asdict(items[0]).keys()
    return LossBreakdown(**{k: float(np.mean([getattr(b, k) for b in items])) for k in keys})


def train(scenario: ProcessedScenario, cfg: TrainConfig, run_dir=None, on_epoch=None) -> TrainResult:
    """Optimize the full objective; keeps the state with best validation MRR.

    Validation MRR is summed over both transfer directions.  ``run_dir``
    receives ``best.ckpt``, ``last.ckpt`` and ``train.log`` when given.
    """
    cfg.validate()
    pair = scenario.pair
    rng = np.random.default_rng(cfg.seed)
    state = init_state(pair, cfg.hyper(), seed=int(rng.integers(0, 2**31 - 1)))
    state.meta = {"train_config": asdict(cfg), "scenario_digest": scenario.digest}
    opt = Adam(state.tape, lr=cfg.lr)
    switches = cfg.switches()
    warnings: Counter = Counter()

    best, best_val, best_epoch = state.copy(), -math.inf, 0
    history = []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        parts = []
        for batch in make_batches(pair, cfg.batch_size, rng):
            state.tape.reset()
            loss, breakdown = total_loss(pair, state, batch, rng, "train", switches, warnings)
            if not breakdown.is_finite():
                raise NumericError(f"non-finite loss at epoch {epoch}: {breakdown.to_line()}", breakdown)
            nx.backward(loss, state.tape)
            opt.step()
            parts.append(breakdown)
        report = evaluate(scenario, state, "val", seed=cfg.seed, n_negatives=cfg.eval_negatives)
        val = {k: m["mrr"] for k, m in report.directions.items()}
        entry = EpochLog(epoch, _mean_breakdown(parts), val, time.perf_counter() - t0)
        history.append(entry)
        log.info(entry.to_line())
        if on_epoch:
            on_epoch(entry)
        score = report.mrr_sum()
        if score > best_val:
            best, best_val, best_epoch, stale = state.copy(), score, epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        best.meta = dict(best.meta, best_epoch=best_epoch)
        save_checkpoint(best, run_dir / "best.ckpt")
        save_checkpoint(state, run_dir / "last.ckpt")
        (run_dir / "train.log").write_text("".join(e.to_line() + "\n" for e in history))
    if warnings:
        log.warning("training warnings: %s", dict(warnings))
    return TrainResult(best, state, history, best_epoch, best_val, warnings)


# -------------------------------------------------------------- grid search


def expand_grid(grid: dict) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(scenario, base: TrainConfig, grid: dict, run_dir=None):
    """Train every combination; rank cells by summed validation MRR.

    Returns ``(best_config, rows)`` where each row is a dict with the cell's
    overrides, its score and an ``error`` entry for failed cells.
    """
    cells = expand_grid(grid)
    if not cells:
        raise ValueError("empty grid")
    rows = []
    for k, overrides in enumerate(cells):
        cfg = replace(base, **overrides)
        row = {"cell": k, **overrides, "val_mrr_sum": math.nan, "best_epoch": 0, "error": ""}
        try:
            sub = Path(run_dir) / f"cell{k:03d}" if run_dir is not None else None
            res = train(scenario, cfg, run_dir=sub)
            row.update(val_mrr_sum=res.best_val, best_epoch=res.best_epoch)
        except (NumericError, ConfigError) as exc:
            row["error"] = str(exc).splitlines()[0]
        rows.append(row)
    scored = [r for r in rows if not r["error"] and not math.isnan(r["val_mrr_sum"])]
    best_row = max(scored, key=lambda r: r["val_mrr_sum"]) if scored else None
    for r in rows:
        r["best"] = r is best_row
    best_cfg = replace(base, **{k: best_row[k] for k in grid}) if best_row else None
    return best_cfg, rows


def grid_report(rows, keys) -> str:
    head = ["cell", *keys, "val_mrr_sum", "best_epoch", "best", "error"]
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join(_cell(r[h]) for h in head))
    return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, bool):
        return "*" if v else ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
