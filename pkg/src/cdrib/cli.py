"""Command-line entry point: ``cdrib <command> [options]``.

Every command resolves its options as flags > ``--config`` file > built-in
defaults and writes a JSON run manifest before doing any work.  Exit codes:
0 success, 2 usage or configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import (
    MIN_ITEM_DEGREE,
    MIN_USER_DEGREE,
    DataError,
    SplitSpec,
    build_split,
    degree_filter,
    file_digest,
    ingest,
    load_scenario,
    save_scenario,
    synth_scenario,
    with_overlap_ratio,
)
from .evaluation import N_NEGATIVES, evaluate
from .model import ConfigError, load_checkpoint
from .training import DEFAULT_GRID, NumericError, TrainConfig, grid_report, grid_search, train

log = logging.getLogger("cdrib")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_ROOT_ENV = "CDRIB_RUN_ROOT"
MANIFEST = "manifest.json"

TRAIN_HELP = {
    "n_factors": "embedding width F per layer",
    "n_layers": "stacked encoder layers L, 1..4",
    "beta1": "KL weight on domain X latents, > 0",
    "beta2": "KL weight on domain Y latents, > 0",
    "dropout": "embedding dropout rate during training",
    "l2": "L2 weight on all parameters",
    "lr": "Adam learning rate",
    "batch_size": "training edges per domain per step",
    "epochs": "maximum training epochs",
    "patience": "epochs without validation gain before stopping",
    "seed": "seed for initialization, batching and sampling",
    "negatives_per_positive": "sampled negatives per training edge",
    "slope": "LeakyReLU negative slope",
    "contrastive": "include the overlap contrastive term",
    "in_domain": "include in-domain reconstruction and KL for non-overlapping users",
    "eval_negatives": "sampled negatives per validation record",
    "kl_scale": "KL reduction: dim (nodes and dims), node, edge",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- options


def _flag(name):
    return "--" + name.replace("_", "-")


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _add_option(p, name, default, helptext, choices=None):
    if isinstance(default, bool):
        p.add_argument(
            _flag(name),
            dest=name,
            action=argparse.BooleanOptionalAction,
            default=None,
            help=f"{helptext} (default: {'on' if default else 'off'})",
        )
    else:
        p.add_argument(
            _flag(name),
            dest=name,
            type=type(default),
            default=None,
            choices=choices,
            metavar=name.upper() if choices is None else None,
            help=f"{helptext} (default: {default})",
        )


def read_config(path) -> dict:
    """Plain ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(args, defaults: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    conf = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(conf) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for name, default in defaults.items():
        value = getattr(args, name, None)
        if value is None and name in conf:
            value = conf[name]
        if value is None:
            value = default
        elif default is not None:
            try:
                value = _bool(value) if isinstance(default, bool) else type(default)(value)
            except ValueError:
                raise UsageError(f"bad value for {name}: {value!r}") from None
        out[name] = value
    return out


def _train_defaults():
    return {f.name: f.default for f in fields(TrainConfig)}


def _add_train_options(p):
    g = p.add_argument_group("training")
    for f in fields(TrainConfig):
        choices = ("dim", "node", "edge") if f.name == "kl_scale" else None
        _add_option(g, f.name, f.default, TRAIN_HELP[f.name], choices)


def _grid_help():
    cells = "; ".join(f"{k}={','.join(map(str, v))}" for k, v in DEFAULT_GRID.items())
    return (
        "grid cells as key=v1,v2 (repeatable); with no values the full default "
        f"grid is searched: {cells}"
    )


def parse_grid(specs) -> dict:
    if not specs:
        return dict(DEFAULT_GRID)
    defaults = _train_defaults()
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"grid entry must be key=v1,v2: {spec!r}")
        k, vals = spec.split("=", 1)
        k = k.strip().replace("-", "_")
        if k not in defaults or k == "seed":
            raise UsageError(f"not a tunable training field: {k!r}")
        cast = type(defaults[k])
        try:
            grid[k] = tuple(_bool(v) if cast is bool else cast(v) for v in vals.split(","))
        except ValueError:
            raise UsageError(f"bad grid values for {k}: {vals!r}") from None
    return grid


# --------------------------------------------------------------- manifest


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        if not Path(p).exists():
            raise DataError(f"input not found: {p}")
        out[str(p)] = file_digest(p)
    return out


class RunManifest:
    """JSON record of a command: resolved options, input hashes and timing."""

    def __init__(self, command, config, inputs, path):
        self.data = {
            "command": command,
            "config": config,
            "inputs": inputs,
            "seed": config.get("seed"),
            "version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.path = Path(path)
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, status="ok", **extra):
        self.data.update(finished=_now(), status=status, **extra)
        self.write()


def _run_root():
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _default_run_dir(command, config):
    key = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:10]
    return _run_root() / f"{command}-{key}"


def _stats_block(meta) -> str:
    cols = ("users", "items", "train", "val", "test", "cold_start", "density")
    head = f"{'domain':<8}" + "".join(f"{c:>12}" for c in cols)
    lines = [head, "-" * len(head)]
    for d in ("x", "y"):
        cells = []
        for c in cols:
            v = meta.get(f"{c}_{d}", "")
            cells.append(f"{v:>12.6f}" if c == "density" else f"{v!s:>12}")
        lines.append(f"{d:<8}" + "".join(cells))
    lines.append(f"overlap (training): {meta.get('overlap', '')}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------- commands

PREPROCESS_DEFAULTS = {
    "domain_x": None,
    "domain_y": None,
    "out": None,
    "format": "tsv",
    "header": False,
    "min_item": MIN_ITEM_DEGREE,
    "min_user": MIN_USER_DEGREE,
    "cold_start_fraction": 0.2,
    "seed": 0,
}

SYNTH_DEFAULTS = {
    "out": None,
    "users": 500,
    "items": 300,
    "factors": 8,
    "noise": 0.0,
    "overlap_share": 0.5,
    "cold_start_fraction": 0.2,
    "seed": 0,
}

EVAL_DEFAULTS = {
    "scenario": None,
    "checkpoint": None,
    "out": None,
    "split": "test",
    "eval_seed": 0,
    "negatives": N_NEGATIVES,
    "slice": "none",
    "overlap_ratio": None,
}


def cmd_preprocess(args):
    cfg = resolve(args, PREPROCESS_DEFAULTS)
    for k in ("domain_x", "domain_y", "out"):
        if not cfg[k]:
            raise UsageError(f"{_flag(k)} is required")
    spec = SplitSpec(cfg["cold_start_fraction"], cfg["seed"])
    out = Path(cfg["out"])
    manifest = RunManifest(
        "preprocess", cfg, _hash_inputs([cfg["domain_x"], cfg["domain_y"]]), _sibling_manifest(out)
    )
    raw_x = ingest(cfg["domain_x"], cfg["format"], cfg["header"])
    raw_y = ingest(cfg["domain_y"], cfg["format"], cfg["header"])
    fx, fy, report = degree_filter(raw_x, raw_y, cfg["min_item"], cfg["min_user"])
    scenario = build_split(fx, fy, spec, extra_meta=report)
    save_scenario(scenario, out)
    sys.stdout.write(_stats_block(scenario.meta))
    manifest.finish(outputs={str(out): file_digest(out)})
    return EXIT_OK


def _sibling_manifest(out: Path) -> Path:
    # kept next to the scenario so the directory holds only scenario files
    return out.parent / f"{out.name}.manifest.json"


def cmd_synth(args):
    cfg = resolve(args, SYNTH_DEFAULTS)
    if not cfg["out"]:
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    spec = SplitSpec(cfg["cold_start_fraction"], cfg["seed"])
    manifest = RunManifest("synth", cfg, {}, _sibling_manifest(out))
    scenario = synth_scenario(
        cfg["users"], cfg["items"], cfg["factors"], cfg["noise"], cfg["seed"], cfg["overlap_share"], spec=spec
    )
    save_scenario(scenario, out)
    sys.stdout.write(_stats_block(scenario.meta))
    manifest.finish(outputs={str(out): file_digest(out)})
    return EXIT_OK


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)}).validate()


def cmd_train(args):
    defaults = {"scenario": None, "run_dir": None, **_train_defaults()}
    cfg = resolve(args, defaults)
    if args.grid is not None:
        return _grid(args, cfg)
    if not cfg["scenario"]:
        raise UsageError("--scenario is required")
    tcfg = _train_config(cfg)
    run_dir = Path(cfg["run_dir"]) if cfg["run_dir"] else _default_run_dir("train", cfg)
    cfg["run_dir"] = str(run_dir)
    manifest = RunManifest("train", cfg, _hash_inputs([cfg["scenario"]]), run_dir / MANIFEST)
    scenario = load_scenario(cfg["scenario"])
    try:
        res = train(scenario, tcfg, run_dir=run_dir)
    except NumericError:
        manifest.finish(status="numeric_error")
        raise
    print(f"best epoch {res.best_epoch}, validation MRR sum {res.best_val:.6f}")
    print(f"checkpoints in {run_dir}")
    manifest.finish(best_epoch=res.best_epoch, outputs=_digests(run_dir, ("best.ckpt", "last.ckpt")))
    return EXIT_OK


def cmd_gridsearch(args):
    defaults = {"scenario": None, "run_dir": None, **_train_defaults()}
    cfg = resolve(args, defaults)
    return _grid(args, cfg)


def _grid(args, cfg):
    if not cfg["scenario"]:
        raise UsageError("--scenario is required")
    grid = parse_grid(args.grid)
    base = _train_config(cfg)
    run_dir = Path(cfg["run_dir"]) if cfg["run_dir"] else _default_run_dir("grid", {**cfg, "grid": grid})
    cfg["run_dir"] = str(run_dir)
    manifest = RunManifest(
        "gridsearch",
        {**cfg, "grid": {k: list(v) for k, v in grid.items()}},
        _hash_inputs([cfg["scenario"]]),
        run_dir / MANIFEST,
    )
    scenario = load_scenario(cfg["scenario"])
    best, rows = grid_search(scenario, base, grid, run_dir)
    report = grid_report(rows, sorted(grid))
    (run_dir / "grid.tsv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    if best is None:
        manifest.finish(status="all_cells_failed")
        raise NumericError("every grid cell failed")
    manifest.finish(best={k: getattr(best, k) for k in grid}, outputs=_digests(run_dir, ("grid.tsv",)))
    return EXIT_OK


def _digests(run_dir, names):
    return {n: file_digest(Path(run_dir) / n) for n in names if (Path(run_dir) / n).exists()}


def cmd_evaluate(args):
    defaults = {**EVAL_DEFAULTS, **_train_defaults()}
    cfg = resolve(args, defaults)
    if args.overlap_ratio is not None:
        cfg["overlap_ratio"] = list(args.overlap_ratio)
    elif isinstance(cfg["overlap_ratio"], str):
        cfg["overlap_ratio"] = [float(v) for v in cfg["overlap_ratio"].split(",")]
    if not cfg["scenario"]:
        raise UsageError("--scenario is required")
    ratios = cfg["overlap_ratio"]
    if not ratios and not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required unless --overlap-ratio retrains")
    if cfg["slice"] not in ("none", "interactions"):
        raise UsageError("--slice must be 'none' or 'interactions'")
    tcfg = _train_config(cfg) if ratios else None

    out = Path(cfg["out"]) if cfg["out"] else _default_run_dir("eval", cfg)
    cfg["out"] = str(out)
    manifest = RunManifest(
        "evaluate", cfg, _hash_inputs([cfg["scenario"], cfg["checkpoint"]]), out / MANIFEST
    )
    scenario = load_scenario(cfg["scenario"])
    outputs = []
    if cfg["checkpoint"]:
        state = load_checkpoint(cfg["checkpoint"])
        expected = state.meta.get("scenario_digest")
        if expected and expected != scenario.digest and not ratios:
            manifest.finish(status="scenario_mismatch")
            raise DataError(
                f"checkpoint was trained on scenario {expected[:12]}, "
                f"but {cfg['scenario']} hashes to {scenario.digest[:12]}"
            )
        if not ratios:
            outputs += _write_report(scenario, state, cfg, out, "")[1]
    summary = []
    for r in ratios or ():
        sub = with_overlap_ratio(scenario, r, seed=tcfg.seed)
        res = train(sub, tcfg, run_dir=out / f"ratio-{r:g}")
        rep, written = _write_report(sub, res.state, cfg, out, f"ratio-{r:g}/")
        outputs += written
        summary.append((r, rep.directions))
    if summary:
        lines = ["overlap_ratio\tdirection\tmrr\thr@10"]
        for r, dirs in summary:
            lines += [f"{r!r}\t{d}\t{m['mrr']!r}\t{m['hr@10']!r}" for d, m in dirs.items()]
        text = "\n".join(lines) + "\n"
        (out / "overlap_ratio.tsv").write_text(text, encoding="utf-8")
        sys.stdout.write(text)
        outputs.append("overlap_ratio.tsv")
    manifest.finish(outputs=_digests(out, outputs))
    return EXIT_OK


def _write_report(scenario, state, cfg, out, prefix):
    rep = evaluate(
        scenario,
        state,
        cfg["split"],
        cfg["eval_seed"],
        slice_interactions=cfg["slice"] == "interactions",
        n_negatives=cfg["negatives"],
    )
    rep.check_invariants()
    target = out / prefix
    target.mkdir(parents=True, exist_ok=True)
    (target / "report.txt").write_text(rep.to_table(), encoding="utf-8")
    (target / "report.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    (target / "ranks.tsv").write_text(rep.ranks_tsv(), encoding="utf-8")
    if rep.failures:
        log.warning("%d records could not be ranked", len(rep.failures))
    sys.stdout.write((prefix and f"[{prefix.rstrip('/')}]\n") + rep.to_table())
    return rep, [f"{prefix}report.txt", f"{prefix}report.tsv", f"{prefix}ranks.tsv"]


def cmd_replay(args):
    """Re-run a manifest's command with its resolved options."""
    try:
        man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {args.manifest}: {exc}") from None
    for path, digest in man.get("inputs", {}).items():
        if not Path(path).exists() or file_digest(path) != digest:
            raise DataError(f"input {path} changed since the manifest was written")
    cfg = dict(man["config"])
    command = man["command"]
    out_key = {"preprocess": "out", "synth": "out", "evaluate": "out"}.get(command, "run_dir")
    if args.out:
        cfg[out_key] = args.out
    argv = [command]
    grid = cfg.pop("grid", None)
    if command == "gridsearch":
        argv = ["gridsearch", "--grid", *[f"{k}={','.join(map(str, v))}" for k, v in grid.items()]]
    for k, v in cfg.items():
        if v is None:
            continue
        if isinstance(v, bool):
            argv.append(_flag(k) if v else "--no-" + k.replace("_", "-"))
        elif isinstance(v, list):
            argv += [_flag(k), *map(str, v)]
        else:
            argv += [_flag(k), str(v)]
    log.info("replaying: cdrib %s", " ".join(argv))
    return main(argv)


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cdrib",
        description="Cross-domain cold-start recommendation with variational graph encoders.",
        epilog=f"Run directories default to ${RUN_ROOT_ENV} (or ./runs).",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="key=value file; flags override it")

    sp = sub.add_parser("preprocess", help="filter and split two interaction logs")
    add_config(sp)
    sp.add_argument("--domain-x", dest="domain_x", help="interactions of domain X")
    sp.add_argument("--domain-y", dest="domain_y", help="interactions of domain Y")
    sp.add_argument("--out", help="scenario directory to write")
    sp.add_argument("--format", choices=("tsv", "amazon_json"), default=None, help="input format (default: tsv)")
    _add_option(sp, "header", False, "skip the first TSV line")
    _add_option(sp, "min_item", MIN_ITEM_DEGREE, "drop items with fewer interactions")
    _add_option(sp, "min_user", MIN_USER_DEGREE, "drop users with fewer interactions")
    _add_option(sp, "cold_start_fraction", 0.2, "share of overlapping users held out as cold-start")
    _add_option(sp, "seed", 0, "split seed")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("synth", help="write a planted synthetic scenario")
    add_config(sp)
    sp.add_argument("--out", help="scenario directory to write")
    _add_option(sp, "users", 500, "users before filtering")
    _add_option(sp, "items", 300, "items per domain before filtering")
    _add_option(sp, "factors", 8, "shared latent factors")
    _add_option(sp, "noise", 0.0, "scale of the private block and score noise")
    _add_option(sp, "overlap_share", 0.5, "share of users active in both domains")
    _add_option(sp, "cold_start_fraction", 0.2, "share of overlapping users held out as cold-start")
    _add_option(sp, "seed", 0, "generator and split seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a scenario directory")
    add_config(sp)
    sp.add_argument("--scenario", help="scenario directory")
    sp.add_argument("--run-dir", dest="run_dir", help=f"output directory (default: under ${RUN_ROOT_ENV})")
    sp.add_argument("--grid", nargs="*", default=None, metavar="KEY=V1,V2", help=_grid_help())
    _add_train_options(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gridsearch", help="train every grid cell, keep the best by validation MRR")
    add_config(sp)
    sp.add_argument("--scenario", help="scenario directory")
    sp.add_argument("--run-dir", dest="run_dir", help=f"output directory (default: under ${RUN_ROOT_ENV})")
    sp.add_argument("--grid", nargs="*", default=[], metavar="KEY=V1,V2", help=_grid_help())
    _add_train_options(sp)
    sp.set_defaults(func=cmd_gridsearch)

    sp = sub.add_parser("evaluate", help="rank held-out records of a split")
    add_config(sp)
    sp.add_argument("--scenario", help="scenario directory")
    sp.add_argument("--checkpoint", help="checkpoint file from train")
    sp.add_argument("--out", help=f"report directory (default: under ${RUN_ROOT_ENV})")
    sp.add_argument("--split", choices=("val", "test"), default=None, help="records to rank (default: test)")
    _add_option(sp, "eval_seed", 0, "seed for negative sampling")
    _add_option(sp, "negatives", N_NEGATIVES, "sampled negatives per record")
    sp.add_argument(
        "--slice",
        choices=("none", "interactions"),
        default=None,
        help="add per-bucket rows by source interaction count 5-10 ... 41-50 (default: none)",
    )
    sp.add_argument(
        "--overlap-ratio",
        dest="overlap_ratio",
        type=float,
        nargs="+",
        default=None,
        metavar="R",
        help="keep this share of training overlap links, retrain with the training options and evaluate; "
        "repeat values for a sweep such as 0.2 0.4 0.6 0.8 1.0",
    )
    _add_train_options(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest", help="manifest JSON written by an earlier command")
    sp.add_argument("--out", help="write outputs here instead of the recorded location")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cdrib {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cdrib {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"cdrib {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
