"""Interaction ingest, degree filtering, cold-start splits and synthetic scenarios."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import BipartiteGraph, DomainPair

MIN_ITEM_DEGREE = 10
MIN_USER_DEGREE = 5
SCENARIO_FILES = ("meta", "edges_x", "edges_y", "overlap", "val", "test", "ids")
BUCKETS = ((5, 10), (11, 20), (21, 30), (31, 40), (41, 50))


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ ingest


def ingest(path, fmt="tsv", header=False):
    """Read deduplicated ``(user, item)`` raw-id pairs in first-seen order.

    ``tsv`` lines are ``user<TAB>item[<TAB>ignored...]``; ``amazon_json`` is
    one review object per line with ``reviewerID`` and ``asin``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    pairs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1 and fmt == "tsv":
                continue
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if fmt == "tsv":
                cols = line.split("\t")
                if len(cols) < 2 or not cols[0] or not cols[1]:
                    raise DataError(f"{path}:{lineno}: expected user<TAB>item, got {line!r}")
                pair = (cols[0], cols[1])
            elif fmt == "amazon_json":
                try:
                    rec = json.loads(line)
                    pair = (str(rec["reviewerID"]), str(rec["asin"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad review record ({exc})") from None
            else:
                raise DataError(f"unknown input format {fmt!r}")
            if any(c in s for s in pair for c in "\t\n"):
                raise DataError(f"{path}:{lineno}: ids may not contain tabs or newlines")
            if pair not in seen:
                seen.add(pair)
                pairs.append(pair)
    if not pairs:
        raise DataError(f"{path}: no interactions")
    return pairs


# --------------------------------------------------------------- filtering


def _filter_domain(pairs, min_item, min_user):
    pairs = list(pairs)
    rounds = 0
    while True:
        rounds += 1
        item_deg, user_deg = {}, {}
        for u, i in pairs:
            item_deg[i] = item_deg.get(i, 0) + 1
            user_deg[u] = user_deg.get(u, 0) + 1
        kept = [(u, i) for u, i in pairs if item_deg[i] >= min_item and user_deg[u] >= min_user]
        if len(kept) == len(pairs):
            return kept, rounds
        pairs = kept


def degree_filter(raw_x, raw_y, min_item=MIN_ITEM_DEGREE, min_user=MIN_USER_DEGREE):
    """Drop low-degree items and users per domain, repeating until stable.

    Returns ``(filtered_x, filtered_y, report)``.
    """
    fx, rx = _filter_domain(raw_x, min_item, min_user)
    fy, ry = _filter_domain(raw_y, min_item, min_user)
    if not fx or not fy:
        raise DataError("scenario empty after filtering")
    report = {
        "removed_x": len(raw_x) - len(fx),
        "removed_y": len(raw_y) - len(fy),
        "rounds_x": rx,
        "rounds_y": ry,
    }
    return fx, fy, report


# ------------------------------------------------------------------- split


@dataclass(frozen=True)
class SplitSpec:
    cold_start_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cold_start_fraction <= 0.5:
            raise DataError("cold_start_fraction must lie in (0, 0.5]")


@dataclass
class ProcessedScenario:
    pair: DomainPair
    id_maps: dict
    val: list  # (source_domain, user_index_in_source, item_index_in_target)
    test: list
    meta: dict = field(default_factory=dict)
    planted: dict | None = field(default=None, repr=False, compare=False)

    def records(self, split):
        if split not in ("val", "test"):
            raise ValueError(f"split must be 'val' or 'test', got {split!r}")
        return self.val if split == "val" else self.test

    def held_out_items(self):
        """``(source, user) -> set of target items`` over both splits."""
        out = {}
        for src, u, i in (*self.val, *self.test):
            out.setdefault((src, u), set()).add(i)
        return out

    @property
    def digest(self) -> str:
        return scenario_digest(self)


def _index(values):
    ordered = sorted(values)
    return ordered, {v: k for k, v in enumerate(ordered)}


def build_split(filtered_x, filtered_y, spec=SplitSpec(), extra_meta=None):
    """Hold out target-domain interactions of a random slice of overlapping users.

    Half the selected users become cold-start toward Y (their Y edges leave
    training) and half toward X.  Within each direction users are divided
    between validation and test, so a user's records never straddle both.
    """
    users_x = {u for u, _ in filtered_x}
    users_y = {u for u, _ in filtered_y}
    overlap = sorted(users_x & users_y)
    if len(overlap) < 4:
        raise DataError(f"insufficient overlap: {len(overlap)} shared users (need >= 4)")

    rng = np.random.default_rng(spec.seed)
    n_cold = math.ceil(spec.cold_start_fraction * len(overlap))
    chosen = [overlap[k] for k in rng.permutation(len(overlap))[:n_cold]]
    n_to_y = (n_cold + 1) // 2
    cold_to_y, cold_to_x = chosen[:n_to_y], chosen[n_to_y:]
    set_to_y, set_to_x = set(cold_to_y), set(cold_to_x)

    train_x = [(u, i) for u, i in filtered_x if u not in set_to_x]
    train_y = [(u, i) for u, i in filtered_y if u not in set_to_y]
    ux, ux_idx = _index({u for u, _ in train_x})
    vx, vx_idx = _index({i for _, i in train_x})
    uy, uy_idx = _index({u for u, _ in train_y})
    vy, vy_idx = _index({i for _, i in train_y})

    gx = BipartiteGraph(len(ux), len(vx), [(ux_idx[u], vx_idx[i]) for u, i in train_x])
    gy = BipartiteGraph(len(uy), len(vy), [(uy_idx[u], vy_idx[i]) for u, i in train_y])
    shared = sorted(set(ux) & set(uy))
    pair = DomainPair(gx, gy, [(ux_idx[u], uy_idx[u]) for u in shared])

    by_user_x, by_user_y = {}, {}
    for u, i in filtered_x:
        by_user_x.setdefault(u, []).append(i)
    for u, i in filtered_y:
        by_user_y.setdefault(u, []).append(i)

    val, test, dropped = [], [], 0
    for source, users, src_idx, held, tgt_idx in (
        ("x", cold_to_y, ux_idx, by_user_y, vy_idx),
        ("y", cold_to_x, uy_idx, by_user_x, vx_idx),
    ):
        n_val = len(users) // 2
        for k, u in enumerate(users):
            bucket = val if k < n_val else test
            for item in sorted(held[u]):
                if item not in tgt_idx:
                    dropped += 1
                    continue
                bucket.append((source, src_idx[u], tgt_idx[item]))
    val.sort()
    test.sort()

    id_maps = {"x": {"user": ux, "item": vx}, "y": {"user": uy, "item": vy}}
    scenario = ProcessedScenario(pair, id_maps, val, test)
    scenario.meta = {
        "seed": spec.seed,
        "cold_start_fraction": spec.cold_start_fraction,
        "observed_overlap": len(overlap),
        "cold_start_to_y": len(cold_to_y),
        "cold_start_to_x": len(cold_to_x),
        "dropped_records": dropped,
        **(extra_meta or {}),
    }
    scenario.meta.update(count_stats(scenario))
    return scenario


def count_stats(scenario: ProcessedScenario) -> dict:
    """Per-domain counts laid out like the usual scenario statistics table."""
    pair = scenario.pair
    out = {"overlap": len(pair.overlap)}
    for d, g in (("x", pair.graph_x), ("y", pair.graph_y)):
        target_val = [r for r in scenario.val if r[0] != d]
        target_test = [r for r in scenario.test if r[0] != d]
        cold = {(r[0], r[1]) for r in (*target_val, *target_test)}
        out[f"users_{d}"] = g.n_users
        out[f"items_{d}"] = g.n_items
        out[f"train_{d}"] = g.n_edges
        out[f"val_{d}"] = len(target_val)
        out[f"test_{d}"] = len(target_test)
        out[f"cold_start_{d}"] = len(cold)
        out[f"density_{d}"] = g.n_edges / max(1, g.n_users * g.n_items)
    return out


def audit_scenario(scenario: ProcessedScenario, filtered=None) -> list[str]:
    """Exhaustive split check; returns human-readable violations (empty if clean).

    ``filtered`` is the optional ``(filtered_x, filtered_y)`` pre-split pair
    lists, against which the item and user degree floors are checked.
    """
    pair = scenario.pair
    bad = []
    to_target = {"x": {}, "y": {}}
    for ux, uy in pair.overlap.tolist():
        to_target["x"][ux] = uy
        to_target["y"][uy] = ux
    overlap_users = {"x": set(pair.overlap[:, 0].tolist()), "y": set(pair.overlap[:, 1].tolist())}
    train_users = {d: set(scenario.id_maps[d]["user"]) for d in ("x", "y")}
    split_users = {}
    for split in ("val", "test"):
        for src, u, i in scenario.records(split):
            tgt = "y" if src == "x" else "x"
            gs, gt = pair.graph(src), pair.graph(tgt)
            if not (0 <= u < gs.n_users and 0 <= i < gt.n_items):
                bad.append(f"{split}: record {(src, u, i)} out of range")
                continue
            split_users.setdefault((src, u), set()).add(split)
            if u in overlap_users[src]:
                bad.append(f"{split}: cold-start user {src}:{u} is linked by overlap")
            raw = scenario.id_maps[src]["user"][u]
            if raw in train_users[tgt]:
                bad.append(f"{split}: cold-start user {raw!r} has {tgt} training edges")
            if gs.user_degree[u] < MIN_USER_DEGREE:
                bad.append(f"{split}: user {src}:{u} has {gs.user_degree[u]} source interactions")
            tu = to_target[src].get(u)
            if tu is not None and i in gt.user_item_sets[tu]:
                bad.append(f"{split}: held-out edge {(src, u, i)} is a training edge")
    for key, splits in split_users.items():
        if len(splits) > 1:
            bad.append(f"user {key} appears in both val and test")
    for d in ("x", "y"):
        g = pair.graph(d)
        for side, n in (("user", g.n_users), ("item", g.n_items)):
            ids = scenario.id_maps[d][side]
            if len(ids) != n or len(set(ids)) != n:
                bad.append(f"id map {d}.{side} is not a bijection onto {n} indices")
        if g.n_users and g.user_degree.min() < MIN_USER_DEGREE:
            bad.append(f"training graph {d} has a user below the degree floor")
    if filtered is not None:
        for d, pairs in zip(("x", "y"), filtered):
            items, users = {}, {}
            for u, i in pairs:
                items[i] = items.get(i, 0) + 1
                users[u] = users.get(u, 0) + 1
            if items and min(items.values()) < MIN_ITEM_DEGREE:
                bad.append(f"filtered {d} has an item below the degree floor")
            if users and min(users.values()) < MIN_USER_DEGREE:
                bad.append(f"filtered {d} has a user below the degree floor")
    stats = count_stats(scenario)
    for k, v in stats.items():
        if k in scenario.meta and scenario.meta[k] != v:
            bad.append(f"meta {k}={scenario.meta[k]} but recount gives {v}")
    return bad


def with_overlap_ratio(scenario: ProcessedScenario, ratio: float, seed=0) -> ProcessedScenario:
    """Keep only a ``ratio`` share of the training overlap links.

    Unlinked users keep their edges in both graphs but are treated as
    distinct non-overlapping users.
    """
    if not 0.0 < ratio <= 1.0:
        raise DataError("overlap ratio must lie in (0, 1]")
    overlap = scenario.pair.overlap
    keep = math.ceil(ratio * len(overlap))
    order = np.sort(np.random.default_rng(seed).permutation(len(overlap))[:keep])
    pair = DomainPair(scenario.pair.graph_x, scenario.pair.graph_y, overlap[order])
    new = replace(scenario, pair=pair, meta=dict(scenario.meta, overlap_ratio=ratio))
    new.meta.update(count_stats(new))
    return new


# --------------------------------------------------------------- synthetic


def synth_scenario(
    n_users=500,
    n_items=300,
    n_factors=8,
    noise=0.0,
    seed=0,
    overlap_share=0.5,
    k_range=(6, 50),
    spec=None,
):
    """Planted two-domain scenario.

    A shared user-factor block drives preferences in both domains; a
    private per-domain block (scaled by ``noise``, plus Gaussian score
    noise of the same scale) adds domain-specific signal.  Each user
    interacts with their top-k scoring items in every domain they belong to.
    """
    if min(n_users, n_items) < 20 or n_factors < 1:
        raise DataError("synthetic scenario needs n_users, n_items >= 20 and n_factors >= 1")
    rng = np.random.default_rng(seed)
    shared = rng.standard_normal((n_users, n_factors))
    membership = rng.random(n_users)
    in_x = membership < overlap_share + (1 - overlap_share) / 2
    in_y = membership >= (1 - overlap_share) / 2
    k_user = rng.integers(k_range[0], k_range[1] + 1, size=n_users)

    raw, planted = {}, {"shared_users": shared}
    for d, member in (("x", in_x), ("y", in_y)):
        items = rng.standard_normal((n_items, n_factors))
        items /= np.linalg.norm(items, axis=1, keepdims=True)
        n_priv = max(1, n_factors // 2)
        priv_u = rng.standard_normal((n_users, n_priv))
        priv_v = rng.standard_normal((n_items, n_priv)) / np.sqrt(n_priv)
        score = shared @ items.T
        planted[f"shared_scores_{d}"] = score.copy()
        score = score + noise * (priv_u @ priv_v.T + rng.standard_normal(score.shape))
        pairs = []
        for u in np.flatnonzero(member):
            top = np.argsort(-score[u], kind="stable")[: k_user[u]]
            pairs.extend((int(u), int(i)) for i in np.sort(top))
        raw[d] = pairs
    if not raw["x"] or not raw["y"]:
        raise DataError("synthetic parameters produced an empty domain")
    fx, fy, report = degree_filter(raw["x"], raw["y"])
    spec = spec or SplitSpec(seed=seed)
    scenario = build_split(
        fx,
        fy,
        spec,
        extra_meta={
            "synthetic": 1,
            "synth_users": n_users,
            "synth_items": n_items,
            "synth_factors": n_factors,
            "synth_noise": noise,
            "synth_seed": seed,
            **report,
        },
    )
    planted["filtered"] = (fx, fy)
    scenario.planted = planted
    return scenario


# ------------------------------------------------------------- persistence


def _render(scenario: ProcessedScenario) -> dict[str, str]:
    pair = scenario.pair

    def rows(arr):
        return "".join(f"{a}\t{b}\n" for a, b in np.asarray(arr).tolist())

    meta = {
        "users_x": pair.graph_x.n_users,
        "items_x": pair.graph_x.n_items,
        "users_y": pair.graph_y.n_users,
        "items_y": pair.graph_y.n_items,
        **scenario.meta,
    }
    ids = []
    for d in ("x", "y"):
        for side in ("user", "item"):
            ids.extend(f"{d}\t{side}\t{k}\t{raw}\n" for k, raw in enumerate(scenario.id_maps[d][side]))
    return {
        "meta": "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(meta.items())),
        "edges_x": rows(pair.graph_x.edges),
        "edges_y": rows(pair.graph_y.edges),
        "overlap": rows(pair.overlap),
        "val": "".join(f"{s}\t{u}\t{i}\n" for s, u, i in scenario.val),
        "test": "".join(f"{s}\t{u}\t{i}\n" for s, u, i in scenario.test),
        "ids": "".join(ids),
    }


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def scenario_digest(scenario: ProcessedScenario) -> str:
    h = hashlib.sha256()
    for name, text in sorted(_render(scenario).items()):
        h.update(name.encode())
        h.update(b"\0")
        h.update(text.encode())
    return h.hexdigest()


def save_scenario(scenario: ProcessedScenario, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in _render(scenario).items():
        with open(out_dir / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return out_dir


def _parse_meta_value(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def load_scenario(path) -> ProcessedScenario:
    path = Path(path)
    missing = [f for f in SCENARIO_FILES if not (path / f).is_file()]
    if missing:
        raise DataError(f"{path}: not a scenario directory (missing {', '.join(missing)})")

    def read(name):
        with open(path / name, encoding="utf-8") as fh:
            return [ln.rstrip("\n").split("\t") for ln in fh if ln.strip()]

    meta = {}
    with open(path / "meta", encoding="utf-8") as fh:
        for ln in fh:
            if "=" in ln:
                k, v = ln.rstrip("\n").split("=", 1)
                meta[k] = _parse_meta_value(v)
    try:
        ex = np.array([[int(a), int(b)] for a, b in read("edges_x")], dtype=np.int64).reshape(-1, 2)
        ey = np.array([[int(a), int(b)] for a, b in read("edges_y")], dtype=np.int64).reshape(-1, 2)
        ov = np.array([[int(a), int(b)] for a, b in read("overlap")], dtype=np.int64).reshape(-1, 2)
        val = [(s, int(u), int(i)) for s, u, i in read("val")]
        test = [(s, int(u), int(i)) for s, u, i in read("test")]
        gx = BipartiteGraph(meta.pop("users_x"), meta.pop("items_x"), ex)
        gy = BipartiteGraph(meta.pop("users_y"), meta.pop("items_y"), ey)
        pair = DomainPair(gx, gy, ov)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: corrupt scenario ({exc})") from None
    id_maps = {d: {"user": [], "item": []} for d in ("x", "y")}
    for d, side, _k, raw in read("ids"):
        id_maps[d][side].append(_parse_meta_value(raw) if meta.get("synthetic") else raw)
    return ProcessedScenario(pair, id_maps, val, test, meta)


def file_digest(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    files = sorted(path.iterdir()) if path.is_dir() else [path]
    for f in files:
        if f.is_file():
            h.update(os.fsencode(f.name))
            h.update(f.read_bytes())
    return h.hexdigest()
