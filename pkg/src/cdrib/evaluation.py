"""Leave-one-out cold-start ranking evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import BUCKETS, ProcessedScenario
from .model import InferenceLatents, ModelState, infer_latents

N_NEGATIVES = 999
METRICS = ("mrr", "ndcg@5", "ndcg@10", "hr@1", "hr@5", "hr@10")
DIRECTIONS = (("x", "y"), ("y", "x"))


def direction_name(source, target=None):
    target = target or ("y" if source == "x" else "x")
    return f"{source}->{target}"


# ------------------------------------------------------------------ metrics


def _ranks(ranks):
    r = [int(x) for x in ranks]
    if not r:
        raise ValueError("empty rank list")
    if min(r) < 1:
        raise ValueError("ranks must be >= 1")
    return r


# correctly rounded sums keep results independent of summation order
def mrr(ranks) -> float:
    r = _ranks(ranks)
    return math.fsum(1.0 / x for x in r) / len(r)


def ndcg_at_k(ranks, k) -> float:
    r = _ranks(ranks)
    return math.fsum(1.0 / math.log2(x + 1) for x in r if x <= k) / len(r)


def hr_at_k(ranks, k) -> float:
    r = _ranks(ranks)
    return sum(1 for x in r if x <= k) / len(r)


def metric_block(ranks) -> dict[str, float]:
    return {
        "mrr": mrr(ranks),
        "ndcg@5": ndcg_at_k(ranks, 5),
        "ndcg@10": ndcg_at_k(ranks, 10),
        "hr@1": hr_at_k(ranks, 1),
        "hr@5": hr_at_k(ranks, 5),
        "hr@10": hr_at_k(ranks, 10),
    }


def rank_of_positive(pos_score, neg_scores) -> int:
    """1-based rank with ties resolved against the positive."""
    return 1 + int(np.count_nonzero(np.asarray(neg_scores) >= pos_score))


def uniform_baseline_mrr(n_candidates) -> float:
    """Expected MRR when the positive's rank is uniform over ``n`` slots."""
    return sum(1.0 / k for k in range(1, n_candidates + 1)) / n_candidates


# ------------------------------------------------------------------ ranking


def candidate_items(record, scenario: ProcessedScenario, rng, held_out=None, n_negatives=N_NEGATIVES):
    """Positive item followed by sampled non-interacted target items."""
    source, user, item = record
    target = "y" if source == "x" else "x"
    held_out = held_out if held_out is not None else scenario.held_out_items()
    n_items = scenario.pair.graph(target).n_items
    excluded = set(held_out.get((source, user), ())) | {item}
    excluded |= _target_training_items(scenario, source, user)
    eligible = np.setdiff1d(np.arange(n_items), np.fromiter(excluded, dtype=np.int64))
    if len(eligible) > n_negatives:
        negatives = rng.choice(eligible, size=n_negatives, replace=False)
    else:
        negatives = eligible
    return np.concatenate([[item], negatives]).astype(np.int64)


def _target_training_items(scenario, source, user):
    # cold-start users are absent from the target graph unless still linked by overlap
    pair = scenario.pair
    col = 0 if source == "x" else 1
    hit = np.flatnonzero(pair.overlap[:, col] == user)
    if hit.size == 0:
        return set()
    target = "y" if source == "x" else "x"
    tgt_user = int(pair.overlap[hit[0], 1 - col])
    return set(pair.graph(target).items_of(tgt_user).tolist())


def rank_one(record, latents: InferenceLatents, scenario, rng, held_out=None, n_negatives=N_NEGATIVES):
    """Returns ``(rank, n_candidates)`` for one held-out interaction.

    Candidates are ordered by inner product of the infer-mode means, which
    is the sigmoid score's order without its saturation ties.
    """
    source, user, _ = record
    target = "y" if source == "x" else "x"
    cands = candidate_items(record, scenario, rng, held_out, n_negatives)
    logits = latents.item[target][cands] @ latents.user[source][user]
    return rank_of_positive(logits[0], logits[1:]), len(cands)


# ------------------------------------------------------------------- report


@dataclass
class EvalReport:
    split: str
    seed: int
    directions: dict = field(default_factory=dict)  # name -> metric dict (+ n)
    per_record: list = field(default_factory=list)  # (direction, user, item, rank, n_candidates)
    slices: dict = field(default_factory=dict)  # (direction, "5-10") -> metric dict (+ n)
    failures: list = field(default_factory=list)

    def mrr_sum(self) -> float:
        return sum(m["mrr"] for m in self.directions.values())

    def check_invariants(self):
        blocks = list(self.directions.values()) + list(self.slices.values())
        for m in blocks:
            for key in METRICS:
                assert 0.0 <= m[key] <= 1.0, (key, m[key])
            assert m["hr@1"] <= m["hr@5"] <= m["hr@10"]
            assert m["ndcg@5"] <= m["ndcg@10"]
            assert m["mrr"] >= m["hr@1"] - 1e-15
        return True

    def to_table(self) -> str:
        head = f"{'direction':<12}{'n':>7}" + "".join(f"{k.upper():>10}" for k in METRICS)
        lines = [f"split={self.split} seed={self.seed}", head, "-" * len(head)]
        for name, m in self.directions.items():
            lines.append(
                f"{name:<12}{m['n']:>7}" + "".join(f"{100 * m[k]:>10.2f}" for k in METRICS)
            )
        if self.slices:
            lines += ["", f"{'direction':<12}{'#inter':>8}{'n':>7}" + "".join(f"{k.upper():>10}" for k in METRICS)]
            for (name, bucket), m in self.slices.items():
                lines.append(
                    f"{name:<12}{bucket:>8}{m['n']:>7}"
                    + "".join(f"{100 * m[k]:>10.2f}" for k in METRICS)
                )
        lines.append("(metrics in %)")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        lines = ["scope\tdirection\tmetric\tvalue"]
        for name, m in self.directions.items():
            lines.append(f"all\t{name}\tn\t{m['n']}")
            lines += [f"all\t{name}\t{k}\t{m[k]!r}" for k in METRICS]
        for (name, bucket), m in self.slices.items():
            lines.append(f"inter:{bucket}\t{name}\tn\t{m['n']}")
            lines += [f"inter:{bucket}\t{name}\t{k}\t{m[k]!r}" for k in METRICS]
        return "\n".join(lines) + "\n"

    def ranks_tsv(self) -> str:
        lines = ["direction\tuser\titem\trank\tn_candidates"]
        lines += ["\t".join(map(str, r)) for r in self.per_record]
        return "\n".join(lines) + "\n"


def evaluate(
    scenario: ProcessedScenario,
    state: ModelState,
    split="test",
    seed=0,
    slice_interactions=False,
    latents=None,
    n_negatives=N_NEGATIVES,
) -> EvalReport:
    records = scenario.records(split)
    latents = latents or infer_latents(scenario.pair, state)
    held_out = scenario.held_out_items()
    report = EvalReport(split, seed)
    by_dir: dict[str, list] = {}
    for rid, rec in enumerate(records):
        rng = np.random.default_rng([seed, rid])
        try:
            rank, n_cand = rank_one(rec, latents, scenario, rng, held_out, n_negatives)
        except (IndexError, KeyError, ValueError) as exc:
            report.failures.append((rid, rec, str(exc)))
            continue
        name = direction_name(rec[0])
        report.per_record.append((name, rec[1], rec[2], rank, n_cand))
        by_dir.setdefault(name, []).append(rank)
    for source, target in DIRECTIONS:
        name = direction_name(source, target)
        if name in by_dir:
            report.directions[name] = {"n": len(by_dir[name]), **metric_block(by_dir[name])}
    if slice_interactions:
        report.slices = interaction_slices(scenario, report.per_record)
    return report


def interaction_slices(scenario, per_record) -> dict:
    out = {}
    for source, target in DIRECTIONS:
        name = direction_name(source, target)
        degree = scenario.pair.graph(source).user_degree
        for lo, hi in BUCKETS:
            ranks = [r[3] for r in per_record if r[0] == name and lo <= degree[r[1]] <= hi]
            key = (name, f"{lo}-{hi}")
            if ranks:
                out[key] = {"n": len(ranks), **metric_block(ranks)}
            else:
                out[key] = {"n": 0, **{m: 0.0 for m in METRICS}}
    return out


def random_baseline(report: EvalReport) -> dict:
    """Analytic expectations under uniformly random positive ranks."""
    n = [r[4] for r in report.per_record]
    if not n:
        return {"mrr": math.nan, "hr@10": math.nan}
    return {
        "mrr": float(np.mean([uniform_baseline_mrr(c) for c in n])),
        "hr@10": float(np.mean([min(10, c) / c for c in n])),
    }
