"""Tractable loss terms and their weighted sum.

All reductions are per node / per positive pair means.  Random draws inside
one step happen in a fixed order: encoder seed (dropout and reparameterization
noise), reconstruction negatives, contrastive permutation.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .graph import DomainPair
from .model import GaussianLatent, ModelState, discriminator_logits, encode_domain
from .numerics import Tensor

log = logging.getLogger(__name__)

RECON_TERMS = ("recon_o2Y", "recon_x2X", "recon_o2X", "recon_y2Y")


def kl_to_standard_normal(latent: GaussianLatent, rows=None) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over dims, averaged over ``rows``."""
    mu, sigma = latent.mu, latent.sigma
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            return Tensor(0.0)
        mu, sigma = nx.gather_rows(mu, rows), nx.gather_rows(sigma, rows)
    n = mu.shape[0]
    if n == 0:
        return Tensor(0.0)
    per_entry = nx.sub(nx.add(nx.square(mu), nx.square(sigma)), nx.add(1.0, nx.mul(2.0, nx.log(sigma))))
    return nx.mul(nx.total(per_entry), 0.5 / n)


def sample_negatives(users, n_items, interacted, k, rng, counters=None):
    """Uniform item draws avoiding each user's interacted set.

    Returns an ``(P, k)`` array; rows for users who interacted with every
    item are filled with -1 and counted under ``saturated_user``.
    """
    users = np.asarray(users, dtype=np.int64)
    out = rng.integers(0, n_items, size=(len(users), k))
    for row, u in enumerate(users):
        seen = interacted[u]
        if len(seen) >= n_items:
            out[row] = -1
            if counters is not None:
                counters["saturated_user"] += 1
            continue
        for col in range(k):
            while out[row, col] in seen:
                out[row, col] = rng.integers(0, n_items)
    return out


def reconstruction_loss(
    z_users,
    z_items,
    positive_edges,
    negatives_per_positive=1,
    rng=None,
    interacted=None,
    negatives=None,
    counters=None,
) -> Tensor:
    """Mean over positives of -[ln s(u,v) + sum_k ln(1 - s(u, v_k))].

    ``positive_edges`` index rows of ``z_users`` / ``z_items``.  Negatives are
    drawn from items outside ``interacted[u]`` unless given explicitly
    (``-1`` entries are skipped).
    """
    edges = np.asarray(positive_edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        return Tensor(0.0)
    z_users, z_items = nx.as_tensor(z_users), nx.as_tensor(z_items)
    if z_users.shape[1] != z_items.shape[1]:
        raise nx.DimensionError(f"latent widths differ: {z_users.shape} vs {z_items.shape}")
    if negatives is None:
        if interacted is None:
            raise ValueError("need either explicit negatives or the interacted sets")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        negatives = sample_negatives(
            edges[:, 0], z_items.shape[0], interacted, negatives_per_positive, rng, counters
        )
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(edges), -1)

    zu = nx.gather_rows(z_users, edges[:, 0])
    pos = nx.log(nx.sigmoid(nx.rowwise_dot(zu, nx.gather_rows(z_items, edges[:, 1]))))
    acc = nx.total(pos)
    for col in range(negatives.shape[1]):
        live = np.flatnonzero(negatives[:, col] >= 0)
        if live.size == 0:
            continue
        logits = nx.rowwise_dot(
            nx.gather_rows(zu, live), nx.gather_rows(z_items, negatives[live, col])
        )
        acc = nx.add(acc, nx.total(nx.log(nx.sub(1.0, nx.sigmoid(logits)))))
    return nx.mul(acc, -1.0 / len(edges))


def derangement(n, rng) -> np.ndarray:
    """Random permutation with no fixed points (n >= 2)."""
    order = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[order] = np.roll(order, -1)
    return out


def contrastive_loss(z_overlap_x, z_overlap_y, state: ModelState, rng=None, negatives=None, counters=None):
    """Mean over overlapping users of -[ln D(x_i, y_i) + ln(1 - D(x_i, y_j))], j != i."""
    zx, zy = nx.as_tensor(z_overlap_x), nx.as_tensor(z_overlap_y)
    n = zx.shape[0]
    if n < 2:
        if counters is not None:
            counters["contrastive_too_few_users"] += 1
        return Tensor(0.0)
    if negatives is None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        negatives = derangement(n, rng)
    pos = nx.sigmoid(discriminator_logits(zx, zy, state))
    neg = nx.sigmoid(discriminator_logits(zx, nx.gather_rows(zy, negatives), state))
    acc = nx.add(nx.total(nx.log(pos)), nx.total(nx.log(nx.sub(1.0, neg))))
    return nx.mul(acc, -1.0 / n)


def l2_penalty(state: ModelState) -> Tensor:
    acc = Tensor(0.0)
    for t in state.tape.params.values():
        acc = nx.add(acc, nx.total(nx.square(t)))
    return nx.mul(acc, state.hyper.l2)


@dataclass
class LossBreakdown:
    kl_x_user: float = 0.0
    kl_x_item: float = 0.0
    kl_y_user: float = 0.0
    kl_y_item: float = 0.0
    recon_o2Y: float = 0.0
    recon_x2X: float = 0.0
    recon_o2X: float = 0.0
    recon_y2Y: float = 0.0
    contrastive: float = 0.0
    l2: float = 0.0
    total: float = 0.0

    def recompute(self, beta1, beta2, contrastive_weight=1.0) -> float:
        return (
            beta1 * (self.kl_x_user + self.kl_x_item)
            + beta2 * (self.kl_y_user + self.kl_y_item)
            + sum(getattr(self, t) for t in RECON_TERMS)
            + contrastive_weight * self.contrastive
            + self.l2
        )

    def to_line(self, **extra) -> str:
        items = {**extra, **asdict(self)}
        return " ".join(f"{k}={_fmt(v)}" for k, v in items.items())

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class Batch:
    """Training edges of each domain contributing reconstruction terms this step."""

    edges_x: np.ndarray
    edges_y: np.ndarray


@dataclass(frozen=True)
class LossSwitches:
    """Ablation and scaling switches.

    ``kl_scale`` picks the KL reduction: ``"node"`` is the mean over nodes of
    the per-node KL, ``"dim"`` further divides by the latent width and
    ``"edge"`` rescales the per-node mean by nodes per training edge.
    """

    contrastive: bool = True
    in_domain: bool = True
    negatives_per_positive: int = 1
    kl_scale: str = "dim"


def _overlap_lookup(pair: DomainPair):
    to_y = np.full(pair.graph_x.n_users, -1, dtype=np.int64)
    to_x = np.full(pair.graph_y.n_users, -1, dtype=np.int64)
    to_y[pair.overlap[:, 0]] = pair.overlap[:, 1]
    to_x[pair.overlap[:, 1]] = pair.overlap[:, 0]
    return to_y, to_x


def total_loss(
    pair: DomainPair,
    state: ModelState,
    batch: Batch,
    rng: np.random.Generator,
    mode="train",
    switches: LossSwitches = LossSwitches(),
    counters: Counter | None = None,
):
    """Full objective on one batch; returns ``(total tensor, LossBreakdown)``.

    Cross-domain terms score overlapping users' latents from their *other*
    domain against this domain's items; in-domain terms score non-overlapping
    users against their own domain's items.
    """
    hyper = state.hyper
    counters = counters if counters is not None else Counter()
    step_seed = int(rng.integers(0, 2**63 - 1))
    ux, vx = encode_domain(pair.graph_x, state, "x", mode, step_seed)
    uy, vy = encode_domain(pair.graph_y, state, "y", mode, step_seed)
    ox, nox, oy, noy = pair.partition
    to_y, to_x = _overlap_lookup(pair)

    terms: dict[str, Tensor] = {}
    user_rows_x = None if switches.in_domain else ox
    user_rows_y = None if switches.in_domain else oy
    terms["kl_x_user"] = kl_to_standard_normal(ux, user_rows_x)
    terms["kl_x_item"] = kl_to_standard_normal(vx)
    terms["kl_y_user"] = kl_to_standard_normal(uy, user_rows_y)
    terms["kl_y_item"] = kl_to_standard_normal(vy)
    if switches.kl_scale == "edge":
        # per-node mean rescaled to a per-training-edge weight
        for d, g, u_rows in (("x", pair.graph_x, user_rows_x), ("y", pair.graph_y, user_rows_y)):
            n_u = g.n_users if u_rows is None else len(u_rows)
            terms[f"kl_{d}_user"] = nx.mul(terms[f"kl_{d}_user"], n_u / max(g.n_edges, 1))
            terms[f"kl_{d}_item"] = nx.mul(terms[f"kl_{d}_item"], g.n_items / max(g.n_edges, 1))
    elif switches.kl_scale == "dim":
        for key in ("kl_x_user", "kl_x_item", "kl_y_user", "kl_y_item"):
            terms[key] = nx.mul(terms[key], 1.0 / hyper.latent_dim)
    elif switches.kl_scale != "node":
        raise ValueError(f"kl_scale must be 'node', 'dim' or 'edge', got {switches.kl_scale!r}")

    k = switches.negatives_per_positive
    ex = np.asarray(batch.edges_x, dtype=np.int64).reshape(-1, 2)
    ey = np.asarray(batch.edges_y, dtype=np.int64).reshape(-1, 2)
    gx, gy = pair.graph_x, pair.graph_y

    # in-domain: non-overlapping users with their own items
    own_x = ex[to_y[ex[:, 0]] < 0]
    own_y = ey[to_x[ey[:, 0]] < 0]
    # cross-domain: overlapping users' other-domain latent with this domain's items
    cross_y = ey[to_x[ey[:, 0]] >= 0]
    cross_x = ex[to_y[ex[:, 0]] >= 0]
    zero = Tensor(0.0)

    terms["recon_o2Y"] = reconstruction_loss(
        ux.sample,
        vy.sample,
        np.column_stack([to_x[cross_y[:, 0]], cross_y[:, 1]]),
        k,
        rng,
        negatives=sample_negatives(cross_y[:, 0], gy.n_items, gy.user_item_sets, k, rng, counters),
    )
    if switches.in_domain:
        terms["recon_x2X"] = reconstruction_loss(
            ux.sample, vx.sample, own_x, k, rng, interacted=gx.user_item_sets, counters=counters
        )
    else:
        terms["recon_x2X"] = zero
    terms["recon_o2X"] = reconstruction_loss(
        uy.sample,
        vx.sample,
        np.column_stack([to_y[cross_x[:, 0]], cross_x[:, 1]]),
        k,
        rng,
        negatives=sample_negatives(cross_x[:, 0], gx.n_items, gx.user_item_sets, k, rng, counters),
    )
    if switches.in_domain:
        terms["recon_y2Y"] = reconstruction_loss(
            uy.sample, vy.sample, own_y, k, rng, interacted=gy.user_item_sets, counters=counters
        )
    else:
        terms["recon_y2Y"] = zero

    if switches.contrastive:
        terms["contrastive"] = contrastive_loss(
            nx.gather_rows(ux.sample, ox), nx.gather_rows(uy.sample, oy), state, rng, counters=counters
        )
    else:
        terms["contrastive"] = zero
    terms["l2"] = l2_penalty(state) if hyper.l2 > 0 else zero

    total = nx.add(
        nx.mul(nx.add(terms["kl_x_user"], terms["kl_x_item"]), hyper.beta1),
        nx.mul(nx.add(terms["kl_y_user"], terms["kl_y_item"]), hyper.beta2),
    )
    for name in (*RECON_TERMS, "contrastive", "l2"):
        total = nx.add(total, terms[name])
    breakdown = LossBreakdown(**{k_: float(v.data) for k_, v in terms.items()}, total=float(total.data))
    return total, breakdown
