"""Variational bipartite graph encoders, scorer and overlap discriminator.

Parameter names follow ``<domain>.<side>.<what>`` with domain in ``{x, y}``
and side in ``{user, item}``; per-layer VBGE weights live under
``<domain>.<side>.l<k>.``.  The discriminator is ``disc.W1 .. disc.b3``.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .graph import BipartiteGraph, DomainPair
from .numerics import DimensionError, ParamTape, Tensor

DOMAINS = ("x", "y")
SIDES = ("user", "item")
LAYER_WEIGHTS = ("W_agg", "W_mu_hat", "W_mu", "W_sigma_hat", "W_sigma")
CHECKPOINT_FORMAT = "cdrib-checkpoint/1"
# embeddings start at the prior's scale; small init stalls under the KL term
EMB_STD = 1.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    n_factors: int = 128
    n_layers: int = 1
    beta1: float = 1.0
    beta2: float = 1.0
    dropout: float = 0.3
    l2: float = 0.0005
    slope: float = 0.1

    def validate(self):
        if self.n_factors < 1:
            raise ConfigError("n_factors must be >= 1")
        if self.n_layers not in (1, 2, 3, 4):
            raise ConfigError(f"n_layers must be in 1..4, got {self.n_layers}")
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ConfigError("beta1 and beta2 must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError("slope must lie in (0, 1)")
        return self

    @property
    def latent_dim(self) -> int:
        return self.n_factors * self.n_layers


@dataclass
class GaussianLatent:
    mu: Tensor
    sigma: Tensor
    sample: Tensor | None = None
    eps: np.ndarray | None = None

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class ModelState:
    hyper: Hyper
    tape: ParamTape
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name) -> Tensor:
        return self.tape[name]

    def layer_weights(self, domain, side, layer) -> dict[str, Tensor]:
        prefix = f"{domain}.{side}.l{layer}."
        return {w: self.tape[prefix + w] for w in LAYER_WEIGHTS}

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tape.items()}

    def copy(self) -> "ModelState":
        tape = ParamTape({name: t.data.copy() for name, t in self.tape.items()})
        return ModelState(self.hyper, tape, self.seed, dict(self.meta))


def param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so a parameter's init does not depend on which others exist
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_state(pair: DomainPair, hyper: Hyper, seed: int = 0, disc_widths=None) -> ModelState:
    hyper.validate()
    F, L = hyper.n_factors, hyper.n_layers
    tape = ParamTape()
    for d in DOMAINS:
        g = pair.graph(d)
        for side, n in (("user", g.n_users), ("item", g.n_items)):
            name = f"{d}.{side}.emb"
            tape.register(name, param_rng(seed, name).normal(0.0, EMB_STD, size=(n, F)))
            for layer in range(L):
                for w in LAYER_WEIGHTS:
                    name = f"{d}.{side}.l{layer}.{w}"
                    fan_in = 2 * F if w in ("W_mu", "W_sigma") else F
                    tape.register(name, glorot(param_rng(seed, name), fan_in, F))
    widths = disc_widths or (2 * L * F, L * F, max(1, (L * F) // 2), 1)
    for k in range(3):
        name = f"disc.W{k + 1}"
        tape.register(name, glorot(param_rng(seed, name), widths[k], widths[k + 1]))
        tape.register(f"disc.b{k + 1}", np.zeros((1, widths[k + 1])))
    return ModelState(hyper, tape, seed)


def zero_state(pair: DomainPair, hyper: Hyper) -> ModelState:
    state = init_state(pair, hyper, seed=0)
    for t in state.tape.params.values():
        t.data[...] = 0.0
    return state


# ------------------------------------------------------------------- VBGE


def _ops(graph: BipartiteGraph, side: str):
    """(gather-to-opposite, gather-back) normalized operators for a node side."""
    if side == "user":
        return graph.norm_item_to_user, graph.norm_user_to_item
    if side == "item":
        return graph.norm_user_to_item, graph.norm_item_to_user
    raise ValueError(f"unknown side {side!r}")


def interim_repr(graph: BipartiteGraph, side: str, emb, weights, slope=0.1) -> Tensor:
    """delta(Norm(A^T) E W_agg): the side's embeddings pooled onto opposite nodes."""
    to_opposite, _ = _ops(graph, side)
    emb = nx.as_tensor(emb)
    if emb.shape[0] != to_opposite.shape[1]:
        raise DimensionError(
            f"{side} embeddings have {emb.shape[0]} rows, graph has {to_opposite.shape[1]}"
        )
    return nx.leaky_relu(nx.matmul(nx.spmm(to_opposite, emb), weights["W_agg"]), slope)


def latent_params(graph: BipartiteGraph, side: str, emb, interim, weights, slope=0.1):
    _, back = _ops(graph, side)
    emb = nx.as_tensor(emb)
    interim = nx.as_tensor(interim)
    if interim.shape[0] != back.shape[1] or emb.shape[0] != back.shape[0]:
        raise DimensionError(
            f"interim {interim.shape} / embeddings {emb.shape} do not fit operator {back.shape}"
        )
    pooled = nx.spmm(back, interim)
    h_mu = nx.concat_cols(nx.leaky_relu(nx.matmul(pooled, weights["W_mu_hat"]), slope), emb)
    h_sigma = nx.concat_cols(nx.leaky_relu(nx.matmul(pooled, weights["W_sigma_hat"]), slope), emb)
    mu = nx.leaky_relu(nx.matmul(h_mu, weights["W_mu"]), slope)
    sigma = nx.softplus(nx.matmul(h_sigma, weights["W_sigma"]))
    return GaussianLatent(mu, sigma)


def reparameterize(latent: GaussianLatent, rng=None, mode: str = "train") -> Tensor:
    if mode == "infer":
        latent.sample = latent.mu
        latent.eps = None
        return latent.mu
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    eps = rng.standard_normal(latent.mu.shape)
    latent.eps = eps
    latent.sample = nx.add(latent.mu, nx.mul(latent.sigma, eps))
    return latent.sample


def _dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, keep)


def _concat(parts):
    out = parts[0]
    for p in parts[1:]:
        out = nx.concat_cols(out, p)
    return out


def encode_side(graph, state: ModelState, domain, side, mode="train", step_seed=0):
    hyper = state.hyper
    if hyper.n_layers < 1:
        raise ConfigError("at least one VBGE layer is required")
    inp = state[f"{domain}.{side}.emb"]
    mus, sigmas, samples, eps = [], [], [], []
    for layer in range(hyper.n_layers):
        rng = np.random.default_rng(
            [step_seed, DOMAINS.index(domain), SIDES.index(side), layer]
        )
        weights = state.layer_weights(domain, side, layer)
        x = _dropout(inp, hyper.dropout, rng) if mode == "train" else inp
        interim = interim_repr(graph, side, x, weights, hyper.slope)
        lat = latent_params(graph, side, x, interim, weights, hyper.slope)
        z = reparameterize(lat, rng, mode)
        mus.append(lat.mu)
        sigmas.append(lat.sigma)
        samples.append(z)
        if lat.eps is not None:
            eps.append(lat.eps)
        inp = z
    return GaussianLatent(
        _concat(mus),
        _concat(sigmas),
        _concat(samples),
        np.concatenate(eps, axis=1) if eps else None,
    )


def encode_domain(graph, state: ModelState, domain: str, mode="train", step_seed=0):
    """Stacked VBGE encodings for users and items of one domain.

    Each layer's sampled output feeds the next layer; the returned latents
    concatenate all layers column-wise (width ``n_layers * n_factors``).
    """
    users = encode_side(graph, state, domain, "user", mode, step_seed)
    items = encode_side(graph, state, domain, "item", mode, step_seed)
    return users, items


# ---------------------------------------------------------- scoring heads


def score(z_user, z_item):
    z_user, z_item = np.asarray(z_user, dtype=float), np.asarray(z_item, dtype=float)
    if z_user.shape[-1] != z_item.shape[-1]:
        raise DimensionError(f"score dimension mismatch: {z_user.shape} vs {z_item.shape}")
    p = nx._sigmoid(np.atleast_1d(np.asarray(z_item @ z_user, dtype=float)))
    return float(p[0]) if z_item.ndim == 1 else p


def discriminator_logits(zx, zy, state: ModelState) -> Tensor:
    zx, zy = nx.as_tensor(zx), nx.as_tensor(zy)
    if zx.shape != zy.shape or zx.shape[1] * 2 != state["disc.W1"].shape[0]:
        raise DimensionError(
            f"discriminator expects two n x {state['disc.W1'].shape[0] // 2} inputs, "
            f"got {zx.shape} and {zy.shape}"
        )
    slope = state.hyper.slope
    h = nx.concat_cols(zx, zy)
    h = nx.leaky_relu(nx.add(nx.matmul(h, state["disc.W1"]), state["disc.b1"]), slope)
    h = nx.leaky_relu(nx.add(nx.matmul(h, state["disc.W2"]), state["disc.b2"]), slope)
    return nx.add(nx.matmul(h, state["disc.W3"]), state["disc.b3"])


def discriminate(zx, zy, state: ModelState):
    """Probability that the two latents belong to the same user.

    Accepts single vectors or row-aligned batches; vectors give a float.
    """
    single = np.ndim(zx.data if isinstance(zx, Tensor) else zx) == 1
    if single:
        zx = np.asarray(zx, dtype=float)[None, :]
        zy = np.asarray(zy, dtype=float)[None, :]
    p = nx.sigmoid(discriminator_logits(zx, zy, state))
    return float(p.data[0, 0]) if single else p


# --------------------------------------------------------------- inference


@dataclass
class InferenceLatents:
    """Infer-mode means for every node of both domains."""

    user: dict[str, np.ndarray]
    item: dict[str, np.ndarray]


def infer_latents(pair: DomainPair, state: ModelState) -> InferenceLatents:
    user, item = {}, {}
    for d in DOMAINS:
        u, v = encode_domain(pair.graph(d), state, d, mode="infer")
        user[d], item[d] = u.mu.data, v.mu.data
    return InferenceLatents(user, item)


def infer_cold_start(pair, state, user, source, target=None, latents=None):
    """Scores of every target-domain item for a user seen only in ``source``."""
    target = target or ("y" if source == "x" else "x")
    latents = latents or infer_latents(pair, state)
    users = latents.user[source]
    if not 0 <= user < len(users):
        raise LookupError(f"user {user} not in domain {source!r} ({len(users)} users)")
    return score(users[user], latents.item[target])


# -------------------------------------------------------------- checkpoint


def state_to_bytes(state: ModelState) -> bytes:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "hyper": asdict(state.hyper),
        "seed": state.seed,
        "names": list(state.tape.params),
        "meta": state.meta,
    }
    arrays = {f"p{i:04d}": t.data for i, t in enumerate(state.tape.params.values())}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8), **arrays)
    return buf.getvalue()


def state_from_bytes(blob: bytes) -> ModelState:
    with np.load(io.BytesIO(blob)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a checkpoint: format {meta.get('format')!r}")
        tape = ParamTape({n: z[f"p{i:04d}"].copy() for i, n in enumerate(meta["names"])})
    return ModelState(Hyper(**meta["hyper"]), tape, meta["seed"], meta["meta"])


def save_checkpoint(state: ModelState, path):
    with open(path, "wb") as fh:
        fh.write(state_to_bytes(state))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
