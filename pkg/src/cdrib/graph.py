"""Bipartite interaction graphs and the two-domain overlap bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .numerics import DimensionError, spmm  # noqa: F401  (re-exported)


def row_normalize(m) -> sp.csr_matrix:
    """Scale every nonzero row of ``m`` to sum to one; zero rows stay zero."""
    m = sp.csr_matrix(m, dtype=np.float64)
    sums = np.asarray(m.sum(axis=1)).ravel()
    inv = np.zeros_like(sums)
    nz = sums != 0
    inv[nz] = 1.0 / sums[nz]
    return sp.csr_matrix(sp.diags(inv) @ m)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Binary user-item interactions of one domain.

    ``edges`` is an ``(E, 2)`` int array of ``(user, item)`` pairs, sorted and
    free of duplicates.
    """

    n_users: int
    n_items: int
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.n_users:
                raise ValueError("user index out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.n_items:
                raise ValueError("item index out of range")
        edges = np.unique(edges, axis=0)
        object.__setattr__(self, "edges", edges)

    @cached_property
    def csr_user_to_item(self) -> sp.csr_matrix:
        data = np.ones(len(self.edges))
        return sp.csr_matrix(
            (data, (self.edges[:, 0], self.edges[:, 1])), shape=(self.n_users, self.n_items)
        )

    @cached_property
    def csr_item_to_user(self) -> sp.csr_matrix:
        return self.csr_user_to_item.T.tocsr()

    @cached_property
    def norm_user_to_item(self) -> sp.csr_matrix:
        """Norm(A): each user row averages over its items."""
        return row_normalize(self.csr_user_to_item)

    @cached_property
    def norm_item_to_user(self) -> sp.csr_matrix:
        """Norm(A^T): each item row averages over its users."""
        return row_normalize(self.csr_item_to_user)

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_users)

    @cached_property
    def item_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.n_items)

    def items_of(self, user: int) -> np.ndarray:
        m = self.csr_user_to_item
        return m.indices[m.indptr[user] : m.indptr[user + 1]]

    @cached_property
    def user_item_sets(self) -> list[frozenset]:
        return [frozenset(self.items_of(u).tolist()) for u in range(self.n_users)]

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True, eq=False)
class DomainPair:
    graph_x: BipartiteGraph
    graph_y: BipartiteGraph
    overlap: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        overlap = np.asarray(self.overlap, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(overlap[:, 0])) != len(overlap) or len(np.unique(overlap[:, 1])) != len(
            overlap
        ):
            raise ValueError("overlap pairs must be unique in both coordinates")
        if len(overlap) and (
            overlap[:, 0].min() < 0
            or overlap[:, 0].max() >= self.graph_x.n_users
            or overlap[:, 1].min() < 0
            or overlap[:, 1].max() >= self.graph_y.n_users
        ):
            raise ValueError("overlap index out of range")
        object.__setattr__(self, "overlap", overlap)

    def graph(self, domain: str) -> BipartiteGraph:
        return {"x": self.graph_x, "y": self.graph_y}[domain]

    @cached_property
    def partition(self):
        return partition_users(self)


def partition_users(pair: DomainPair):
    """Split each domain's users into (overlap, non-overlap) index arrays.

    ``overlap_x[i]`` and ``overlap_y[i]`` refer to the same person.
    """
    ox = pair.overlap[:, 0].copy()
    oy = pair.overlap[:, 1].copy()
    mask_x = np.ones(pair.graph_x.n_users, dtype=bool)
    mask_x[ox] = False
    mask_y = np.ones(pair.graph_y.n_users, dtype=bool)
    mask_y[oy] = False
    return ox, np.flatnonzero(mask_x), oy, np.flatnonzero(mask_y)
