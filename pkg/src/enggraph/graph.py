"""Shared graph abstraction used by both use cases.

An :class:`EngineeringGraph` is a plain container: typed nodes with a dense
feature matrix, typed edges with a dense feature matrix, and free-form
metadata. Construction semantics (what a node means, which relations exist)
live in :mod:`enggraph.biwgraph` and :mod:`enggraph.aerograph`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class EngineeringGraph:
    node_features: np.ndarray          # (N, F) float64
    edges: np.ndarray                  # (E, 2) int64 (src, dst)
    edge_features: np.ndarray          # (E, Fe) float64
    node_names: list | None = None     # optional per-node labels (regions)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64)
        self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
        n = self.node_features.shape[0]
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ShapeError("edge endpoint out of node range")
        if self.edges.shape[0] != self.edge_features.shape[0]:
            raise ShapeError("edge feature count does not match edge count")

    @property
    def num_nodes(self):
        return self.node_features.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def with_self_loops(self, self_loop_edge_feature):
        """Return (edges, edge_features) augmented with one self-loop per node."""
        n = self.num_nodes
        loops = np.stack([np.arange(n), np.arange(n)], axis=1)
        loop_feats = np.tile(np.asarray(self_loop_edge_feature, dtype=np.float64), (n, 1))
        return (
            np.concatenate([self.edges, loops], axis=0),
            np.concatenate([self.edge_features, loop_feats], axis=0),
        )


def sort_edges_by_dst(edges, edge_features, num_nodes):
    """Group edges contiguously by destination node.

    Returns (edges_sorted, features_sorted, seg_ptr) where seg_ptr is the
    length-(N+1) cumulative offset array required by the segment primitives.
    """
    order = np.argsort(edges[:, 1], kind="stable")
    es = edges[order]
    fs = edge_features[order]
    counts = np.bincount(es[:, 1], minlength=num_nodes)
    seg_ptr = np.concatenate([[0], np.cumsum(counts)])
    return es, fs, seg_ptr
