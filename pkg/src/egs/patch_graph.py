"""Patch graph with a virtual super node.

The invariant feature map is cut into a square grid of patches (one node per
patch, row-major order). Grid nodes are linked to their 4-neighbours, every
node gets a self-loop, and an optional super node (the last index) is linked
to all patch nodes. Propagation normalizes each incoming message by the
*source* degree, so ``adjacency / degrees`` is column-stochastic.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nx
from .equivariant import FeatureField
from .errors import DimensionError, DomainError, GeometryError
from .numerics import Tensor


@dataclass(frozen=True)
class PatchGrid:
    rows: int = 4
    cols: int = 4

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise GeometryError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.rows != self.cols:
            raise GeometryError(f"patch grid must be square, got {self.rows}x{self.cols}")

    @property
    def nodes(self) -> int:
        return self.rows * self.cols

    def rotation_permutation(self, k: int = 1) -> np.ndarray:
        """Index map ``perm`` with ``nodes_of(rot90^k(map))[i] == nodes_of(map)[perm[i]]``."""
        ids = np.arange(self.nodes).reshape(self.rows, self.cols)
        return np.rot90(ids, k).ravel()


@dataclass(frozen=True)
class AugmentedGraph:
    adjacency: np.ndarray
    degrees: np.ndarray
    super_index: int | None

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    @property
    def has_super(self) -> bool:
        return self.super_index is not None

    def propagation_matrix(self, dtype=np.float64) -> np.ndarray:
        """``P[i, j] = A[i, j] / d_j``; columns sum to one."""
        return (self.adjacency / self.degrees[None, :]).astype(dtype)

    def permuted(self, perm: np.ndarray) -> "AugmentedGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        A = self.adjacency[np.ix_(perm, perm)]
        sup = None if self.super_index is None else int(np.flatnonzero(perm == self.super_index)[0])
        return AugmentedGraph(A, A.sum(axis=0), sup)


def graph_from_adjacency(adjacency, super_index: int | None = None) -> AugmentedGraph:
    A = np.asarray(adjacency, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise DomainError("adjacency must be symmetric")
    deg = A.sum(axis=0)
    if np.any(deg <= 0):
        raise DomainError("every node needs positive degree (add self-loops)")
    return AugmentedGraph(A, deg, super_index)


def build_graph(grid: PatchGrid, super_node: bool = True) -> AugmentedGraph:
    """4-neighbour grid + self-loops, plus the super node when requested."""
    n = grid.nodes
    size = n + 1 if super_node else n
    A = np.eye(size)
    for r in range(grid.rows):
        for c in range(grid.cols):
            i = r * grid.cols + c
            if c + 1 < grid.cols:
                A[i, i + 1] = A[i + 1, i] = 1.0
            if r + 1 < grid.rows:
                A[i, i + grid.cols] = A[i + grid.cols, i] = 1.0
    if super_node:
        A[n, :] = 1.0
        A[:, n] = 1.0
    return graph_from_adjacency(A, n if super_node else None)


def partition(feature_map: FeatureField | Tensor, grid: PatchGrid) -> Tensor:
    """Mean-pool each patch of a (B, C, H, W) map into a (B, N, C) node matrix."""
    t = feature_map.planar() if isinstance(feature_map, FeatureField) else feature_map
    if t.ndim != 4:
        raise DimensionError(f"partition expects (B, C, H, W), got {t.shape}")
    B, C, H, W = t.shape
    if H % grid.rows or W % grid.cols:
        raise GeometryError(f"map {H}x{W} not divisible into a {grid.rows}x{grid.cols} grid")
    ph, pw = H // grid.rows, W // grid.cols
    blocks = nx.reshape(t, (B, C, grid.rows, ph, grid.cols, pw))
    pooled = nx.mean(blocks, axis=(3, 5))
    nodes = nx.reshape(pooled, (B, C, grid.nodes))
    return nx.transpose(nodes, (0, 2, 1))


def init_super(nodes: Tensor) -> Tensor:
    """Append the mean of the patch nodes as the final row."""
    if nodes.shape[-2] < 1:
        raise DimensionError("init_super needs at least one node")
    s0 = nx.mean(nodes, axis=-2, keepdims=True)
    return nx.concat([nodes, s0], axis=-2)


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class GcnLayer:
    weight: Tensor
    activation: Activation = Activation.RELU


def aggregate(H: Tensor, g: AugmentedGraph) -> Tensor:
    """Degree-normalized neighbour sum before the weight and nonlinearity."""
    if H.shape[-2] != g.size:
        raise DimensionError(f"node features have {H.shape[-2]} rows, graph has {g.size} nodes")
    P = Tensor(g.propagation_matrix(H.dtype))
    return nx.matmul(P, H, ordered=True)


def gcn_propagate(H: Tensor, g: AugmentedGraph, layer: GcnLayer) -> Tensor:
    """``sigma((A D^-1 H) W)`` with a fixed reduction order."""
    out = nx.matmul(aggregate(H, g), layer.weight, ordered=True)
    if Activation(layer.activation) is Activation.RELU:
        out = nx.relu(out)
    return out


class Readout(str, Enum):
    SUPER_ONLY = "super_only"
    CONCAT = "concat"
    MEAN = "mean"


def readout(H: Tensor, g: AugmentedGraph, mode: Readout | str = Readout.SUPER_ONLY,
            normalize: bool = True) -> Tensor:
    """Final descriptor from the last layer's node states, L2-normalized.

    ``super_only`` picks the super-node row; ``concat`` flattens patch rows
    followed by the super row; ``mean`` averages patch rows (the only option
    for a graph without a super node).
    """
    mode = Readout(mode)
    if H.shape[-2] != g.size:
        raise DimensionError(f"readout got {H.shape[-2]} rows for a {g.size}-node graph")
    if mode is not Readout.MEAN and not g.has_super:
        raise DomainError(f"{mode.value} readout needs a super node")
    if mode is Readout.SUPER_ONLY:
        z = H[..., g.super_index, :]
    elif mode is Readout.CONCAT:
        z = nx.reshape(H, H.shape[:-2] + (H.shape[-2] * H.shape[-1],))
    else:
        patches = H if not g.has_super else H[..., :g.super_index, :]
        z = nx.mean(patches, axis=-2)
    return nx.l2norm(z, axis=-1) if normalize else z


def descriptor_dim(grid: PatchGrid, width: int, mode: Readout | str, super_node: bool) -> int:
    mode = Readout(mode)
    if mode is Readout.CONCAT:
        return (grid.nodes + (1 if super_node else 0)) * width
    return width
