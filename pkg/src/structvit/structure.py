"""Structure feature extraction from captured attention.

The cls row of each attention head says how much the classifier token
attends to every patch. Summing over heads, thresholding at the mean,
building a rank-1 adjacency from the surviving weights, and running a
two-layer graph convolution over polar-coordinate node features yields a
single vector describing the spatial arrangement of the salient patches.
That vector is added back onto the cls token.

Gradients flow through the surviving attention values and the convolution
weights; the mask, the reference-patch choice, and the coordinates are
treated as constants of the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import AttentionRecord, PatchGrid
from .errors import ConfigError


@dataclass
class FilteredAttention:
    """Head-summed cls attention with entries at or below the mean zeroed."""

    total: Tensor  # (N,) summed cls->patch attention
    mean: float
    filtered: Tensor  # (N,) zeroed where total <= mean (strict keep)
    mask: np.ndarray  # bool (N,)
    reference_index: int  # argmax of total, lowest flat index on ties


@dataclass
class StructureGraph:
    """Node features, adjacency, and coordinates for one image's graph."""

    node_features: Tensor  # (N, 4): rho, cos angle, sin angle, kept weight
    adjacency: Tensor  # (N, N) rank-1 outer product of kept weights
    rho: np.ndarray
    theta: np.ndarray
    reference_index: int


@dataclass
class GcnParams:
    """Weights of the two propagation steps; output width matches the
    backbone so the result can be added to the cls row."""

    w1: Tensor
    w2: Tensor


def aggregate_cls_attention(record: AttentionRecord) -> Tensor:
    """Sum the cls-row attention to each patch over heads.

    Entry i is the total weight the cls token puts on patch token i
    (column i+1; the cls->cls entry is excluded). Needs at least two
    patches for the downstream graph to be meaningful.
    """
    if not record.heads:
        raise ConfigError("attention record has no heads")
    n_tokens = record.heads[0].shape[0]
    if n_tokens < 3:
        raise ConfigError(f"need at least 2 patch tokens, got {n_tokens - 1}")
    total = None
    for att in record.heads:
        row = ad.slice_cols(ad.slice_rows(att, 0, 1), 1, n_tokens)
        total = row if total is None else ad.add(total, row)
    return ad.reshape(total, (n_tokens - 1,))


def threshold(total: Tensor) -> FilteredAttention:
    """Keep entries strictly above the mean, zero the rest.

    The kept values stay differentiable; the pass/fail mask and the
    reference index (argmax, lowest index on ties) are constants. A
    constant input keeps nothing, which downstream collapses to a zero
    structure feature.
    """
    values = total.data
    mean = float(values.mean())
    mask = values > mean
    reference = int(np.argmax(values))
    filtered = ad.mul(total, Tensor(mask.astype(np.float64)))
    return FilteredAttention(total, mean, filtered, mask, reference)


def polar_coordinates(grid: PatchGrid, reference_index: int):
    """Normalized radius and angle of every patch around the reference.

    x runs over columns, y over rows. The angle is arctan2 shifted by pi
    and divided by 2*pi, then wrapped into [0, 1) so the +pi branch-cut
    output maps to 0. The reference itself gets rho 0 and angle 0.5
    (arctan2(0, 0) is 0).
    """
    if not (0 <= reference_index < grid.n):
        raise ConfigError(f"reference {reference_index} outside [0, {grid.n})")
    x0, y0 = grid.position(reference_index)
    idx = np.arange(grid.n)
    x = idx % grid.n_w
    y = idx // grid.n_w
    dx = (x - x0) / grid.n_w
    dy = (y - y0) / grid.n_h
    rho = np.sqrt(dx * dx + dy * dy)
    theta = (np.arctan2(y - y0, x - x0) + np.pi) / (2.0 * np.pi)
    theta = np.mod(theta, 1.0)
    return rho, theta


def build_graph(fa: FilteredAttention, rho: np.ndarray, theta: np.ndarray) -> StructureGraph:
    """Assemble node features and the rank-1 adjacency.

    Adjacency is the outer product of the filtered weights: symmetric,
    positive semidefinite, and zero in every row/column of a dropped
    patch. Node features encode the polar position (cos/sin avoids the
    angular wrap-around) plus the kept attention weight.
    """
    n = fa.filtered.size
    col = ad.reshape(fa.filtered, (n, 1))
    row = ad.reshape(fa.filtered, (1, n))
    adjacency = ad.matmul(col, row)
    angle = 2.0 * np.pi * theta
    coords = Tensor(np.column_stack([rho, np.cos(angle), np.sin(angle)]))
    node_features = ad.concat_last_axis([coords, col])
    return StructureGraph(node_features, adjacency, rho, theta, fa.reference_index)


def structure_feature(graph: StructureGraph, params: GcnParams) -> Tensor:
    """Two rounds of adjacency propagation with ReLU, then the reference
    node's row: a (1, D) vector summarizing the object layout."""
    h1 = ad.relu(ad.matmul(graph.adjacency, ad.matmul(graph.node_features, params.w1)))
    h2 = ad.relu(ad.matmul(graph.adjacency, ad.matmul(h1, params.w2)))
    return ad.slice_rows(h2, graph.reference_index, graph.reference_index + 1)


def inject(z: Tensor, feature: Tensor) -> Tensor:
    """Add the structure feature to the cls row, leaving patch rows as-is."""
    return ad.add_to_row(z, 0, feature)


def structure_vector(record: AttentionRecord, grid: PatchGrid, params: GcnParams) -> Tensor:
    """Full pipeline from one layer's attention record to the injectable
    (1, D) structure feature."""
    fa = threshold(aggregate_cls_attention(record))
    rho, theta = polar_coordinates(grid, fa.reference_index)
    graph = build_graph(fa, rho, theta)
    return structure_feature(graph, params)
