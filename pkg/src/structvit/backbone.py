"""Sliding-window patch tokenization and the transformer encoder stack.

An image is cut into overlapping (when stride < patch) windows, each window
is flattened and linearly projected, a learnable classification token is
prepended, and learned position embeddings are added. Encoder layers apply
pre-residual multi-head self-attention and a two-layer feed-forward block,
each followed by a residual connection and layer norm. Per-head attention
matrices can be captured for downstream structure analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError


@dataclass(frozen=True)
class PatchGrid:
    """Spatial indexing of the patch tokens for one image geometry.

    Patch counts follow the sliding-window rule: floor((extent - patch) /
    stride) + 1 per axis. Flat patch index = row * n_w + col.
    """

    image_h: int
    image_w: int
    patch: int
    stride: int
    n_h: int
    n_w: int

    @classmethod
    def from_sizes(cls, image_h: int, image_w: int, patch: int, stride: int) -> "PatchGrid":
        if patch > image_h or patch > image_w:
            raise DimensionError(f"patch {patch} exceeds image {image_h}x{image_w}")
        if stride < 1:
            raise DimensionError(f"stride must be >= 1, got {stride}")
        n_h = (image_h - patch) // stride + 1
        n_w = (image_w - patch) // stride + 1
        return cls(image_h, image_w, patch, stride, n_h, n_w)

    @property
    def n(self) -> int:
        return self.n_h * self.n_w

    def position(self, flat_index: int) -> tuple[int, int]:
        """(col, row) of a flat patch index; col is horizontal."""
        return flat_index % self.n_w, flat_index // self.n_w


def split_patches(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Cut an H x W x 3 image into the grid's windows, one flat row each.

    Row i*n_w + j holds the window whose top-left pixel is (i*stride,
    j*stride), flattened in (y, x, channel) order. Windows overlap when
    stride < patch.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (grid.image_h, grid.image_w, 3):
        raise DimensionError(
            f"image shape {image.shape} does not match grid "
            f"{(grid.image_h, grid.image_w, 3)}"
        )
    p, s = grid.patch, grid.stride
    windows = np.lib.stride_tricks.sliding_window_view(image, (p, p, 3))
    sel = windows[::s, ::s, 0]
    assert sel.shape[:2] == (grid.n_h, grid.n_w)
    return np.ascontiguousarray(sel.reshape(grid.n, p * p * 3))


@dataclass
class AttentionRecord:
    """Per-head attention matrices of one encoder layer.

    Each entry is the (N+1) x (N+1) row-stochastic softmax output, rows
    indexing queries and columns keys; index 0 is the cls token. The
    tensors are live graph nodes so later consumers stay differentiable.
    """

    layer: int
    heads: list[Tensor]


@dataclass
class LayerParams:
    """Learnable tensors of one encoder layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class EncoderParams:
    """All backbone parameters: projection, cls token, positions, layers."""

    patch_w: Tensor  # (3 P^2, D)
    patch_b: Tensor  # (D,)
    cls_token: Tensor  # (1, D)
    pos_embed: Tensor  # (N+1, D)
    layers: list[LayerParams]
    n_heads: int


def embed(patches, params: EncoderParams) -> Tensor:
    """Project patch rows, prepend the cls token, add position embeddings."""
    patches = ad.as_tensor(patches)
    projected = ad.add(ad.matmul(patches, params.patch_w), params.patch_b)
    tokens = ad.concat_rows([params.cls_token, projected])
    if tokens.shape != params.pos_embed.shape:
        raise DimensionError(
            f"position table {params.pos_embed.shape} does not cover "
            f"{tokens.shape[0]} tokens"
        )
    return ad.add(tokens, params.pos_embed)


def multi_head_attention(z: Tensor, p: LayerParams, n_heads: int,
                         capture: bool = False):
    """Self-attention over the token rows of ``z``.

    Heads are contiguous column slices of the model width (fixed layout so
    saved parameters are reproducible). Scores are scaled by
    1/sqrt(width/heads), the per-head dimension.
    """
    d = z.shape[1]
    if d % n_heads != 0:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    q = ad.add(ad.matmul(z, p.wq), p.bq)
    k = ad.add(ad.matmul(z, p.wk), p.bk)
    v = ad.add(ad.matmul(z, p.wv), p.bv)
    head_outs = []
    attns = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.mul_scalar(ad.matmul_nt(qh, kh), scale)
        att = ad.softmax_rows(scores)
        attns.append(att)
        head_outs.append(ad.matmul(att, vh))
    merged = ad.concat_last_axis(head_outs)
    out = ad.add(ad.matmul(merged, p.wo), p.bo)
    return out, (attns if capture else None)


def feed_forward(z: Tensor, p: LayerParams) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(z, p.ffn_w1), p.ffn_b1))
    return ad.add(ad.matmul(hidden, p.ffn_w2), p.ffn_b2)


def encoder_layer(z: Tensor, p: LayerParams, n_heads: int, layer_index: int,
                  capture: bool = False):
    """One encoder layer: attention and feed-forward blocks, each wrapped
    in residual + layer norm. Returns the new tokens and, when requested,
    the captured per-head attention record."""
    attn_out, attns = multi_head_attention(z, p, n_heads, capture=capture)
    z_mid = ad.layer_norm(ad.add(attn_out, z), p.ln1_gamma, p.ln1_beta)
    z_next = ad.layer_norm(ad.add(feed_forward(z_mid, p), z_mid),
                           p.ln2_gamma, p.ln2_beta)
    if not np.isfinite(z_next.data).all():
        raise NumericError(f"non-finite activations in encoder layer {layer_index}")
    record = AttentionRecord(layer_index, attns) if capture else None
    return z_next, record
