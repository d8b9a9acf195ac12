"""Graph-masked multi-head attention: self-graph encoder and cross-graph decoder.

Attention is restricted to graph neighbors by an additive pre-softmax
penalty (MASK_FILL) on masked slots.  The penalty is large enough that the
masked exponentials underflow to exactly 0.0, so non-neighbors are
bit-invisible to a node's output.

The self-graph encoder additionally sees a learnable global style node,
connected to every token, which carries the (possibly flipped) target style
into the graph.  By default the style node is held static across layers;
the updating variant is behind ``style_node_static=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    MASK_FILL,
    ShapeError,
    Tensor,
    concat,
    constant,
    gather_rows,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)
from .nn import FFNParams, ffn, init_bias, init_matrix


class DegenerateMaskError(ValueError):
    """A query row has no attendable positions (disconnected node)."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters (toy defaults; paper scale uses d_n=512)."""

    d_n: int = 64
    heads: int = 8
    layers: int = 2
    ffn_ratio: int = 4
    feature_maps: int = 16
    symmetrize: bool = True
    self_loops: bool = True
    style_node_static: bool = True
    identity_mask_sgt: bool = False
    identity_mask_cgt: bool = False

    def __post_init__(self):
        if self.d_n % self.heads != 0:
            raise ValueError(f"d_n={self.d_n} must be divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one transformer layer")

    @property
    def d_k(self) -> int:
        return self.d_n // self.heads


@dataclass
class AttentionParams:
    """Fused per-head query/key/value projections plus the output projection."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, dtype=np.float64) -> "AttentionParams":
        return AttentionParams(
            wq=init_matrix(rng, d, (d, d), dtype),
            wk=init_matrix(rng, d, (d, d), dtype),
            wv=init_matrix(rng, d, (d, d), dtype),
            wo=init_matrix(rng, d, (d, d), dtype),
        )


@dataclass
class TransformerLayerParams:
    attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn: FFNParams
    ln2_gain: Tensor
    ln2_bias: Tensor

    @staticmethod
    def create(rng: np.random.Generator, cfg: ModelConfig, dtype=np.float64) -> "TransformerLayerParams":
        d = cfg.d_n
        one = np.ones(d, dtype=dtype)
        return TransformerLayerParams(
            attn=AttentionParams.create(rng, d, dtype),
            ln1_gain=Tensor(one.copy(), requires_grad=True),
            ln1_bias=init_bias(d, dtype),
            ffn=FFNParams.create(rng, d, cfg.ffn_ratio, dtype),
            ln2_gain=Tensor(one.copy(), requires_grad=True),
            ln2_bias=init_bias(d, dtype),
        )


@dataclass
class StyleEmbedderParams:
    """One-hidden-layer MLP from a one-hot style label to a d_n vector."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, n_styles: int = 2, dtype=np.float64) -> "StyleEmbedderParams":
        return StyleEmbedderParams(
            w1=init_matrix(rng, n_styles, (n_styles, d), dtype),
            b1=init_bias(d, dtype),
            w2=init_matrix(rng, d, (d, d), dtype),
            b2=init_bias(d, dtype),
        )


@dataclass
class SGTParams:
    layers: list[TransformerLayerParams]
    style_mlp: StyleEmbedderParams

    @staticmethod
    def create(rng: np.random.Generator, cfg: ModelConfig, dtype=np.float64) -> "SGTParams":
        return SGTParams(
            layers=[TransformerLayerParams.create(rng, cfg, dtype) for _ in range(cfg.layers)],
            style_mlp=StyleEmbedderParams.create(rng, cfg.d_n, dtype=dtype),
        )


@dataclass
class CGTParams:
    layers: list[TransformerLayerParams]

    @staticmethod
    def create(rng: np.random.Generator, cfg: ModelConfig, dtype=np.float64) -> "CGTParams":
        return CGTParams(
            layers=[TransformerLayerParams.create(rng, cfg, dtype) for _ in range(cfg.layers)]
        )


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected a [k,d] or [B,k,d] tensor, got shape {x.shape}")


def masked_multihead_attention(
    queries: Tensor,
    keys_values: Tensor,
    mask: np.ndarray,
    params: AttentionParams,
    heads: int,
) -> Tensor:
    """Residual multi-head attention restricted to mask==1 positions.

    queries [B,Q,d] (or [Q,d]), keys_values [B,Kk,d] (or [Kk,d]),
    mask [B,Q,Kk] (or [Q,Kk]) binary.  Every query row must have at least
    one attendable position.
    """
    q_in, squeeze = _ensure_batched(queries)
    kv, _ = _ensure_batched(keys_values)
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None, :, :]
    b, nq, d = q_in.shape
    nk = kv.shape[1]
    if kv.shape[0] != b or kv.shape[2] != d:
        raise ShapeError(f"keys_values shape {kv.shape} incompatible with queries {q_in.shape}")
    if mask.shape[-2:] != (nq, nk):
        raise ShapeError(f"mask shape {mask.shape} does not cover {nq}x{nk} attention")
    if np.any(mask.sum(axis=-1) == 0):
        raise DegenerateMaskError("attention mask has an all-zero query row")
    if d % heads != 0:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    dk = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, -1, heads, dk)), (0, 2, 1, 3))

    q = split_heads(matmul(q_in, params.wq))
    k = split_heads(matmul(kv, params.wk))
    v = split_heads(matmul(kv, params.wv))

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    bias = constant(((1.0 - mask) * MASK_FILL).astype(q_in.dtype)[:, None, :, :])
    weights = softmax(scores + bias, axis=-1)
    mixed = matmul(weights, v)  # [B, h, Q, dk]
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, nq, d))
    out = q_in + matmul(merged, params.wo)
    return reshape(out, (nq, d)) if squeeze else out


def _layer_ffn_block(x: Tensor, p: TransformerLayerParams) -> Tensor:
    """Post-attention block: layer norm, residual FFN, layer norm."""
    return layer_norm(ffn(layer_norm(x, p.ln1_gain, p.ln1_bias), p.ffn), p.ln2_gain, p.ln2_bias)


def style_embed(labels, params: StyleEmbedderParams) -> Tensor:
    """Map binary style labels to d_n vectors: MLP(one_hot(label))."""
    arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any((arr < 0) | (arr > 1)):
        raise ValueError(f"style labels must be 0 or 1, got {labels!r}")
    onehot = constant(np.eye(2, dtype=params.w1.dtype)[arr])
    hidden = relu(matmul(onehot, params.w1) + params.b1)
    out = matmul(hidden, params.w2) + params.b2
    return reshape(out, (out.shape[-1],)) if np.isscalar(labels) or np.asarray(labels).ndim == 0 else out


def sgt_encode(
    node_embeds: Tensor,
    adjacency_aug: np.ndarray,
    style_labels,
    params: SGTParams,
    config: ModelConfig,
) -> Tensor:
    """Self-graph encoding of token nodes conditioned on a style node.

    ``adjacency_aug`` is the style-augmented adjacency ([k+1,k+1] or
    [B,K+1,K+1]): token-token edges in the leading block, style
    connectivity in the final row/column.  Returns the token rows only.
    """
    x, squeeze = _ensure_batched(node_embeds)
    adjacency_aug = np.asarray(adjacency_aug)
    if adjacency_aug.ndim == 2:
        adjacency_aug = adjacency_aug[None, :, :]
    b, k, d = x.shape
    if adjacency_aug.shape[-2:] != (k + 1, k + 1):
        raise ShapeError(
            f"augmented adjacency {adjacency_aug.shape[-2:]} does not match {k} tokens + style node"
        )
    labels_arr = np.atleast_1d(np.asarray(style_labels, dtype=np.int64))
    if labels_arr.shape == (1,) and b > 1:
        labels_arr = np.repeat(labels_arr, b)
    style = style_embed(labels_arr, params.style_mlp)  # [B, d]
    style_row = reshape(style, (b, 1, d))

    tokens = x
    for layer in params.layers:
        kv = concat([tokens, style_row], axis=1)
        if config.style_node_static:
            attended = masked_multihead_attention(
                tokens, kv, adjacency_aug[:, :k, :], layer.attn, config.heads
            )
            tokens = _layer_ffn_block(attended, layer)
        else:
            attended = masked_multihead_attention(kv, kv, adjacency_aug, layer.attn, config.heads)
            full = _layer_ffn_block(attended, layer)
            tokens = full[:, :k, :]
            style_row = full[:, k:, :]
    return reshape(tokens, (k, d)) if squeeze else tokens


def cgt_decode_nodes(
    transferred: Tensor,
    source: Tensor,
    adjacency: np.ndarray,
    params: CGTParams,
    config: ModelConfig,
) -> Tensor:
    """Cross-graph attention: transferred nodes query the original source nodes.

    Both graphs must share shape and adjacency; there is no style node in
    cross attention.  The keys/values are the unencoded source nodes at
    every layer.
    """
    q, squeeze = _ensure_batched(transferred)
    src, _ = _ensure_batched(source)
    if q.shape != src.shape:
        raise ShapeError(f"transferred {q.shape} and source {src.shape} graphs must match")
    adjacency = np.asarray(adjacency)
    if adjacency.ndim == 2:
        adjacency = adjacency[None, :, :]
    k = q.shape[1]
    if adjacency.shape[-2:] != (k, k):
        raise ShapeError(f"adjacency {adjacency.shape[-2:]} does not match {k} nodes")

    out = q
    for layer in params.layers:
        attended = masked_multihead_attention(out, src, adjacency, layer.attn, config.heads)
        out = _layer_ffn_block(attended, layer)
    return reshape(out, out.shape[1:]) if squeeze else out


# -- batched mask assembly -------------------------------------------------------


def batch_token_adjacency(
    adjacencies: list[np.ndarray], k_max: int, identity: bool = False
) -> np.ndarray:
    """Stack per-sentence adjacency into [B,K,K]; pad rows get a self-loop.

    ``identity`` replaces every token-token adjacency by the identity matrix
    (the identity-mask ablation) while keeping pad handling identical.
    """
    b = len(adjacencies)
    out = np.zeros((b, k_max, k_max), dtype=np.int8)
    for i, adj in enumerate(adjacencies):
        k = adj.shape[0]
        out[i, :k, :k] = np.eye(k, dtype=np.int8) if identity else adj
        if k < k_max:
            idx = np.arange(k, k_max)
            out[i, idx, idx] = 1
    return out


def augment_batch_adjacency(token_adj: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Style-augment a batch adjacency: style node connected to real tokens only."""
    b, k, _ = token_adj.shape
    out = np.zeros((b, k + 1, k + 1), dtype=np.int8)
    out[:, :k, :k] = token_adj
    valid = (np.arange(k)[None, :] < np.asarray(lengths)[:, None]).astype(np.int8)
    out[:, :k, k] = valid
    out[:, k, :k] = valid
    out[:, k, k] = 1
    return out
