"""GRU rephraser: scans fused node embeddings, then decodes a token sequence.

The decoder's discrete output step is relaxed with Gumbel-softmax during
training so classifier gradients can flow back through sampled tokens; at
inference it degenerates to plain greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat,
    constant,
    gather_rows,
    gumbel_softmax,
    matmul,
    reshape,
    sigmoid,
    stack,
    tanh,
)
from .graphs import BOS_ID, EOS_ID
from .nn import init_bias, init_matrix


@dataclass
class GRUParams:
    """One GRU cell: fused update/reset/candidate gates (in that order)."""

    wx: Tensor  # [d_in, 3*d_h]
    wh: Tensor  # [d_h, 3*d_h]
    b: Tensor  # [3*d_h]

    @staticmethod
    def create(rng: np.random.Generator, d_in: int, d_h: int, dtype=np.float64) -> "GRUParams":
        return GRUParams(
            wx=init_matrix(rng, d_in, (d_in, 3 * d_h), dtype),
            wh=init_matrix(rng, d_h, (d_h, 3 * d_h), dtype),
            b=init_bias(3 * d_h, dtype),
        )


@dataclass
class RephraserParams:
    """Encoder scans fused nodes into an initial state; the decoder consumes
    the previous token embedding concatenated with the fused node embedding
    of the current position (zeros past the sentence end)."""

    encoder: GRUParams
    decoder: GRUParams  # input width 2*d: [prev token emb ; node emb]
    init_w: Tensor  # [d_h, d_h] encoder state -> decoder initial state
    init_b: Tensor
    out_w: Tensor  # [d_h, V]
    out_b: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, vocab_size: int, dtype=np.float64) -> "RephraserParams":
        return RephraserParams(
            encoder=GRUParams.create(rng, d, d, dtype),
            decoder=GRUParams.create(rng, 2 * d, d, dtype),
            init_w=init_matrix(rng, d, (d, d), dtype),
            init_b=init_bias(d, dtype),
            out_w=init_matrix(rng, d, (d, vocab_size), dtype),
            out_b=init_bias(vocab_size, dtype),
        )


@dataclass
class DecodeOutput:
    """Sampled decoding artifacts kept for the sentence-classifier loss."""

    token_ids: np.ndarray  # [B, T] argmax ids
    relaxed: Tensor  # [B, T, V] simplex rows
    logits: Tensor  # [B, T, V]
    lengths: np.ndarray  # [B] position of first eos + 1 (or T)


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """h' = (1-z)*h + z*n with z,r sigmoid gates and tanh candidate n."""
    if x.shape[-1] != p.wx.shape[0] or h.shape[-1] != p.wh.shape[0]:
        raise ShapeError(f"gru_cell shapes: x {x.shape}, h {h.shape}, wx {p.wx.shape}")
    d_h = p.wh.shape[0]
    gx = matmul(x, p.wx) + p.b
    gh = matmul(h, p.wh)
    z = sigmoid(gx[..., 0:d_h] + gh[..., 0:d_h])
    r = sigmoid(gx[..., d_h : 2 * d_h] + gh[..., d_h : 2 * d_h])
    n = tanh(gx[..., 2 * d_h :] + r * gh[..., 2 * d_h :])
    return (1.0 - z) * h + z * n


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def encode_nodes(nodes: Tensor, p: GRUParams, lengths: np.ndarray | None = None) -> Tensor:
    """GRU scan over node embeddings in token order; returns the final state.

    With ``lengths``, updates beyond a sentence's true length are skipped, so
    the state is invariant to trailing pad rows.
    """
    x, squeeze = _batched(nodes)
    b, k, d = x.shape
    if k == 0:
        raise ShapeError("cannot encode an empty node sequence")
    h = constant(np.zeros((b, p.wh.shape[0]), dtype=x.dtype))
    for t in range(k):
        h_new = gru_cell(x[:, t, :], h, p)
        if lengths is None:
            h = h_new
        else:
            m = constant((t < np.asarray(lengths)).astype(x.dtype)[:, None])
            h = m * h_new + (1.0 - m) * h
    return reshape(h, (h.shape[-1],)) if squeeze else h


def initial_decoder_state(h_enc: Tensor, p: RephraserParams) -> Tensor:
    return tanh(matmul(h_enc, p.init_w) + p.init_b)


def _node_at(nodes: Tensor | None, t: int, b: int, d: int, dtype) -> Tensor:
    """Fused node embedding feeding decoder step t; zeros past the last node."""
    if nodes is not None and t < nodes.shape[1]:
        return nodes[:, t, :]
    return constant(np.zeros((b, d), dtype=dtype))


def decode_teacher_forced(
    h_enc: Tensor,
    target_ids: np.ndarray,
    emb_table: Tensor,
    p: RephraserParams,
    nodes: Tensor | None = None,
) -> Tensor:
    """Logits [B,T,V] for each target position, feeding gold previous tokens.

    ``target_ids`` must be eos-terminated; the decoder input sequence is the
    bos-prefixed shift of the targets, each step concatenated with the fused
    node embedding of that position (``nodes``, zeros when absent).
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.ndim == 1:
        target_ids = target_ids[None, :]
        h_enc = reshape(h_enc, (1, h_enc.shape[-1])) if h_enc.ndim == 1 else h_enc
        if nodes is not None and nodes.ndim == 2:
            nodes = reshape(nodes, (1,) + nodes.shape)
    b, t_len = target_ids.shape
    if t_len == 0:
        raise ShapeError("teacher-forced decoding needs at least one target position")
    d = emb_table.shape[1]
    inputs = np.concatenate([np.full((b, 1), BOS_ID, dtype=np.int64), target_ids[:, :-1]], axis=1)
    h = initial_decoder_state(h_enc, p)
    step_logits = []
    emb = gather_rows(emb_table, inputs)  # [B, T, d]
    for t in range(t_len):
        x = concat([emb[:, t, :], _node_at(nodes, t, b, d, emb_table.dtype)], axis=-1)
        h = gru_cell(x, h, p.decoder)
        step_logits.append(matmul(h, p.out_w) + p.out_b)
    return stack(step_logits, axis=1)


def decode_sample(
    h_enc: Tensor,
    emb_table: Tensor,
    p: RephraserParams,
    temperature: float,
    rng: np.random.Generator | None = None,
    max_len: int = 17,
    noise_fn: Callable[[tuple[int, ...]], np.ndarray] | None = None,
    nodes: Tensor | None = None,
) -> DecodeOutput:
    """Autoregressive relaxed decoding.

    Each step draws a Gumbel-softmax relaxed one-hot; its mixture of token
    embeddings feeds the next step and its argmax is the discrete token.
    Stops when every sentence has emitted eos, or at ``max_len``.
    ``noise_fn`` overrides the Gumbel noise (the zero-noise hook makes the
    decode exactly temperature-scaled greedy).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    h2, squeeze = (reshape(h_enc, (1, h_enc.shape[-1])), True) if h_enc.ndim == 1 else (h_enc, False)
    if nodes is not None and nodes.ndim == 2:
        nodes = reshape(nodes, (1,) + nodes.shape)
    b = h2.shape[0]
    v, d = p.out_w.shape[1], emb_table.shape[1]
    h = initial_decoder_state(h2, p)
    x = gather_rows(emb_table, np.full(b, BOS_ID, dtype=np.int64))
    done = np.zeros(b, dtype=bool)
    lengths = np.full(b, 0, dtype=np.int64)
    ids_cols, relaxed_cols, logits_cols = [], [], []
    for t in range(max_len):
        h = gru_cell(concat([x, _node_at(nodes, t, b, d, emb_table.dtype)], axis=-1), h, p.decoder)
        logits = matmul(h, p.out_w) + p.out_b
        noise = noise_fn((b, v)) if noise_fn is not None else None
        y = gumbel_softmax(logits, temperature, noise=noise, rng=rng)
        step_ids = y.argmax(-1)
        ids_cols.append(step_ids)
        relaxed_cols.append(y)
        logits_cols.append(logits)
        newly_done = (~done) & (step_ids == EOS_ID)
        lengths[newly_done] = t + 1
        done |= step_ids == EOS_ID
        if done.all():
            break
        x = matmul(y, emb_table)
    lengths[~done] = len(ids_cols)
    out = DecodeOutput(
        token_ids=np.stack(ids_cols, axis=1),
        relaxed=stack(relaxed_cols, axis=1),
        logits=stack(logits_cols, axis=1),
        lengths=lengths,
    )
    return out


def decode_greedy(
    h_enc: Tensor,
    emb_table: Tensor,
    p: RephraserParams,
    max_len: int = 17,
    nodes: Tensor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic argmax decoding; returns (ids [B,T], lengths [B])."""
    h2 = reshape(h_enc, (1, h_enc.shape[-1])) if h_enc.ndim == 1 else h_enc
    b = h2.shape[0]
    d = emb_table.shape[1]
    h = initial_decoder_state(h2, p)
    ids = np.full(b, BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    cols = []
    for t in range(max_len):
        x = concat([gather_rows(emb_table, ids), _node_at(nodes, t, b, d, emb_table.dtype)], axis=-1)
        h = gru_cell(x, h, p.decoder)
        logits = matmul(h, p.out_w) + p.out_b
        ids = logits.argmax(-1)
        cols.append(ids)
        newly = (~done) & (ids == EOS_ID)
        lengths[newly] = t + 1
        done |= ids == EOS_ID
        if done.all():
            break
    lengths[~done] = len(cols)
    return np.stack(cols, axis=1), lengths
