"""TextCNN style classifiers and the four classification objectives.

Two classifiers with identical architecture but separate parameters:
a graph-level one reading encoded node sequences and a sentence-level one
reading (relaxed or hard) token embeddings.  Neither is adversarial; each
loss routes gradients to exactly one parameter set -- the classifier for
the "c" losses, the generator stack for the "t" losses -- by detaching or
freezing the other side during the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MASK_FILL,
    ShapeError,
    Tensor,
    concat,
    constant,
    cross_entropy_with_logits,
    frozen,
    gather_rows,
    matmul,
    relu,
    reshape,
    sliding_windows,
    tmax,
    tmean,
)
from .nn import init_bias, init_matrix, tensors_of
from .rephraser import DecodeOutput

MIN_PADDED_LEN = 5  # inputs are zero-padded up to the widest filter


@dataclass
class ConvFilter:
    width: int
    w: Tensor  # [width*d, maps]
    b: Tensor  # [maps]


@dataclass
class TextCNNParams:
    """Parallel convolutions (widths 3/4/5), max-over-time, affine to 2 logits."""

    filters: list[ConvFilter]
    out_w: Tensor
    out_b: Tensor

    @staticmethod
    def create(
        rng: np.random.Generator,
        d: int,
        feature_maps: int = 16,
        widths: tuple[int, ...] = (3, 4, 5),
        dtype=np.float64,
    ) -> "TextCNNParams":
        filters = [
            ConvFilter(w, init_matrix(rng, w * d, (w * d, feature_maps), dtype), init_bias(feature_maps, dtype))
            for w in widths
        ]
        return TextCNNParams(
            filters=filters,
            out_w=init_matrix(rng, len(widths) * feature_maps, (len(widths) * feature_maps, 2), dtype),
            out_b=init_bias(2, dtype),
        )


def textcnn_forward(x: Tensor, params: TextCNNParams, lengths: np.ndarray | None = None) -> Tensor:
    """Binary style logits for embedded sequences [B,T,d] (or one [T,d]).

    Sequences shorter than the widest filter are zero-padded; with
    ``lengths`` given, max-over-time only sees windows inside
    max(length, MIN_PADDED_LEN) so batch padding cannot leak in.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if t < MIN_PADDED_LEN:
        pad = constant(np.zeros((b, MIN_PADDED_LEN - t, d), dtype=x.dtype))
        x = concat([x, pad], axis=1)
        t = MIN_PADDED_LEN
    eff = None
    if lengths is not None:
        eff = np.minimum(np.maximum(np.asarray(lengths), MIN_PADDED_LEN), t)
    feats = []
    for f in params.filters:
        windows = sliding_windows(x, f.width)  # [B, P, width*d]
        scores = relu(matmul(windows, f.w) + f.b)  # [B, P, maps]
        if eff is not None:
            p = scores.shape[1]
            valid = (np.arange(p)[None, :] + f.width) <= eff[:, None]
            bias = ((1.0 - valid.astype(scores.dtype)) * MASK_FILL)[:, :, None]
            scores = scores + constant(bias)
        feats.append(tmax(scores, axis=1))  # [B, maps]
    logits = matmul(concat(feats, axis=-1), params.out_w) + params.out_b
    return reshape(logits, (2,)) if squeeze else logits


def _mean_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    return tmean(cross_entropy_with_logits(logits, labels))


def graph_classifier_losses(
    dg: TextCNNParams,
    same_style_graphs: Tensor | None = None,
    true_labels: np.ndarray | None = None,
    transferred_graphs: Tensor | None = None,
    target_labels: np.ndarray | None = None,
    lengths: np.ndarray | None = None,
) -> tuple[Tensor | None, Tensor | None]:
    """(classifier loss, transfer loss) for the graph-level classifier.

    The classifier loss sees detached graphs (trains only the classifier);
    the transfer loss runs with the classifier frozen (trains only the
    encoder that produced the transferred graphs).  Either side may be
    skipped by passing None.
    """
    l_c = l_t = None
    if same_style_graphs is not None:
        if true_labels is None or len(true_labels) != same_style_graphs.shape[0]:
            raise ShapeError("graph/label count mismatch for the classifier loss")
        l_c = _mean_ce(textcnn_forward(same_style_graphs.detach(), dg, lengths), np.asarray(true_labels))
    if transferred_graphs is not None:
        if target_labels is None or len(target_labels) != transferred_graphs.shape[0]:
            raise ShapeError("graph/label count mismatch for the transfer loss")
        with frozen(tensors_of(dg)):
            l_t = _mean_ce(textcnn_forward(transferred_graphs, dg, lengths), np.asarray(target_labels))
    return l_c, l_t


def sentence_classifier_losses(
    ds: TextCNNParams,
    emb_table: Tensor,
    real_ids: np.ndarray | None = None,
    real_lengths: np.ndarray | None = None,
    true_labels: np.ndarray | None = None,
    transferred: DecodeOutput | None = None,
    target_labels: np.ndarray | None = None,
) -> tuple[Tensor | None, Tensor | None]:
    """(classifier loss, transfer loss) for the sentence-level classifier.

    Real sentences are embedded through a detached copy of the shared token
    table (the classifier loss must not move generator parameters).
    Transferred sentences enter as relaxed one-hot rows times the live
    table, with the classifier frozen, so the gradient reaches the
    rephraser through the Gumbel-softmax outputs.
    """
    l_c = l_t = None
    if real_ids is not None:
        x_real = gather_rows(emb_table.detach(), np.asarray(real_ids, dtype=np.int64))
        l_c = _mean_ce(textcnn_forward(x_real, ds, real_lengths), np.asarray(true_labels))
    if transferred is not None:
        with frozen(tensors_of(ds)):
            x_gen = matmul(transferred.relaxed, emb_table)  # [B,T,V] @ [V,d]
            l_t = _mean_ce(textcnn_forward(x_gen, ds, transferred.lengths), np.asarray(target_labels))
    return l_c, l_t
