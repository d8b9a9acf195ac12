"""Training scheme: warm-up, alternating transfer/classifier phases, checkpoints.

Warm-up alternates reconstruction steps (generator stack) with classifier
steps.  The training phase alternates per minibatch between
(a) the transfer objective  l_rec + lambda_g*l_t_g + lambda_s*l_t_s,
    which updates encoder/decoder/rephraser/style-embedder only, and
(b) the classification objective  l_c_g + l_c_s, which updates the two
    classifiers only.
Routing is enforced inside the loss ops (detach/freeze), so each phase's
backward pass cannot touch the other side's parameters at all.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, constant, cross_entropy_with_logits, gather_rows, no_grad
from .classifiers import (
    TextCNNParams,
    graph_classifier_losses,
    sentence_classifier_losses,
    textcnn_forward,
)
from .graphs import EOS_ID, LinguisticGraph, Vocab
from .nn import init_embedding, named_tensors
from .optim import Adam
from .rephraser import RephraserParams, decode_greedy, decode_sample, decode_teacher_forced, encode_nodes
from .transformer import (
    CGTParams,
    ModelConfig,
    SGTParams,
    augment_batch_adjacency,
    batch_token_adjacency,
    cgt_decode_nodes,
    sgt_encode,
)

LOSS_KEYS = ("l_rec", "lc_g", "lc_s", "lt_g", "lt_s")
LOSS_VARIANTS = ("full", "c-clas-g-only", "c-clas-s-only", "t-clas-g-only", "t-clas-s-only")

CKPT_MAGIC = b"SGCKPT01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference setup, presets rescale."""

    lambda_g: float = 0.05
    lambda_s: float = 0.02
    learning_rate: float = 5e-4
    batch_size: int = 128
    warmup_epochs: int = 10
    train_epochs: int = 3
    tau_start: float = 1.0
    tau_anneal: float = 0.5
    tau_floor: float = 0.1
    seed: int = 0
    dtype: str = "f64"
    max_decode_len: int = 17
    patience: int = 2
    alternation: str = "minibatch"  # or "epoch"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_s < 0:
            raise ValueError("lambda_g and lambda_s must be non-negative")
        if self.tau_floor <= 0:
            raise ValueError("temperature floor must be positive")
        if self.dtype not in ("f64", "f32"):
            raise ValueError(f"dtype must be 'f64' or 'f32', got {self.dtype!r}")
        if self.alternation not in ("minibatch", "epoch"):
            raise ValueError("alternation must be 'minibatch' or 'epoch'")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @staticmethod
    def toy(**overrides) -> "TrainConfig":
        """Desk-scale defaults: small widths, short schedule, stronger transfer push."""
        base = dict(
            batch_size=16,
            warmup_epochs=3,
            train_epochs=3,
            lambda_g=0.05,
            lambda_s=0.02,
            model=ModelConfig(d_n=64, feature_maps=16),
        )
        base.update(overrides)
        return TrainConfig(**base)

    @staticmethod
    def paper(**overrides) -> "TrainConfig":
        base = dict(
            batch_size=128,
            warmup_epochs=10,
            train_epochs=3,
            model=ModelConfig(d_n=512, feature_maps=100),
        )
        base.update(overrides)
        return TrainConfig(**base)


def seeded_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent counter-based RNG streams derived from one seed."""
    return [np.random.Generator(np.random.Philox(c)) for c in np.random.SeedSequence(seed).spawn(n)]


class Model:
    """All learnable state: embeddings, encoder, decoder, rephraser, classifiers."""

    def __init__(self, vocab: Vocab, config: TrainConfig, rng: np.random.Generator | None = None):
        self.vocab = vocab
        self.config = config
        self.epoch = 0
        mc = config.model
        dt = config.np_dtype
        if rng is None:
            rng = seeded_streams(config.seed, 3)[0]
        self.embedding = init_embedding(rng, (len(vocab), mc.d_n), dt)
        self.sgt = SGTParams.create(rng, mc, dt)
        self.cgt = CGTParams.create(rng, mc, dt)
        self.rephraser = RephraserParams.create(rng, mc.d_n, len(vocab), dt)
        self.dg = TextCNNParams.create(rng, mc.d_n, mc.feature_maps, dtype=dt)
        self.ds = TextCNNParams.create(rng, mc.d_n, mc.feature_maps, dtype=dt)

    def generator_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"emb.table": self.embedding}
        out.update(named_tensors(self.sgt, "sgt"))
        out.update(named_tensors(self.cgt, "cgt"))
        out.update(named_tensors(self.rephraser, "reph"))
        return out

    def classifier_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(named_tensors(self.dg, "dg"))
        out.update(named_tensors(self.ds, "ds"))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.generator_params()
        out.update(self.classifier_params())
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data = state[name].copy()


# -- batching ------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    adj_aug_sgt: np.ndarray
    adj_cgt: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    graphs: list[LinguisticGraph]


def make_batch(items: list[tuple[LinguisticGraph, int]], config: TrainConfig) -> Batch:
    if not items:
        raise ValueError("empty batch")
    mc = config.model
    graphs = [g for g, _ in items]
    labels = np.array([s for _, s in items], dtype=np.int64)
    lengths = np.array([g.k for g in graphs], dtype=np.int64)
    k_max = int(lengths.max())
    b = len(graphs)
    ids = np.zeros((b, k_max), dtype=np.int64)
    for i, g in enumerate(graphs):
        ids[i, : g.k] = g.token_ids
    adjs = [g.adjacency for g in graphs]
    sgt_tok = batch_token_adjacency(adjs, k_max, identity=mc.identity_mask_sgt)
    cgt_tok = batch_token_adjacency(adjs, k_max, identity=mc.identity_mask_cgt)
    adj_aug = augment_batch_adjacency(sgt_tok, lengths)
    t_len = k_max + 1
    targets = np.zeros((b, t_len), dtype=np.int64)
    target_mask = np.zeros((b, t_len), dtype=config.np_dtype)
    for i, g in enumerate(graphs):
        targets[i, : g.k] = g.token_ids
        targets[i, g.k] = EOS_ID
        target_mask[i, : g.k + 1] = 1.0
    return Batch(ids, lengths, labels, adj_aug, cgt_tok, targets, target_mask, graphs)


def _encode_and_fuse(model: Model, batch: Batch, style_labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """SGT with the given style labels, then cross-graph fusion with the source."""
    mc = model.config.model
    nodes0 = gather_rows(model.embedding, batch.ids)
    encoded = sgt_encode(nodes0, batch.adj_aug_sgt, style_labels, model.sgt, mc)
    fused = cgt_decode_nodes(encoded, nodes0, batch.adj_cgt, model.cgt, mc)
    return encoded, fused


def _teacher_nll(model: Model, batch: Batch, fused: Tensor) -> Tensor:
    h = encode_nodes(fused, model.rephraser.encoder, batch.lengths)
    logits = decode_teacher_forced(h, batch.targets, model.embedding, model.rephraser, nodes=fused)
    ce = cross_entropy_with_logits(logits, batch.targets) * constant(batch.target_mask)
    return ce.sum(axis=1).mean()


def reconstruction_loss(model: Model, batch: Batch) -> Tensor:
    """Mean per-sentence teacher-forced NLL of reproducing the own-style input."""
    _, fused = _encode_and_fuse(model, batch, batch.labels)
    return _teacher_nll(model, batch, fused)


def transfer_objective(
    model: Model,
    batch: Batch,
    tau: float,
    rng: np.random.Generator,
    variant: str = "full",
) -> tuple[Tensor, dict[str, float]]:
    """Phase (a) loss: reconstruction plus the two transfer signals.

    Classifier parameters are frozen inside the loss ops, so the backward
    pass reaches only the generator stack.
    """
    cfg = model.config
    _, fused_own = _encode_and_fuse(model, batch, batch.labels)
    l_rec = _teacher_nll(model, batch, fused_own)
    total = l_rec
    parts = {"l_rec": l_rec.item(), "lt_g": 0.0, "lt_s": 0.0}

    flip = 1 - batch.labels
    want_g = variant != "t-clas-s-only" and cfg.lambda_g > 0
    want_s = variant != "t-clas-g-only" and cfg.lambda_s > 0
    if want_g or want_s:
        enc_flip, fused_flip = _encode_and_fuse(model, batch, flip)
        if want_g:
            _, lt_g = graph_classifier_losses(
                model.dg, transferred_graphs=enc_flip, target_labels=flip, lengths=batch.lengths
            )
            parts["lt_g"] = lt_g.item()
            total = total + cfg.lambda_g * lt_g
        if want_s:
            h = encode_nodes(fused_flip, model.rephraser.encoder, batch.lengths)
            dec = decode_sample(
                h, model.embedding, model.rephraser, tau, rng=rng,
                max_len=cfg.max_decode_len, nodes=fused_flip,
            )
            _, lt_s = sentence_classifier_losses(
                model.ds, model.embedding, transferred=dec, target_labels=flip
            )
            parts["lt_s"] = lt_s.item()
            total = total + cfg.lambda_s * lt_s
    return total, parts


def classifier_objective(model: Model, batch: Batch, variant: str = "full") -> tuple[Tensor, dict[str, float]]:
    """Phase (b) loss: classifier cross-entropies on own-style material.

    The graphs and embeddings are produced without a tape, so the backward
    pass reaches only classifier parameters.
    """
    mc = model.config.model
    with no_grad():
        nodes0 = gather_rows(model.embedding, batch.ids)
        enc_own = sgt_encode(nodes0, batch.adj_aug_sgt, batch.labels, model.sgt, mc)
    lc_g, _ = graph_classifier_losses(
        model.dg, same_style_graphs=enc_own, true_labels=batch.labels, lengths=batch.lengths
    )
    lc_s, _ = sentence_classifier_losses(
        model.ds, model.embedding, real_ids=batch.ids, real_lengths=batch.lengths,
        true_labels=batch.labels,
    )
    parts = {"lc_g": lc_g.item(), "lc_s": lc_s.item()}
    if variant == "c-clas-g-only":
        total = lc_g
    elif variant == "c-clas-s-only":
        total = lc_s
    else:
        total = lc_g + lc_s
    return total, parts


# -- inference ---------------------------------------------------------------------


def transfer_batch(
    model: Model, graphs: list[LinguisticGraph], target_styles, batch_size: int = 32
) -> list[list[str]]:
    """Greedy style transfer for a list of sentences; deterministic."""
    styles = np.asarray(target_styles, dtype=np.int64)
    if styles.ndim == 0:
        styles = np.repeat(styles, len(graphs))
    if np.any((styles < 0) | (styles > 1)):
        raise ValueError("target styles must be 0 or 1")
    vocab = model.vocab
    out: list[list[str]] = []
    with no_grad():
        for lo in range(0, len(graphs), batch_size):
            chunk = graphs[lo : lo + batch_size]
            chunk_styles = styles[lo : lo + batch_size]
            batch = make_batch([(g, 0) for g in chunk], model.config)
            _, fused = _encode_and_fuse(model, batch, chunk_styles)
            h = encode_nodes(fused, model.rephraser.encoder, batch.lengths)
            ids, lengths = decode_greedy(
                h, model.embedding, model.rephraser, model.config.max_decode_len, nodes=fused
            )
            for row, ln in zip(ids, lengths):
                toks = [vocab.token_of(int(t)) for t in row[:ln] if int(t) != EOS_ID]
                out.append(toks)
    return out


def transfer(model: Model, graph: LinguisticGraph, target_style: int) -> list[str]:
    """Transfer one sentence to the target style (greedy decoding)."""
    if target_style not in (0, 1):
        raise ValueError(f"target style must be 0 or 1, got {target_style!r}")
    return transfer_batch(model, [graph], np.array([target_style]))[0]


def reconstruction_accuracy(model: Model, corpus: list[tuple[LinguisticGraph, int]]) -> float:
    """Positional token accuracy of same-style greedy reconstruction."""
    graphs = [g for g, _ in corpus]
    labels = [s for _, s in corpus]
    outs = transfer_batch(model, graphs, np.array(labels))
    hit = total = 0
    for g, toks in zip(graphs, outs):
        total += g.k
        hit += sum(1 for i in range(min(g.k, len(toks))) if toks[i] == g.tokens[i])
    return hit / max(total, 1)


def proxy_transfer_stats(model: Model, corpus: list[tuple[LinguisticGraph, int]]) -> tuple[float, float]:
    """(transfer accuracy by the in-training D_s, source-token overlap).

    Both are measured on greedy flipped-style decodes; overlap is the mean
    fraction of source tokens still present in the output, a cheap
    label-free proxy for content preservation.
    """
    graphs = [g for g, _ in corpus]
    flip = 1 - np.array([s for _, s in corpus], dtype=np.int64)
    outs = transfer_batch(model, graphs, flip)
    overlaps = []
    for g, toks in zip(graphs, outs):
        out_set = set(toks)
        overlaps.append(sum(1 for t in g.tokens if t in out_set) / g.k)
    hits = 0
    with no_grad():
        for lo in range(0, len(outs), 64):
            chunk = outs[lo : lo + 64]
            tgt = flip[lo : lo + 64]
            k_max = max(max((len(t) for t in chunk), default=1), 1)
            ids = np.zeros((len(chunk), k_max), dtype=np.int64)
            lens = np.zeros(len(chunk), dtype=np.int64)
            for i, toks in enumerate(chunk):
                enc = model.vocab.encode(toks) if toks else np.array([EOS_ID])
                ids[i, : len(enc)] = enc
                lens[i] = max(len(enc), 1)
            x = gather_rows(model.embedding, ids)
            logits = textcnn_forward(x, model.ds, lens)
            hits += int((logits.argmax(-1) == tgt).sum())
    return hits / max(len(outs), 1), float(np.mean(overlaps)) if overlaps else 0.0


def proxy_transfer_accuracy(model: Model, corpus: list[tuple[LinguisticGraph, int]]) -> float:
    return proxy_transfer_stats(model, corpus)[0]


def classifier_accuracies(model: Model, corpus: list[tuple[LinguisticGraph, int]]) -> tuple[float, float]:
    """(graph classifier, sentence classifier) accuracy on own-style material."""
    hits_g = hits_s = total = 0
    cfg = model.config
    with no_grad():
        for lo in range(0, len(corpus), 64):
            batch = make_batch(corpus[lo : lo + 64], cfg)
            nodes0 = gather_rows(model.embedding, batch.ids)
            enc = sgt_encode(nodes0, batch.adj_aug_sgt, batch.labels, model.sgt, cfg.model)
            pg = textcnn_forward(enc, model.dg, batch.lengths).argmax(-1)
            ps = textcnn_forward(nodes0, model.ds, batch.lengths).argmax(-1)
            hits_g += int((pg == batch.labels).sum())
            hits_s += int((ps == batch.labels).sum())
            total += len(batch.graphs)
    return hits_g / max(total, 1), hits_s / max(total, 1)


# -- the training loop -------------------------------------------------------------


class Trainer:
    """Owns optimizers, RNG streams, and the temperature schedule."""

    def __init__(self, model: Model, loss_variant: str = "full",
                 opt_state: dict | None = None):
        if loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {loss_variant!r}")
        self.model = model
        self.variant = loss_variant
        cfg = model.config
        _, self.shuffle_rng, self.gumbel_rng = seeded_streams(cfg.seed, 3)
        self.opt_gen = Adam(model.generator_params(), cfg.learning_rate)
        self.opt_cls = Adam(model.classifier_params(), cfg.learning_rate)
        self.train_epochs_done = 0
        if opt_state:
            self._load_opt_state(opt_state)

    @property
    def tau(self) -> float:
        cfg = self.model.config
        return max(cfg.tau_floor, cfg.tau_start * cfg.tau_anneal**self.train_epochs_done)

    def _batches(self, corpus: list[tuple[LinguisticGraph, int]]):
        cfg = self.model.config
        order = self.shuffle_rng.permutation(len(corpus))
        for lo in range(0, len(corpus), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            yield make_batch([corpus[i] for i in idx], cfg)

    def _generator_step(self, batch: Batch, warmup: bool) -> dict[str, float]:
        self.model.zero_grad()
        if warmup:
            loss = reconstruction_loss(self.model, batch)
            parts = {"l_rec": loss.item(), "lt_g": 0.0, "lt_s": 0.0}
        else:
            loss, parts = transfer_objective(self.model, batch, self.tau, self.gumbel_rng, self.variant)
        loss.backward()
        self.opt_gen.step()
        self.model.zero_grad()
        return parts

    def _classifier_step(self, batch: Batch) -> dict[str, float]:
        self.model.zero_grad()
        loss, parts = classifier_objective(self.model, batch, self.variant)
        loss.backward()
        self.opt_cls.step()
        self.model.zero_grad()
        return parts

    def _epoch(self, corpus, warmup: bool) -> dict[str, float]:
        cfg = self.model.config
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        steps = 0
        if cfg.alternation == "minibatch":
            for batch in self._batches(corpus):
                for k, v in self._generator_step(batch, warmup).items():
                    sums[k] += v
                for k, v in self._classifier_step(batch).items():
                    sums[k] += v
                steps += 1
        else:
            for batch in self._batches(corpus):
                for k, v in self._generator_step(batch, warmup).items():
                    sums[k] += v
                steps += 1
            for batch in self._batches(corpus):
                for k, v in self._classifier_step(batch).items():
                    sums[k] += v
        if steps == 0:
            raise ValueError("corpus produced no batches")
        return {k: sums[k] / steps for k in LOSS_KEYS}

    def warmup_epoch(self, corpus) -> dict[str, float]:
        return self._epoch(corpus, warmup=True)

    def train_epoch(self, corpus) -> dict[str, float]:
        losses = self._epoch(corpus, warmup=False)
        self.train_epochs_done += 1  # anneal takes effect at epoch end
        return losses

    def fit(self, train, dev, log_path: str | Path | None = None) -> list[dict]:
        """Warm-up epochs, then training epochs with early stopping.

        The early-stopping score is validation reconstruction loss minus the
        proxy transfer accuracy and the source-token overlap of flipped
        decodes (lower is better); the best parameters are restored into the
        model before returning.
        """
        cfg = self.model.config
        history: list[dict] = []
        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for _ in range(cfg.warmup_epochs):
                tau_now = self.tau
                losses = self.warmup_epoch(train)
                dg_acc, ds_acc = classifier_accuracies(self.model, dev)
                rec = {
                    "epoch": self.model.epoch,
                    "phase": "warmup",
                    "losses": losses,
                    "tau": tau_now,
                    "dev": {
                        "recon_acc": reconstruction_accuracy(self.model, dev),
                        "dg_acc": dg_acc,
                        "ds_acc": ds_acc,
                    },
                }
                self._log(rec, history, log_fh)
                self.model.epoch += 1
            best_score = None
            best_state = None
            stale = 0
            for _ in range(cfg.train_epochs):
                tau_now = self.tau
                losses = self.train_epoch(train)
                val_rec = self._dev_reconstruction(dev)
                tacc, overlap = proxy_transfer_stats(self.model, dev)
                score = val_rec - tacc - overlap
                rec = {
                    "epoch": self.model.epoch,
                    "phase": "train",
                    "losses": losses,
                    "tau": tau_now,
                    "dev": {
                        "recon_acc": reconstruction_accuracy(self.model, dev),
                        "val_rec": val_rec,
                        "transfer_acc": tacc,
                        "transfer_overlap": overlap,
                        "score": score,
                    },
                }
                self._log(rec, history, log_fh)
                self.model.epoch += 1
                if best_score is None or score < best_score:
                    best_score, best_state, stale = score, self.model.snapshot(), 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
            if best_state is not None:
                self.model.restore(best_state)
        finally:
            if log_fh:
                log_fh.close()
        return history

    def _dev_reconstruction(self, dev) -> float:
        cfg = self.model.config
        total = 0.0
        n = 0
        with no_grad():
            for lo in range(0, len(dev), cfg.batch_size):
                batch = make_batch(dev[lo : lo + cfg.batch_size], cfg)
                total += reconstruction_loss(self.model, batch).item() * len(batch.graphs)
                n += len(batch.graphs)
        return total / max(n, 1)

    @staticmethod
    def _log(rec: dict, history: list, fh) -> None:
        history.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

    # -- optimizer state (for resume) --

    def opt_state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        arrays: dict[str, np.ndarray] = {}
        steps: dict[str, int] = {}
        for group, opt in (("gen", self.opt_gen), ("cls", self.opt_cls)):
            for name, st in opt.state.items():
                arrays[f"adam.{group}.{name}.m"] = st.m
                arrays[f"adam.{group}.{name}.v"] = st.v
                steps[f"{group}.{name}"] = st.t
        return arrays, steps

    def _load_opt_state(self, opt_state: dict) -> None:
        arrays, steps = opt_state["arrays"], opt_state["steps"]
        for group, opt in (("gen", self.opt_gen), ("cls", self.opt_cls)):
            for name, st in opt.state.items():
                key = f"adam.{group}.{name}"
                if f"{key}.m" in arrays:
                    st.m = arrays[f"{key}.m"].copy()
                    st.v = arrays[f"{key}.v"].copy()
                    st.t = int(steps[f"{group}.{name}"])
        self.train_epochs_done = int(opt_state.get("train_epochs_done", 0))


# -- checkpoint files ------------------------------------------------------------


def _config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    mc = d.pop("model")
    return TrainConfig(model=ModelConfig(**mc), **d)


def save_checkpoint(model: Model, path: str | Path, trainer: Trainer | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, raw payload, sha256.

    The payload keeps each parameter in its native float width
    (little-endian), so a save/load round trip is bit-exact.
    """
    named = {name: p.data for name, p in model.named_parameters().items()}
    extra: dict = {"train_epochs_done": 0}
    if trainer is not None:
        arrays, steps = trainer.opt_state_arrays()
        named.update(arrays)
        extra = {"adam_steps": steps, "train_epochs_done": trainer.train_epochs_done}
    manifest = []
    offset = 0
    for name, arr in named.items():
        manifest.append([name, list(arr.shape), offset])
        offset += arr.size
    header = {
        "format_version": CKPT_VERSION,
        "kind": "model",
        "dtype": model.config.dtype,
        "config": _config_to_dict(model.config),
        "vocab_sha256": model.vocab.sha256(),
        "vocab_size": len(model.vocab),
        "epoch": model.epoch,
        "manifest": manifest,
        **extra,
    }
    _write_payload(path, header, named, model.config.np_dtype)


def _write_payload(path, header: dict, named: dict[str, np.ndarray], np_dtype) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    width = "<f8" if np_dtype == np.float64 else "<f4"
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for arr in named.values():
        blob += np.ascontiguousarray(arr).astype(width, copy=False).tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def read_payload(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validate and parse a checkpoint file; raises CheckpointError on damage."""
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    if body[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (hlen,) = struct.unpack("<I", body[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 4])
    hstart = len(CKPT_MAGIC) + 4
    header = json.loads(body[hstart : hstart + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    width = "<f8" if header["dtype"] == "f64" else "<f4"
    itemsize = 8 if header["dtype"] == "f64" else 4
    payload = body[hstart + hlen :]
    arrays = {}
    for name, shape, offset in header["manifest"]:
        size = int(np.prod(shape)) if shape else 1
        start = offset * itemsize
        chunk = payload[start : start + size * itemsize]
        if len(chunk) != size * itemsize:
            raise CheckpointError(f"{path}: payload truncated at {name}")
        arrays[name] = np.frombuffer(chunk, dtype=width).reshape(shape).copy()
    return header, arrays


def load_checkpoint(path: str | Path, vocab: Vocab) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; the vocab hash must match."""
    header, arrays = read_payload(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    if header["vocab_sha256"] != vocab.sha256():
        raise CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {header['vocab_sha256'][:12]}..., "
            f"dataset {vocab.sha256()[:12]}...)"
        )
    config = config_from_dict(header["config"])
    model = Model(vocab, config)
    model.epoch = int(header["epoch"])
    for name, p in model.named_parameters().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: parameter {name} missing from checkpoint")
        if tuple(arrays[name].shape) != p.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name]
    opt_state = {
        "arrays": {k: v for k, v in arrays.items() if k.startswith("adam.")},
        "steps": header.get("adam_steps", {}),
        "train_epochs_done": header.get("train_epochs_done", 0),
    }
    return model, opt_state
