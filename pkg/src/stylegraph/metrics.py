"""Automatic evaluation: transfer accuracy, style EMD, masked WMD, BLEU.

The evaluation classifier is a separately trained TextCNN held fixed for
all scoring.  Content preservation is measured by word mover's distance
with style-lexicon tokens masked out of both sides, solved as an exact
optimal-transport problem (sentences are at most 15 tokens, so the linear
programs are tiny).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .autodiff import Tensor, cross_entropy_with_logits, gather_rows, no_grad, softmax, tmean
from .classifiers import TextCNNParams, textcnn_forward
from .graphs import Vocab
from .nn import init_embedding, named_tensors
from .optim import Adam
from .trainer import read_payload, _write_payload, CheckpointError, seeded_streams

REPORT_MARKER = "# --- machine-readable records below ---"


# -- evaluation classifier ------------------------------------------------------


class EvalClassifier:
    """TextCNN over hard tokens, trained once and then held fixed."""

    def __init__(self, vocab: Vocab, emb: Tensor, cnn: TextCNNParams, meta: dict | None = None):
        self.vocab = vocab
        self.emb = emb
        self.cnn = cnn
        self.meta = meta or {}

    def _params(self) -> dict[str, Tensor]:
        out = {"emb.table": self.emb}
        out.update(named_tensors(self.cnn, "cnn"))
        return out

    def posteriors(self, token_lists: list[list[str]]) -> np.ndarray:
        """Class posteriors [N, 2] from softmaxed logits."""
        out = np.zeros((len(token_lists), 2))
        with no_grad():
            for lo in range(0, len(token_lists), 64):
                chunk = token_lists[lo : lo + 64]
                ids, lens = _pad_token_ids(chunk, self.vocab)
                logits = textcnn_forward(gather_rows(self.emb, ids), self.cnn, lens)
                out[lo : lo + len(chunk)] = softmax(logits, axis=-1).data
        return out

    def predict(self, token_lists: list[list[str]]) -> np.ndarray:
        return self.posteriors(token_lists).argmax(axis=-1)

    def save(self, path: str | Path) -> None:
        named = {name: p.data for name, p in self._params().items()}
        manifest = []
        offset = 0
        for name, arr in named.items():
            manifest.append([name, list(arr.shape), offset])
            offset += arr.size
        header = {
            "format_version": 1,
            "kind": "eval_classifier",
            "dtype": "f64",
            "vocab_sha256": self.vocab.sha256(),
            "meta": self.meta,
            "manifest": manifest,
        }
        _write_payload(path, header, named, np.float64)

    @staticmethod
    def load(path: str | Path, vocab: Vocab) -> "EvalClassifier":
        header, arrays = read_payload(path)
        if header.get("kind") != "eval_classifier":
            raise CheckpointError(f"{path}: not an eval-classifier file")
        if header["vocab_sha256"] != vocab.sha256():
            raise CheckpointError(f"{path}: vocabulary hash mismatch")
        meta = header.get("meta", {})
        d = int(meta.get("d", 64))
        maps = int(meta.get("feature_maps", 16))
        rng = np.random.default_rng(0)
        clf = EvalClassifier(
            vocab,
            init_embedding(rng, (len(vocab), d)),
            TextCNNParams.create(rng, d, maps),
            meta,
        )
        for name, p in clf._params().items():
            p.data = arrays[name]
        return clf


def _pad_token_ids(token_lists: list[list[str]], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    k_max = max(max((len(t) for t in token_lists), default=1), 1)
    ids = np.zeros((len(token_lists), k_max), dtype=np.int64)
    lens = np.ones(len(token_lists), dtype=np.int64)
    for i, toks in enumerate(token_lists):
        if toks:
            enc = vocab.encode(toks)
            ids[i, : len(enc)] = enc
            lens[i] = len(enc)
    return ids, lens


def train_eval_classifier(
    corpus: list[tuple[list[str], int]],
    vocab: Vocab,
    seed: int = 0,
    epochs: int = 8,
    d: int = 64,
    feature_maps: int = 16,
    batch_size: int = 32,
    learning_rate: float = 2e-3,
) -> EvalClassifier:
    """Supervised training on hard tokens; deterministic given the seed.

    Parameters are freshly initialized here, so the result never shares
    state with the in-training sentence classifier.
    """
    init_rng, shuffle_rng, _ = seeded_streams(seed, 3)
    clf = EvalClassifier(
        vocab,
        init_embedding(init_rng, (len(vocab), d)),
        TextCNNParams.create(init_rng, d, feature_maps),
        meta={"d": d, "feature_maps": feature_maps, "seed": seed, "epochs": epochs},
    )
    params = clf._params()
    opt = Adam(params, learning_rate)
    labels_all = np.array([s for _, s in corpus], dtype=np.int64)
    for _ in range(epochs):
        order = shuffle_rng.permutation(len(corpus))
        for lo in range(0, len(corpus), batch_size):
            idx = order[lo : lo + batch_size]
            ids, lens = _pad_token_ids([corpus[i][0] for i in idx], vocab)
            loss = tmean(
                cross_entropy_with_logits(
                    textcnn_forward(gather_rows(clf.emb, ids), clf.cnn, lens), labels_all[idx]
                )
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            opt.zero_grad()
    return clf


def accuracy(outputs: list[list[str]], target_labels, classifier: EvalClassifier) -> float:
    """Fraction of outputs the fixed classifier assigns to the target style."""
    if len(outputs) == 0:
        raise ValueError("cannot compute accuracy over an empty set")
    preds = classifier.predict(outputs)
    return float((preds == np.asarray(target_labels)).mean())


def transfer_emd(input_posteriors, output_posteriors, target_labels) -> float:
    """Mean two-bin earth mover's distance, direction-corrected.

    Per sentence this is |p_target(out) - p_target(in)| clamped to 0 when the
    target-class probability decreased.
    """
    p_in = np.asarray(input_posteriors)
    p_out = np.asarray(output_posteriors)
    t = np.asarray(target_labels, dtype=np.int64)
    if p_in.shape != p_out.shape or len(t) != p_in.shape[0]:
        raise ValueError("posterior/label shapes disagree")
    rows = np.arange(len(t))
    delta = p_out[rows, t] - p_in[rows, t]
    return float(np.maximum(delta, 0.0).mean())


# -- style lexicon ----------------------------------------------------------------


@dataclass
class StyleLexicon:
    """Style-bearing tokens and their fitted weights."""

    tokens: frozenset[str]
    weights: dict[str, float] = field(default_factory=dict)

    def __contains__(self, token: str) -> bool:
        return token in self.tokens

    def save(self, path: str | Path) -> None:
        payload = {"tokens": sorted(self.tokens), "weights": self.weights}
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "StyleLexicon":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return StyleLexicon(frozenset(payload["tokens"]), dict(payload["weights"]))


def build_style_lexicon(
    corpus: list[tuple[list[str], int]],
    vocab: Vocab,
    top_fraction: float = 0.10,
    cap: int = 200,
    seed: int = 0,
    l2: float = 1e-4,
    epochs: int = 200,
    learning_rate: float = 0.5,
) -> StyleLexicon:
    """Fit a bag-of-words logistic regressor; keep the top |weight| tokens.

    Deterministic: zero init plus full-batch gradient descent (the seed is
    accepted for interface stability but nothing here draws from it).
    """
    features = vocab.content_tokens
    if not features:
        raise ValueError("vocabulary has no content tokens")
    col = {t: j for j, t in enumerate(features)}
    x = np.zeros((len(corpus), len(features)))
    y = np.zeros(len(corpus))
    for i, (tokens, style) in enumerate(corpus):
        y[i] = style
        for t in tokens:
            j = col.get(t)
            if j is not None:
                x[i, j] += 1.0
    w = np.zeros(len(features))
    b = 0.0
    n = len(corpus)
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        err = p - y
        w -= learning_rate * (x.T @ err / n + 2.0 * l2 * w)
        b -= learning_rate * float(err.mean())
    count = max(1, min(cap, int(top_fraction * len(features))))
    ranked = sorted(features, key=lambda t: (-abs(w[col[t]]), t))
    chosen = ranked[:count]
    return StyleLexicon(frozenset(chosen), {t: float(w[col[t]]) for t in chosen})


# -- word embeddings for WMD ---------------------------------------------------------


@dataclass
class WordEmbeddings:
    """Token vectors from a PPMI co-occurrence factorization (skip-gram style)."""

    tokens: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, token: str) -> np.ndarray:
        idx = self.index.get(token)
        if idx is None:
            idx = self.index.get("<unk>", 0)
        return self.matrix[idx]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, row in zip(self.tokens, self.matrix):
                fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def load(path: str | Path) -> "WordEmbeddings":
        tokens, rows = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                tokens.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
        return WordEmbeddings(tokens, np.array(rows))


def train_word_embeddings(
    sentences: list[list[str]], vocab: Vocab, dim: int = 50, window: int = 2
) -> WordEmbeddings:
    """Factorize the positive PMI co-occurrence matrix with a truncated SVD."""
    v = len(vocab)
    dim = min(dim, v)
    counts = np.zeros((v, v))
    for toks in sentences:
        ids = vocab.encode(toks)
        for i, a in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    counts[a, ids[j]] += 1.0
    total = counts.sum()
    if total == 0:
        raise ValueError("no co-occurrences found; corpus too small")
    row = counts.sum(axis=1, keepdims=True)
    colsum = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * colsum))
    pmi[~np.isfinite(pmi)] = 0.0
    ppmi = np.maximum(pmi, 0.0)
    u, s, _ = np.linalg.svd(ppmi, full_matrices=False)
    emb = u[:, :dim] * np.sqrt(s[:dim])
    return WordEmbeddings(list(vocab.tokens), emb)


# -- word mover's distance -----------------------------------------------------------


def exact_ot_cost(p: np.ndarray, q: np.ndarray, cost: np.ndarray) -> float:
    """Exact optimal transport between histograms p and q under `cost`."""
    m, n = cost.shape
    if p.shape != (m,) or q.shape != (n,):
        raise ValueError("histogram sizes do not match the cost matrix")
    a_rows = []
    for i in range(m):
        r = np.zeros((m, n))
        r[i, :] = 1.0
        a_rows.append(r.ravel())
    for j in range(n):
        r = np.zeros((m, n))
        r[:, j] = 1.0
        a_rows.append(r.ravel())
    a_eq = np.array(a_rows)[:-1]  # drop one redundant constraint
    b_eq = np.concatenate([p, q])[:-1]
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"optimal transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def _histogram(tokens: list[str]) -> list[tuple[str, float]]:
    c = Counter(tokens)
    total = sum(c.values())
    return sorted((t, cnt / total) for t, cnt in c.items())


def masked_wmd(
    source_tokens: list[str],
    output_tokens: list[str],
    lexicon: StyleLexicon,
    embeddings: WordEmbeddings,
) -> float | None:
    """Word mover's distance after removing lexicon tokens from both sides.

    Returns None when either side is empty after masking; callers report the
    skip count and exclude such sentences from the corpus mean.
    """
    src = [t for t in source_tokens if t not in lexicon]
    out = [t for t in output_tokens if t not in lexicon]
    if not src or not out:
        return None
    h_src = _histogram(src)
    h_out = _histogram(out)
    if h_src == h_out:
        return 0.0
    p = np.array([w for _, w in h_src])
    q = np.array([w for _, w in h_out])
    cost = np.zeros((len(h_src), len(h_out)))
    for i, (ts, _) in enumerate(h_src):
        vs = embeddings.vector(ts)
        for j, (to, _) in enumerate(h_out):
            cost[i, j] = float(np.linalg.norm(vs - embeddings.vector(to)))
    return exact_ot_cost(p, q, cost)


# -- BLEU ---------------------------------------------------------------------------


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[list[str]], references: list[list[str]]) -> float:
    """Corpus BLEU, 0-100: clipped n-gram precisions (n=1..4), geometric mean,
    brevity penalty; add-one smoothing on the n>=2 precisions for stability
    on tiny corpora."""
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("need equally many non-zero hypotheses and references")
    match = [0] * 5
    total = [0] * 5
    c_len = r_len = 0
    for hyp, ref in zip(hypotheses, references):
        c_len += len(hyp)
        r_len += len(ref)
        for n in range(1, 5):
            hg = _ngram_counts(hyp, n)
            rg = _ngram_counts(ref, n)
            total[n] += sum(hg.values())
            match[n] += sum(min(cnt, rg[g]) for g, cnt in hg.items())
    if total[1] == 0 or match[1] == 0:
        return 0.0
    log_p = math.log(match[1] / total[1])
    for n in range(2, 5):
        log_p += math.log((match[n] + 1.0) / (total[n] + 1.0))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p / 4.0)


# -- assembled report ------------------------------------------------------------------


@dataclass
class MetricReport:
    accu: float
    emd: float
    masked_wmd: float
    bleu: float
    skipped_empty_after_mask: int
    content_preservation: float
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "kind": "summary",
            "accu": self.accu,
            "emd": self.emd,
            "masked_wmd": self.masked_wmd,
            "bleu": self.bleu,
            "skipped_empty_after_mask": self.skipped_empty_after_mask,
            "content_preservation": self.content_preservation,
        }


def evaluate_run(
    sources: list[list[str]],
    outputs: list[list[str]],
    target_labels,
    classifier: EvalClassifier,
    lexicon: StyleLexicon,
    embeddings: WordEmbeddings,
) -> MetricReport:
    """Score one transfer run and keep a per-sentence breakdown."""
    if not (len(sources) == len(outputs) == len(target_labels)):
        raise ValueError("sources, outputs and labels must align")
    targets = np.asarray(target_labels, dtype=np.int64)
    post_in = classifier.posteriors(sources)
    post_out = classifier.posteriors(outputs)
    preds = post_out.argmax(axis=-1)
    accu = float((preds == targets).mean())
    emd = transfer_emd(post_in, post_out, targets)
    bleu = corpus_bleu(outputs, sources)

    wmds: list[float] = []
    skipped = 0
    preserved_hits = preserved_total = 0
    rows: list[dict] = []
    for i, (src, out) in enumerate(zip(sources, outputs)):
        w = masked_wmd(src, out, lexicon, embeddings)
        if w is None:
            skipped += 1
        else:
            wmds.append(w)
        content_src = [t for t in src if t not in lexicon]
        out_set = set(out)
        hits = sum(1 for t in content_src if t in out_set)
        preserved_hits += hits
        preserved_total += len(content_src)
        rows.append(
            {
                "kind": "row",
                "idx": i,
                "source": " ".join(src),
                "output": " ".join(out),
                "target": int(targets[i]),
                "p_target_in": float(post_in[i, targets[i]]),
                "p_target_out": float(post_out[i, targets[i]]),
                "masked_wmd": w,
                "content_preserved": hits / len(content_src) if content_src else None,
            }
        )
    return MetricReport(
        accu=accu,
        emd=emd,
        masked_wmd=float(np.mean(wmds)) if wmds else 0.0,
        bleu=bleu,
        skipped_empty_after_mask=skipped,
        content_preservation=preserved_hits / preserved_total if preserved_total else 0.0,
        rows=rows,
    )


def write_report(report: MetricReport, path: str | Path) -> None:
    lines = [
        "style transfer evaluation report",
        "================================",
        f"accu                  {report.accu:.4f}",
        f"emd                   {report.emd:.4f}",
        f"masked_wmd            {report.masked_wmd:.4f}"
        + (f"   ({report.skipped_empty_after_mask} sentences empty after masking, excluded)"
           if report.skipped_empty_after_mask else ""),
        f"bleu                  {report.bleu:.2f}",
        f"content_preservation  {report.content_preservation:.4f}",
        "naturalness (N-A/N-C/N-D): n/a (requires external pretrained models)",
        "bertscore: n/a (requires external pretrained models)",
        "",
        REPORT_MARKER,
        json.dumps(report.summary()),
    ]
    lines.extend(json.dumps(r) for r in report.rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> MetricReport:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        start = text.index(REPORT_MARKER)
    except ValueError:
        raise ValueError(f"{path}: no machine-readable section") from None
    records = [json.loads(line) for line in text[start + 1 :] if line.strip()]
    if not records or records[0].get("kind") != "summary":
        raise ValueError(f"{path}: malformed machine-readable section")
    summary, rows = records[0], records[1:]
    return MetricReport(
        accu=summary["accu"],
        emd=summary["emd"],
        masked_wmd=summary["masked_wmd"],
        bleu=summary["bleu"],
        skipped_empty_after_mask=summary["skipped_empty_after_mask"],
        content_preservation=summary["content_preservation"],
        rows=rows,
    )
