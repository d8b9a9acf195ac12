"""Linguistic graphs from dependency parses: vocab, CoNLL-U ingestion, adjacency.

The dependency parser itself is external; this module consumes its standard
CoNLL-U output and turns each sentence into a token-id sequence plus a
binarized k-by-k adjacency matrix.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

DEFAULT_MIN_COUNT = 5
DEFAULT_MAX_LEN = 15


class ConlluParseError(ValueError):
    """Malformed CoNLL-U input; carries the offending line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class TreeStructureError(ValueError):
    """Head indices do not form a valid dependency tree."""


class Vocab:
    """Token<->id bijection with reserved pad/unk/bos/eos slots.

    Ids are assigned frequency-descending with lexicographic tie-breaking,
    so construction is deterministic across runs.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError(f"first four vocab entries must be {RESERVED}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def content_tokens(self) -> list[str]:
        """Vocabulary without the reserved symbols."""
        return self.tokens[4:]

    def sha256(self) -> str:
        h = hashlib.sha256()
        for t in self.tokens:
            h.update(t.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return Vocab(lines)


def build_vocab(corpora: Iterable[Sequence[str]], min_count: int = DEFAULT_MIN_COUNT) -> Vocab:
    """Count tokens over all sentences; drop those seen fewer than min_count times."""
    counts: Counter[str] = Counter()
    n_sent = 0
    for sent in corpora:
        n_sent += 1
        counts.update(sent)
    if n_sent == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def load_conllu(path: str | Path) -> list[tuple[list[str], list[int]]]:
    """Read CoNLL-U sentences as (lowercased surface tokens, 1-based heads).

    Multiword ranges (``1-2``) and empty nodes (``1.1``) are skipped.  Head
    bounds and tree structure are validated per sentence.
    """
    sentences: list[tuple[list[str], list[int]]] = []
    tokens: list[str] = []
    heads: list[int] = []

    def flush(line_no: int) -> None:
        if tokens:
            try:
                validate_tree(heads)
            except TreeStructureError as e:
                raise TreeStructureError(f"sentence ending at line {line_no}: {e}") from None
            sentences.append((tokens.copy(), heads.copy()))
            tokens.clear()
            heads.clear()

    with open(path, "r", encoding="utf-8") as fh:
        line_no = 0
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush(line_no)
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ConlluParseError(f"expected 10 tab-separated columns, got {len(cols)}", line_no)
            tok_id = cols[0]
            if "-" in tok_id or "." in tok_id:
                continue  # multiword range / empty node
            try:
                idx = int(tok_id)
            except ValueError:
                raise ConlluParseError(f"bad token id {tok_id!r}", line_no) from None
            if idx != len(tokens) + 1:
                raise ConlluParseError(f"token id {idx} out of sequence", line_no)
            try:
                head = int(cols[6])
            except ValueError:
                raise ConlluParseError(f"bad head index {cols[6]!r}", line_no) from None
            tokens.append(cols[1].lower())
            heads.append(head)
        flush(line_no)
    return sentences


def validate_tree(heads: Sequence[int]) -> None:
    """Heads must form a single-rooted tree: 0 appears once, no cycles, in bounds."""
    k = len(heads)
    roots = [i for i, h in enumerate(heads) if h == 0]
    for i, h in enumerate(heads):
        if h < 0 or h > k:
            raise TreeStructureError(f"token {i + 1} has head {h} outside [0, {k}]")
        if h == i + 1:
            raise TreeStructureError(f"token {i + 1} is its own head")
    if len(roots) != 1:
        raise TreeStructureError(f"expected exactly one root, found {len(roots)}")
    # children lists; BFS from the root must reach everything (rules out cycles)
    children: list[list[int]] = [[] for _ in range(k + 1)]
    for i, h in enumerate(heads):
        children[h].append(i + 1)
    seen = set()
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for c in children[node]:
            if c in seen:
                raise TreeStructureError("cyclic head assignment")
            seen.add(c)
            frontier.append(c)
    if len(seen) != k:
        raise TreeStructureError("cyclic head assignment")


def build_adjacency(heads: Sequence[int], symmetrize: bool = True, self_loops: bool = True) -> np.ndarray:
    """Binarized k-by-k adjacency from 1-based head indices (0 = root)."""
    validate_tree(heads)
    k = len(heads)
    adj = np.zeros((k, k), dtype=np.int8)
    for i, h in enumerate(heads):
        if h > 0:
            adj[i, h - 1] = 1
    if symmetrize:
        adj = np.maximum(adj, adj.T)
    if self_loops:
        np.fill_diagonal(adj, 1)
    return adj


class StyleAugmentedAdjacency(np.ndarray):
    """Marker type for adjacency matrices that already carry a style node."""


def augment_with_style_node(adjacency: np.ndarray) -> StyleAugmentedAdjacency:
    """Append the global style node: new row/column of ones (corner included).

    The result is tagged so that augmenting twice is rejected (a plain
    content-based check would misfire on graphs whose last node happens to
    be fully connected).
    """
    if isinstance(adjacency, StyleAugmentedAdjacency):
        raise ValueError("adjacency already carries a style node")
    adjacency = np.asarray(adjacency)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adjacency.shape}")
    k = adjacency.shape[0]
    out = np.ones((k + 1, k + 1), dtype=np.int8)
    out[:k, :k] = adjacency
    return out.view(StyleAugmentedAdjacency)


@dataclass(frozen=True)
class LinguisticGraph:
    """One sentence as a graph: token ids plus binarized adjacency."""

    token_ids: np.ndarray
    adjacency: np.ndarray
    heads: tuple[int, ...]
    tokens: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.heads)


@dataclass
class StyledCorpus:
    """All sentences of one style, sharing a single vocabulary."""

    graphs: list[LinguisticGraph]
    style: int

    def __len__(self) -> int:
        return len(self.graphs)


def filter_and_encode(
    tokens: Sequence[str],
    heads: Sequence[int],
    vocab: Vocab,
    max_len: int = DEFAULT_MAX_LEN,
    symmetrize: bool = True,
    self_loops: bool = True,
) -> LinguisticGraph | None:
    """Encode one sentence, or return None when length filters reject it."""
    k = len(tokens)
    if k == 0 or k > max_len:
        return None
    if len(heads) != k:
        raise ValueError(f"{k} tokens but {len(heads)} heads")
    adjacency = build_adjacency(heads, symmetrize=symmetrize, self_loops=self_loops)
    return LinguisticGraph(
        token_ids=vocab.encode(tokens),
        adjacency=adjacency,
        heads=tuple(int(h) for h in heads),
        tokens=tuple(tokens),
    )


# -- corpus files (one JSON object per line) -----------------------------------


def read_corpus_jsonl(path: str | Path) -> list[dict]:
    """Records with "tokens" (list of str) and "style" (0/1); "heads" optional."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {line_no}: invalid JSON ({e})") from None
            if "tokens" not in rec or "style" not in rec:
                raise ValueError(f"{path}: line {line_no}: record needs 'tokens' and 'style'")
            if rec["style"] not in (0, 1):
                raise ValueError(f"{path}: line {line_no}: style must be 0 or 1")
            records.append(rec)
    return records


def write_corpus_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
