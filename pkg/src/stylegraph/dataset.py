"""Dataset preparation and loading: vocab, length filtering, splits.

A prepared dataset directory holds vocab.txt, {train,dev,test}.jsonl and
dataset.json (flags and counts).  Records keep raw tokens and heads, so a
reload re-encodes them bit-identically under the stored flags.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import (
    DEFAULT_MAX_LEN,
    DEFAULT_MIN_COUNT,
    LinguisticGraph,
    Vocab,
    build_vocab,
    filter_and_encode,
    load_conllu,
    read_corpus_jsonl,
    write_corpus_jsonl,
)

SPLIT_NAMES = ("train", "dev", "test")


class DataError(ValueError):
    """Input files are missing, inconsistent, or yield no usable sentences."""


@dataclass
class Dataset:
    vocab: Vocab
    splits: dict[str, list[tuple[LinguisticGraph, int]]]
    meta: dict
    sha256: str

    def pairs(self, split: str) -> list[tuple[list[str], int]]:
        """(tokens, style) view of a split, for classifier/lexicon training."""
        return [(list(g.tokens), s) for g, s in self.splits[split]]


def _merge_sources(corpus_paths: list[str], conllu_paths: list[str]) -> list[dict]:
    """Join corpus records with their parses; heads may ride along in the JSONL."""
    if conllu_paths and len(conllu_paths) != len(corpus_paths):
        raise DataError(
            f"{len(corpus_paths)} corpus files but {len(conllu_paths)} parse files"
        )
    records: list[dict] = []
    for i, cpath in enumerate(corpus_paths):
        if not Path(cpath).exists():
            raise DataError(f"corpus file not found: {cpath}")
        recs = read_corpus_jsonl(cpath)
        if conllu_paths:
            ppath = conllu_paths[i]
            if not Path(ppath).exists():
                raise DataError(f"parse file not found: {ppath}")
            parses = load_conllu(ppath)
            if len(parses) != len(recs):
                raise DataError(
                    f"{cpath}: {len(recs)} records but {ppath} has {len(parses)} sentences"
                )
            for rec, (ptoks, heads) in zip(recs, parses):
                toks = [t.lower() for t in rec["tokens"]]
                if toks != ptoks:
                    raise DataError(
                        f"{cpath}: tokens disagree with parse for sentence "
                        f"{' '.join(toks)!r}"
                    )
                rec["tokens"] = toks
                rec["heads"] = heads
        else:
            for rec in recs:
                if "heads" not in rec:
                    raise DataError(f"{cpath}: records carry no heads and no parse file given")
                rec["tokens"] = [t.lower() for t in rec["tokens"]]
        records.extend(recs)
    return records


def prepare_dataset(
    corpus_paths: list[str],
    conllu_paths: list[str],
    out_dir: str | Path,
    seed: int = 0,
    min_count: int = DEFAULT_MIN_COUNT,
    max_len: int = DEFAULT_MAX_LEN,
    split_ratios: tuple[float, float, float] = (0.9, 0.05, 0.05),
    symmetrize: bool = True,
    self_loops: bool = True,
) -> dict:
    """Build vocab + encoded splits; returns the dataset.json metadata."""
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {split_ratios}")
    records = _merge_sources(corpus_paths, conllu_paths)
    kept = [r for r in records if 0 < len(r["tokens"]) <= max_len]
    rejected = len(records) - len(kept)
    if not kept:
        raise DataError("no sentences survived the length filter")
    vocab = build_vocab((r["tokens"] for r in kept), min_count=min_count)

    # stratify per style so the splits stay balanced
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    splits: dict[str, list[dict]] = {name: [] for name in SPLIT_NAMES}
    for style in (0, 1):
        idx = [i for i, r in enumerate(kept) if r["style"] == style]
        order = rng.permutation(len(idx))
        n = len(idx)
        n_train = int(split_ratios[0] * n)
        n_dev = int(split_ratios[1] * n)
        for pos, j in enumerate(order):
            name = "train" if pos < n_train else ("dev" if pos < n_train + n_dev else "test")
            splits[name].append(kept[idx[j]])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    for name in SPLIT_NAMES:
        write_corpus_jsonl(
            out / f"{name}.jsonl",
            ({"tokens": r["tokens"], "heads": r["heads"], "style": r["style"]} for r in splits[name]),
        )
    meta = {
        "min_count": min_count,
        "max_len": max_len,
        "symmetrize": symmetrize,
        "self_loops": self_loops,
        "seed": seed,
        "split_ratios": list(split_ratios),
        "counts": {name: len(splits[name]) for name in SPLIT_NAMES},
        "rejected_overlength_or_empty": rejected,
        "vocab_size": len(vocab),
        "vocab_sha256": vocab.sha256(),
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return meta


def dataset_sha256(dataset_dir: str | Path) -> str:
    h = hashlib.sha256()
    for name in ("vocab.txt", "train.jsonl", "dev.jsonl", "test.jsonl", "dataset.json"):
        h.update(name.encode())
        h.update(Path(dataset_dir, name).read_bytes())
    return h.hexdigest()


def load_dataset(dataset_dir: str | Path) -> Dataset:
    root = Path(dataset_dir)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{dataset_dir}: not a prepared dataset (dataset.json missing)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    vocab = Vocab.load(root / "vocab.txt")
    splits: dict[str, list[tuple[LinguisticGraph, int]]] = {}
    for name in SPLIT_NAMES:
        entries = []
        for rec in read_corpus_jsonl(root / f"{name}.jsonl"):
            g = filter_and_encode(
                rec["tokens"],
                rec["heads"],
                vocab,
                max_len=meta["max_len"],
                symmetrize=meta["symmetrize"],
                self_loops=meta["self_loops"],
            )
            if g is None:
                raise DataError(f"{dataset_dir}/{name}.jsonl: record fails its own filters")
            entries.append((g, int(rec["style"])))
        splits[name] = entries
    return Dataset(vocab=vocab, splits=splits, meta=meta, sha256=dataset_sha256(root))
