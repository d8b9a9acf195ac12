"""Deterministic synthetic two-style corpus with dependency parses.

Sentences come from fixed subject-verb-object frames (lengths 5-9).  Style
is carried entirely by a planted sentiment lexicon (disjoint positive and
negative adjective sets); every other word pool is shared between the two
styles and sampled in a balanced round-robin, so content words carry no
style signal.  Dependency heads are emitted directly from the frames -- no
external parser involved -- which makes the corpus a ground-truth fixture
for the lexicon and graph machinery.

Pool sizes are pinned so that, at the acceptance scale (500 sentences per
style, min_count 5), the corpus vocabulary has exactly 120 content tokens
and the planted lexicon is exactly the top 10% of them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .graphs import validate_tree

POSITIVE_WORDS = ("delicious", "wonderful", "friendly", "amazing", "fantastic", "lovely")
NEGATIVE_WORDS = ("awful", "terrible", "rude", "disgusting", "horrible", "bland")

NOUNS = (
    "food", "service", "staff", "pizza", "pasta", "coffee", "tea", "soup", "salad",
    "bread", "cheese", "sauce", "dessert", "cake", "menu", "place", "room", "table",
    "patio", "kitchen", "waiter", "chef", "owner", "crowd", "music", "lighting",
    "price", "portion", "flavor", "texture", "wine", "beer", "juice", "burger",
    "steak", "chicken", "fish", "rice", "noodles", "curry", "sandwich", "breakfast",
    "lunch", "dinner", "brunch", "plate", "bowl", "cup", "glass", "snack",
)
VERBS = (
    "served", "brought", "made", "cooked", "prepared", "offered", "delivered",
    "ordered", "shared", "tried", "tasted", "sampled", "bought", "chose", "picked",
    "found", "got", "had", "took", "kept", "mentioned", "described", "reviewed",
    "rated", "compared",
)
NEUTRAL_ADJS = (
    "local", "small", "large", "busy", "quiet", "old", "new", "nearby", "downtown",
    "outdoor", "seasonal", "daily", "simple", "plain", "usual",
)
ADVERBS = (
    "yesterday", "today", "recently", "again", "often", "usually", "sometimes",
    "always", "twice", "early", "late",
)
COPULAS = ("is", "was")
INTENSIFIERS = ("very", "really", "quite")

# Each template is (slot sequence, 1-based head indices); "style" slots hold
# the planted sentiment word, everything else is shared content.  Frames keep
# the number of high-entropy slots small so a desk-scale model can bind them.
TEMPLATES: tuple[tuple[tuple[str, ...], tuple[int, ...]], ...] = (
    (("the", "noun", "cop", "int", "style"), (2, 5, 5, 5, 0)),
    (("the", "noun", "cop", "style", "and", "nadj"), (2, 4, 4, 0, 6, 4)),
    (("the", "noun", "verb", "the", "style", "noun"), (2, 3, 0, 6, 6, 3)),
    (("the", "style", "noun", "verb", "the", "noun", "adv"), (3, 3, 4, 0, 6, 4, 4)),
    (("the", "noun", "cop", "int", "style", "and", "int", "nadj"), (2, 5, 5, 5, 0, 8, 8, 5)),
    (("the", "nadj", "noun", "and", "the", "noun", "cop", "int", "style"), (3, 3, 9, 6, 6, 3, 9, 9, 0)),
)

_POOLS = {
    "noun": NOUNS,
    "verb": VERBS,
    "nadj": NEUTRAL_ADJS,
    "adv": ADVERBS,
    "cop": COPULAS,
    "int": INTENSIFIERS,
}


def vocabulary_words() -> set[str]:
    """Every surface form the generator can emit."""
    words = {"the", "and"}
    for pool in _POOLS.values():
        words.update(pool)
    words.update(POSITIVE_WORDS)
    words.update(NEGATIVE_WORDS)
    return words


class _CyclicSampler:
    """Every pool item is used before any repeats; order reshuffles per cycle."""

    def __init__(self, pool: tuple[str, ...], rng: np.random.Generator):
        self.pool = list(pool)
        self.rng = rng
        self.queue: list[str] = []

    def draw(self) -> str:
        if not self.queue:
            self.queue = [self.pool[i] for i in self.rng.permutation(len(self.pool))]
        return self.queue.pop()


def generate_corpus(n_per_style: int, seed: int = 0) -> list[dict]:
    """Interleaved records {"tokens", "style", "heads"}; style 1 is positive."""
    if n_per_style < 1:
        raise ValueError("n_per_style must be at least 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    by_style: list[list[dict]] = [[], []]
    for style, style_pool in ((0, NEGATIVE_WORDS), (1, POSITIVE_WORDS)):
        samplers = {name: _CyclicSampler(pool, rng) for name, pool in _POOLS.items()}
        samplers["style"] = _CyclicSampler(style_pool, rng)
        for i in range(n_per_style):
            slots, heads = TEMPLATES[i % len(TEMPLATES)]
            tokens = [s if s in ("the", "and") else samplers[s].draw() for s in slots]
            validate_tree(heads)
            by_style[style].append({"tokens": tokens, "style": style, "heads": list(heads)})
    interleaved = []
    for a, b in zip(by_style[0], by_style[1]):
        interleaved.append(a)
        interleaved.append(b)
    return interleaved


def to_conllu(records: list[dict]) -> str:
    """Render records as CoNLL-U (only FORM and HEAD are meaningful)."""
    chunks = []
    for i, rec in enumerate(records):
        lines = [f"# sent_id = {i + 1}"]
        for j, (tok, head) in enumerate(zip(rec["tokens"], rec["heads"]), start=1):
            lines.append(f"{j}\t{tok}\t_\t_\t_\t_\t{head}\tdep\t_\t_")
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def write_synthetic_corpus(out_dir: str | Path, n_per_style: int, seed: int = 0) -> dict:
    """Write corpus.jsonl, parses.conllu and the ground-truth lexicon.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_corpus(n_per_style, seed)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    (out / "parses.conllu").write_text(to_conllu(records), encoding="utf-8")
    truth = {
        "style0_words": sorted(NEGATIVE_WORDS),
        "style1_words": sorted(POSITIVE_WORDS),
        "n_per_style": n_per_style,
        "seed": seed,
    }
    (out / "lexicon.json").write_text(json.dumps(truth, indent=1), encoding="utf-8")
    return {
        "records": len(records),
        "corpus": str(out / "corpus.jsonl"),
        "conllu": str(out / "parses.conllu"),
        "truth_lexicon": str(out / "lexicon.json"),
    }
