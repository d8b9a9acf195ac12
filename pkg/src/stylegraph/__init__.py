"""Linguistic-graph-constrained text style transfer, end to end on one CPU.

The package is organised in layers:

* ``autodiff`` / ``nn`` / ``optim`` -- a small dense-tensor reverse-mode
  autodiff engine plus the neural building blocks everything else uses.
* ``graphs`` -- vocabulary, CoNLL-U ingestion and linguistic-graph
  construction from dependency parses.
* ``transformer`` -- graph-masked multi-head attention: the self-graph
  encoder (with a global style node) and the cross-graph decoder.
* ``rephraser`` -- single-layer GRU encoder/decoder that turns fused node
  embeddings back into token sequences.
* ``classifiers`` -- TextCNN style classifiers and the four
  classification objectives.
* ``trainer`` -- warm-up / alternating training scheme, checkpoints.
* ``metrics`` -- transfer accuracy, style-distribution EMD, lexicon-masked
  word mover's distance (exact optimal transport) and corpus BLEU.
* ``synth`` -- deterministic synthetic two-style corpus generator.
* ``cli`` -- the ``stylegraph`` command-line tool.
"""

__version__ = "0.1.0"
