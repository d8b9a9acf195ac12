"""Command-line tool: prepare, synth, train, transfer, eval, ablate.

Every command writes a manifest (command, config, seed, input hashes) into
its output directory before doing work, holds a lock file there while
running, and never mutates its inputs.  Exit codes: 0 success, 1 usage
error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DataError, Dataset, dataset_sha256, load_dataset, prepare_dataset
from .graphs import ConlluParseError, TreeStructureError, Vocab, filter_and_encode, read_corpus_jsonl
from .metrics import (
    EvalClassifier,
    StyleLexicon,
    WordEmbeddings,
    build_style_lexicon,
    evaluate_run,
    train_eval_classifier,
    train_word_embeddings,
    write_report,
)
from .synth import write_synthetic_corpus
from .trainer import (
    CheckpointError,
    Model,
    TrainConfig,
    Trainer,
    config_from_dict,
    load_checkpoint,
    save_checkpoint,
    transfer_batch,
)
from .transformer import ModelConfig

ABLATION_VARIANTS = (
    "full",
    "sgt-i",
    "cgt-i",
    "sgt-cgt-i",
    "c-clas-g-only",
    "c-clas-s-only",
    "t-clas-g-only",
    "t-clas-s-only",
)  # plus pretrain-N


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1, not argparse's default 2
        raise UsageError(message)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def run_context(out_dir: Path, command: str, args: argparse.Namespace, inputs: list[str | Path],
                config: TrainConfig | None = None):
    """Lock the output directory and drop the run manifest atomically."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise DataError(f"{out_dir} is locked by another run (stale? remove {lock})") from None
    try:
        manifest = {
            "command": command,
            "argv": [str(a) for a in sys.argv[1:]] or None,
            "seed": getattr(args, "seed", None),
            "threads": getattr(args, "threads", None),
            "config": dataclasses.asdict(config) if config else None,
            "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
            "out_dir": str(out_dir),
            "started_at": datetime.now(timezone.utc).isoformat(),
            "package_version": __version__,
        }
        tmp = out_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        tmp.replace(out_dir / "manifest.json")
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- config assembly ---------------------------------------------------------------


def _field_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for cls in (TrainConfig, ModelConfig):
        for f in dataclasses.fields(cls):
            if f.name == "model":
                continue
            types[f.name] = f.type if isinstance(f.type, type) else _resolve(f.type)
    return types


def _resolve(annotation: str) -> type:
    return {"int": int, "float": float, "bool": bool, "str": str}.get(annotation, str)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Line-oriented `key = value` file; '#' starts a comment."""
    kv: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        kv[key] = value
    return kv


def _coerce(key: str, value: str, types: dict[str, type]):
    t = types[key]
    if t is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key}: cannot parse boolean from {value!r}")
    try:
        return t(value)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {t.__name__} from {value!r}") from None


def build_config(args: argparse.Namespace) -> TrainConfig:
    """scale preset -> config file -> --set overrides -> --seed flag."""
    kv: dict[str, str] = {}
    if getattr(args, "config", None):
        if not Path(args.config).exists():
            raise DataError(f"config file not found: {args.config}")
        kv.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        kv[key.strip()] = value.strip()

    scale = kv.pop("scale", "toy")
    if scale == "toy":
        cfg = TrainConfig.toy()
    elif scale == "paper":
        cfg = TrainConfig.paper()
    else:
        raise UsageError(f"unknown scale {scale!r} (use 'toy' or 'paper')")

    types = _field_types()
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
    cfg_kwargs: dict = {}
    model_kwargs: dict = {}
    for key, value in kv.items():
        if key in model_fields:
            model_kwargs[key] = _coerce(key, value, types)
        elif key in train_fields:
            cfg_kwargs[key] = _coerce(key, value, types)
        else:
            raise UsageError(f"unknown config key {key!r}")
    if getattr(args, "seed", None) is not None:
        cfg_kwargs["seed"] = args.seed
    model = dataclasses.replace(cfg.model, **model_kwargs)
    return dataclasses.replace(cfg, model=model, **cfg_kwargs)


# -- eval artifacts (cached by dataset hash) ------------------------------------------


def ensure_eval_artifacts(
    ds: Dataset, artifacts_dir: Path, seed: int
) -> tuple[EvalClassifier, StyleLexicon, WordEmbeddings]:
    artifacts_dir.mkdir(parents=True, exist_ok=True)
    meta_path = artifacts_dir / "artifacts.json"
    clf_path = artifacts_dir / "eval_classifier.ckpt"
    lex_path = artifacts_dir / "lexicon.json"
    emb_path = artifacts_dir / "embeddings.txt"
    key = {"dataset_sha256": ds.sha256, "seed": seed}
    if meta_path.exists():
        try:
            if json.loads(meta_path.read_text()) == key and all(
                p.exists() for p in (clf_path, lex_path, emb_path)
            ):
                return (
                    EvalClassifier.load(clf_path, ds.vocab),
                    StyleLexicon.load(lex_path),
                    WordEmbeddings.load(emb_path),
                )
        except (ValueError, CheckpointError):
            pass  # stale cache: rebuild below
    train_pairs = ds.pairs("train")
    clf = train_eval_classifier(train_pairs, ds.vocab, seed=seed)
    lexicon = build_style_lexicon(train_pairs, ds.vocab, seed=seed)
    embeddings = train_word_embeddings([t for t, _ in train_pairs], ds.vocab)
    clf.save(clf_path)
    lexicon.save(lex_path)
    embeddings.save(emb_path)
    meta_path.write_text(json.dumps(key, indent=1), encoding="utf-8")
    return clf, lexicon, embeddings


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n_per_style < 1:
        raise UsageError("--n-per-style must be at least 1")
    out = Path(args.out)
    with run_context(out, "synth", args, []):
        info = write_synthetic_corpus(out, args.n_per_style, seed=args.seed or 0)
    print(f"synth: wrote {info['records']} sentences to {out}")
    return 0


def cmd_prepare(args) -> int:
    out = Path(args.out)
    ratios = tuple(float(x) for x in args.split.split(","))
    if len(ratios) != 3:
        raise UsageError(f"--split needs three comma-separated ratios, got {args.split!r}")
    inputs = list(args.corpus) + list(args.conllu or [])
    with run_context(out, "prepare", args, inputs):
        meta = prepare_dataset(
            list(args.corpus),
            list(args.conllu or []),
            out,
            seed=args.seed or 0,
            min_count=args.min_count,
            max_len=args.max_len,
            split_ratios=ratios,
            symmetrize=not args.no_symmetrize,
            self_loops=not args.no_self_loops,
        )
    print(
        "prepare: kept "
        + "/".join(str(meta["counts"][s]) for s in ("train", "dev", "test"))
        + f" train/dev/test sentences, vocab {meta['vocab_size']}, "
        + f"rejected {meta['rejected_overlength_or_empty']}"
    )
    return 0


def _train_into(
    ds: Dataset, config: TrainConfig, out: Path, loss_variant: str = "full",
    resume: str | None = None,
) -> dict:
    """Shared by cmd_train and cmd_ablate; returns the run summary."""
    t0 = time.monotonic()
    opt_state = None
    if resume:
        model, opt_state = load_checkpoint(resume, ds.vocab)
        done_warm = min(model.epoch, config.warmup_epochs)
        done_train = max(0, model.epoch - config.warmup_epochs)
        config = dataclasses.replace(
            config,
            warmup_epochs=max(0, config.warmup_epochs - done_warm),
            train_epochs=max(0, config.train_epochs - done_train),
        )
        model.config = config
    else:
        model = Model(ds.vocab, config)
    trainer = Trainer(model, loss_variant=loss_variant, opt_state=opt_state)
    history = trainer.fit(ds.splits["train"], ds.splits["dev"], log_path=out / "train_log.jsonl")
    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt, trainer)
    summary = {
        "checkpoint": str(ckpt),
        "epochs_run": len(history),
        "final_epoch": model.epoch,
        "loss_variant": loss_variant,
        "wall_time_s": round(time.monotonic() - t0, 3),
        "final": history[-1] if history else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return summary


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    config = build_config(args)
    out = Path(args.out)
    inputs = [Path(args.dataset) / f for f in ("vocab.txt", "train.jsonl", "dev.jsonl", "test.jsonl")]
    with run_context(out, "train", args, inputs, config):
        summary = _train_into(ds, config, out, resume=args.resume)
    print(f"train: {summary['epochs_run']} epochs in {summary['wall_time_s']}s -> {summary['checkpoint']}")
    return 0


def cmd_transfer(args) -> int:
    ds = load_dataset(args.dataset)
    model, _ = load_checkpoint(args.checkpoint, ds.vocab)
    records = read_corpus_jsonl(args.input)
    graphs = []
    for i, rec in enumerate(records):
        if "heads" not in rec:
            raise DataError(f"{args.input}: line {i + 1}: record has no heads")
        g = filter_and_encode(
            [t.lower() for t in rec["tokens"]],
            rec["heads"],
            ds.vocab,
            max_len=ds.meta["max_len"],
            symmetrize=ds.meta["symmetrize"],
            self_loops=ds.meta["self_loops"],
        )
        if g is None:
            raise DataError(f"{args.input}: line {i + 1}: sentence rejected by length filters")
        graphs.append(g)
    outputs = transfer_batch(model, graphs, np.full(len(graphs), args.target_style))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("".join(" ".join(toks) + "\n" for toks in outputs), encoding="utf-8")
    print(f"transfer: wrote {len(outputs)} sentences to {out_path}")
    return 0


def _eval_outputs(ds: Dataset, args, out: Path) -> tuple[list[list[str]], list[list[str]], list[int]]:
    split = ds.splits[args.split]
    sources = [list(g.tokens) for g, _ in split]
    targets = [1 - s for _, s in split]
    if args.outputs:
        lines = Path(args.outputs).read_text(encoding="utf-8").splitlines()
        if len(lines) != len(split):
            raise DataError(
                f"{args.outputs}: {len(lines)} lines but the {args.split} split has {len(split)}"
            )
        outputs = [line.split() for line in lines]
    elif args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint, ds.vocab)
        outputs = transfer_batch(model, [g for g, _ in split], np.array(targets))
    else:
        raise UsageError("eval needs --checkpoint or --outputs")
    return sources, outputs, targets


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    inputs = [args.checkpoint] if args.checkpoint else [args.outputs]
    with run_context(out, "eval", args, [p for p in inputs if p]):
        artifacts_dir = Path(args.artifacts) if args.artifacts else out / "artifacts"
        clf, lexicon, embeddings = ensure_eval_artifacts(ds, artifacts_dir, args.seed or 0)
        sources, outputs, targets = _eval_outputs(ds, args, out)
        report = evaluate_run(sources, outputs, targets, clf, lexicon, embeddings)
        write_report(report, out / "report.txt")
    print(
        f"eval: accu {report.accu:.3f}  emd {report.emd:.3f}  "
        f"masked_wmd {report.masked_wmd:.4f}  bleu {report.bleu:.2f}  "
        f"content {report.content_preservation:.3f}"
    )
    return 0


def _ablation_settings(variant: str, config: TrainConfig) -> tuple[TrainConfig, str]:
    loss_variant = "full"
    model = config.model
    if variant == "full":
        pass
    elif variant == "sgt-i":
        model = dataclasses.replace(model, identity_mask_sgt=True)
    elif variant == "cgt-i":
        model = dataclasses.replace(model, identity_mask_cgt=True)
    elif variant == "sgt-cgt-i":
        model = dataclasses.replace(model, identity_mask_sgt=True, identity_mask_cgt=True)
    elif variant in ("c-clas-g-only", "c-clas-s-only", "t-clas-g-only", "t-clas-s-only"):
        loss_variant = variant
    elif variant.startswith("pretrain-"):
        try:
            n = int(variant.split("-", 1)[1])
        except ValueError:
            raise UsageError(f"bad pretrain variant {variant!r} (use pretrain-<epochs>)") from None
        if n < 0:
            raise UsageError("pretrain epochs cannot be negative")
        config = dataclasses.replace(config, warmup_epochs=n)
    else:
        raise UsageError(f"unknown ablation variant {variant!r}")
    return dataclasses.replace(config, model=model), loss_variant


def cmd_ablate(args) -> int:
    ds = load_dataset(args.dataset)
    config, loss_variant = _ablation_settings(args.variant, build_config(args))
    out = Path(args.out)
    inputs = [Path(args.dataset) / f for f in ("vocab.txt", "train.jsonl", "dev.jsonl", "test.jsonl")]
    with run_context(out, "ablate", args, inputs, config):
        summary = _train_into(ds, config, out, loss_variant=loss_variant)
        artifacts_dir = Path(args.artifacts) if args.artifacts else out / "artifacts"
        clf, lexicon, embeddings = ensure_eval_artifacts(ds, artifacts_dir, args.seed or 0)
        split = ds.splits["test"]
        sources = [list(g.tokens) for g, _ in split]
        targets = [1 - s for _, s in split]
        model, _ = load_checkpoint(summary["checkpoint"], ds.vocab)
        outputs = transfer_batch(model, [g for g, _ in split], np.array(targets))
        report = evaluate_run(sources, outputs, targets, clf, lexicon, embeddings)
        write_report(report, out / "report.txt")
        row = {"variant": args.variant, "seed": config.seed, **report.summary()}
        row.pop("kind", None)
        (out / "ablation_row.json").write_text(json.dumps(row, indent=1), encoding="utf-8")
    print(f"ablate[{args.variant}]: accu {report.accu:.3f}  masked_wmd {report.masked_wmd:.4f}  bleu {report.bleu:.2f}")
    return 0


# -- parser ---------------------------------------------------------------------------


def make_parser() -> _Parser:
    parser = _Parser(prog="stylegraph", description=__doc__)
    parser.add_argument("--version", action="version", version=f"stylegraph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--threads", type=int, default=None,
                       help="reserved: max worker threads for future batch fan-out")

    p = sub.add_parser("synth", help="generate the synthetic two-style corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-style", type=int, default=500)
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="build vocab + encoded train/dev/test splits")
    p.add_argument("--corpus", action="append", required=True, help="JSONL corpus file (repeatable)")
    p.add_argument("--conllu", action="append", help="matching CoNLL-U parse file (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=15)
    p.add_argument("--split", default="0.9,0.05,0.05")
    p.add_argument("--no-symmetrize", action="store_true")
    p.add_argument("--no-self-loops", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="warm-up then alternating transfer training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", help="override one config key (key=value)")
    p.add_argument("--resume", help="checkpoint to continue from")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("transfer", help="rewrite sentences toward a target style")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset dir providing the vocabulary")
    p.add_argument("--input", required=True, help="JSONL records with tokens and heads")
    p.add_argument("--target-style", type=int, required=True, choices=(0, 1))
    p.add_argument("--out", required=True, help="output text file, one sentence per line")
    common(p)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("eval", help="score a transfer run")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--outputs", help="pre-computed transfer outputs, one per line")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--artifacts", help="cache dir for eval classifier/lexicon/embeddings")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train + eval one ablation variant")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", required=True,
                   help="full | sgt-i | cgt-i | sgt-cgt-i | c-clas-g-only | c-clas-s-only | "
                        "t-clas-g-only | t-clas-s-only | pretrain-N")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append")
    p.add_argument("--artifacts")
    common(p)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ConlluParseError, TreeStructureError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        raise
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
