"""Training scheme: losses, phase isolation, determinism, checkpoints."""

import dataclasses
import json
import math

import numpy as np
import pytest

from stylegraph import autodiff as ad
from stylegraph.dataset import load_dataset, prepare_dataset
from stylegraph.graphs import Vocab, build_vocab, filter_and_encode
from stylegraph.optim import Adam
from stylegraph.synth import generate_corpus
from stylegraph.trainer import (
    CheckpointError,
    LOSS_KEYS,
    Model,
    TrainConfig,
    Trainer,
    classifier_objective,
    load_checkpoint,
    make_batch,
    reconstruction_loss,
    save_checkpoint,
    transfer,
    transfer_batch,
    transfer_objective,
)

rng = np.random.default_rng(31)


def tiny_config(**kw):
    base = dict(
        learning_rate=1e-3,
        batch_size=8,
        warmup_epochs=1,
        train_epochs=1,
        seed=3,
        patience=5,
    )
    base.update(kw)
    cfg = TrainConfig(**base)
    return dataclasses.replace(
        cfg, model=dataclasses.replace(cfg.model, d_n=16, heads=4, layers=2, feature_maps=4)
    )


@pytest.fixture(scope="module")
def tiny_corpus():
    records = generate_corpus(24, seed=9)
    vocab = build_vocab((r["tokens"] for r in records), min_count=1)
    corpus = [
        (filter_and_encode(r["tokens"], r["heads"], vocab), r["style"]) for r in records
    ]
    assert all(g is not None for g, _ in corpus)
    return vocab, corpus


class TestReconstructionLoss:
    def test_fresh_model_close_to_uniform(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config()
        model = Model(vocab, cfg)
        batch = make_batch(corpus[:16], cfg)
        loss = reconstruction_loss(model, batch).item()
        mean_len = np.mean([g.k + 1 for g, _ in corpus[:16]])  # + eos
        expected = mean_len * math.log(len(vocab))
        assert abs(loss - expected) / expected < 0.2
        assert loss >= 0.0

    def test_empty_batch_rejected(self, tiny_corpus):
        with pytest.raises(ValueError):
            make_batch([], tiny_config())

    def test_overfits_single_batch(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config(learning_rate=5e-3)
        model = Model(vocab, cfg)
        batch = make_batch(corpus[:8], cfg)
        opt = Adam(model.generator_params(), cfg.learning_rate)
        first = None
        for _ in range(200):
            model.zero_grad()
            loss = reconstruction_loss(model, batch)
            first = first if first is not None else loss.item()
            loss.backward()
            opt.step()
        model.zero_grad()
        assert loss.item() < 0.1 * first


class TestObjectives:
    def test_zero_lambdas_reduce_to_reconstruction(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config(lambda_g=0.0, lambda_s=0.0)
        model = Model(vocab, cfg)
        batch = make_batch(corpus[:8], cfg)
        g = np.random.Generator(np.random.Philox(0))
        total, parts = transfer_objective(model, batch, 1.0, g)
        model.zero_grad()
        rec = reconstruction_loss(model, batch)
        assert total.item() == rec.item()
        assert parts["lt_g"] == 0.0 and parts["lt_s"] == 0.0

    def test_transfer_objective_composition_exact(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config(lambda_g=0.25, lambda_s=0.75)
        model = Model(vocab, cfg)
        batch = make_batch(corpus[:8], cfg)
        g = np.random.Generator(np.random.Philox(0))
        total, parts = transfer_objective(model, batch, 1.0, g)
        assembled = parts["l_rec"] + cfg.lambda_g * parts["lt_g"] + cfg.lambda_s * parts["lt_s"]
        assert total.item() == assembled  # same float ops, bit-equal

    def test_phase_isolation_exact(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config(lambda_g=0.5, lambda_s=0.5)
        model = Model(vocab, cfg)
        trainer = Trainer(model)
        batch = make_batch(corpus[:8], cfg)

        cls_before = {k: v.data.copy() for k, v in model.classifier_params().items()}
        trainer._generator_step(batch, warmup=False)
        for k, v in model.classifier_params().items():
            assert np.array_equal(v.data, cls_before[k]), f"classifier {k} moved in transfer step"

        gen_before = {k: v.data.copy() for k, v in model.generator_params().items()}
        trainer._classifier_step(batch)
        for k, v in model.generator_params().items():
            assert np.array_equal(v.data, gen_before[k]), f"generator {k} moved in classifier step"

    def test_classifier_objective_variants(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config()
        model = Model(vocab, cfg)
        batch = make_batch(corpus[:8], cfg)
        total_g, parts = classifier_objective(model, batch, "c-clas-g-only")
        assert total_g.item() == parts["lc_g"]
        total_s, parts2 = classifier_objective(model, batch, "c-clas-s-only")
        assert total_s.item() == parts2["lc_s"]

    def test_unknown_variant_rejected(self, tiny_corpus):
        vocab, _ = tiny_corpus
        model = Model(vocab, tiny_config())
        with pytest.raises(ValueError):
            Trainer(model, loss_variant="nope")


class TestTemperatureSchedule:
    def test_anneal_with_floor(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config(train_epochs=0, warmup_epochs=0)
        trainer = Trainer(Model(vocab, cfg))
        assert trainer.tau == 1.0
        for expected in (0.5, 0.25, 0.125, 0.1, 0.1):
            trainer.train_epochs_done += 1
            assert trainer.tau == pytest.approx(max(0.1, 1.0 * 0.5**trainer.train_epochs_done))
        trainer.train_epochs_done = 2
        assert trainer.tau == 0.25  # two epochs from 1.0


class TestDeterminism:
    def test_same_seed_identical_history(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        train, dev = corpus[:16], corpus[16:]

        def one_run():
            cfg = tiny_config(warmup_epochs=1, train_epochs=1)
            model = Model(vocab, cfg)
            trainer = Trainer(model)
            return trainer.fit(train, dev)

        h1, h2 = one_run(), one_run()
        assert json.dumps(h1) == json.dumps(h2)

    def test_transfer_deterministic(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        model = Model(vocab, tiny_config())
        g = corpus[0][0]
        assert transfer(model, g, 1) == transfer(model, g, 1)

    def test_transfer_style_validation(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        model = Model(vocab, tiny_config())
        with pytest.raises(ValueError):
            transfer(model, corpus[0][0], 2)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_corpus, tmp_path):
        vocab, corpus = tiny_corpus
        cfg = tiny_config()
        model = Model(vocab, cfg)
        trainer = Trainer(model)
        trainer.warmup_epoch(corpus[:16])
        model.epoch = 1
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, trainer)
        loaded, opt_state = load_checkpoint(path, vocab)
        assert loaded.epoch == 1
        for (n1, p1), (n2, p2) in zip(
            model.named_parameters().items(), loaded.named_parameters().items()
        ):
            assert n1 == n2
            assert np.array_equal(p1.data, p2.data), f"{n1} not bit-exact"
        t2 = Trainer(loaded, opt_state=opt_state)
        for name, st in trainer.opt_gen.state.items():
            st2 = t2.opt_gen.state[name]
            assert st.t == st2.t
            assert np.array_equal(st.m, st2.m)

    def test_vocab_hash_mismatch(self, tiny_corpus, tmp_path):
        vocab, corpus = tiny_corpus
        model = Model(vocab, tiny_config())
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        other = Vocab(list(vocab.tokens[:4]) + ["different", "tokens"])
        with pytest.raises(CheckpointError, match="vocabulary hash"):
            load_checkpoint(path, other)

    def test_truncated_file_detected(self, tiny_corpus, tmp_path):
        vocab, _ = tiny_corpus
        model = Model(vocab, tiny_config())
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 77])
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path, vocab)

    def test_corrupted_byte_detected(self, tiny_corpus, tmp_path):
        vocab, _ = tiny_corpus
        model = Model(vocab, tiny_config())
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path, vocab)


class TestLogSchema:
    def test_history_has_exact_loss_keys(self, tiny_corpus):
        vocab, corpus = tiny_corpus
        cfg = tiny_config(warmup_epochs=1, train_epochs=1)
        trainer = Trainer(Model(vocab, cfg))
        history = trainer.fit(corpus[:16], corpus[16:])
        assert len(history) == 2
        for rec in history:
            assert set(rec["losses"].keys()) == set(LOSS_KEYS)
