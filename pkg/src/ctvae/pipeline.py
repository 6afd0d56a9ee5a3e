"""End-to-end steps: data, training, generation, reranking and evaluation.

Every step reads and writes plain files so the CLI commands can be run
separately against one run directory.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import (Corpus, Vocab, build_vocab, check_disjoint, encode_pairs, filter_by_frequency, gen_synthetic,
                   load_corpus, make_batch, write_corpus)
from .decoding import Candidate, generate_candidates
from .gradcheck import grad_check
from .metrics import MetricsReport, RnnLm, score_responses, train_lm
from .models import GENERATOR_KINDS, ModelConfig, Trainer, build_model
from .rerank import TCD, make_negatives, rerank_with_tcd, train_tcd

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


# -- data ------------------------------------------------------------------------

def write_dataset(out_dir, seed: int, n_posts: int = 500, mean_responses: float = 19.0) -> dict[str, Corpus]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpora = dict(zip(SPLITS, gen_synthetic(seed, n_posts, mean_responses)))
    for name, corpus in corpora.items():
        write_corpus(corpus, out / f"{name}.tsv")
    return corpora


def read_dataset(data_dir, min_freq: int = 0) -> dict[str, Corpus]:
    corpora = {name: load_corpus(Path(data_dir) / f"{name}.tsv", name) for name in SPLITS}
    if min_freq > 1:
        corpora = {k: filter_by_frequency(v, min_freq) for k, v in corpora.items()}
    check_disjoint(*corpora.values())
    return corpora


def vocab_for(train: Corpus, config: ModelConfig) -> Vocab:
    return build_vocab(train, config.vocab_cap)


# -- training --------------------------------------------------------------------

def train_generator(config: ModelConfig, train: Corpus, vocab: Vocab, epochs: int | None = None,
                    on_epoch=None):
    config = ModelConfig.from_dict({**config.to_dict(), "vocab_size": len(vocab)})
    model = build_model(config)
    trainer = Trainer(model, config)
    pairs = encode_pairs(train, vocab, config.max_len)
    for epoch in range(epochs or config.epochs):
        stats = trainer.train_epoch(pairs)
        log.info("%s epoch %d: nll/token %.4f kl %.4f w %.3f", config.kind, epoch + 1, stats.nll_per_token,
                 stats.kl, stats.kl_weight)
        if on_epoch is not None:
            on_epoch(epoch, stats)
    return model, trainer


def train_discriminator(config: ModelConfig, train: Corpus, vocab: Vocab, epochs: int | None = None):
    config = ModelConfig.from_dict({**config.to_dict(), "kind": "tcd", "vocab_size": len(vocab)})
    tcd = TCD(config, np.random.default_rng(config.seed))
    labeled = make_negatives(train, config.seed)
    history = train_tcd(tcd, labeled, vocab, epochs or config.epochs, config.batch_size, config.seed,
                        max_len=config.max_len)
    return tcd, history


def train_language_model(config: ModelConfig, train: Corpus, vocab: Vocab, epochs: int | None = None):
    config = ModelConfig.from_dict({**config.to_dict(), "kind": "lm", "vocab_size": len(vocab)})
    lm = RnnLm(config, np.random.default_rng(config.seed))
    sentences = [vocab.encode(r[:config.max_len]) for r in train.responses()]
    history = train_lm(lm, sentences, epochs or config.epochs, config.batch_size, config.seed)
    return lm, history


def save_model(model, path, vocab: Vocab, trainer=None) -> None:
    ckpt.save_checkpoint(ckpt.snapshot(model, trainer, {"vocab": vocab.itos}), path)


def load_model(path, expected_kind: str | None = None):
    """Rebuild a generator, TCD or LM from a checkpoint; returns ``(model, vocab, checkpoint)``."""
    c = ckpt.load_checkpoint(path, expected_kind)
    cfg = c.config
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "tcd":
        model = TCD(cfg, rng)
    elif cfg.kind == "lm":
        model = RnnLm(cfg, rng)
    else:
        model = build_model(cfg, rng)
    ckpt.restore_params(model, c.params)
    vocab = Vocab(c.extra["vocab"][4:]) if "vocab" in c.extra else None
    return model, vocab, c


# -- gradient checks ---------------------------------------------------------------

# init std 0.5 keeps toy gradients well above the finite-difference round-off floor
TOY_DIMS = dict(embed_dim=4, hidden_dim=8, latent_dim=4, vocab_size=12, init_std=0.5)


def toy_grad_checks(seed: int = 0, kinds: Sequence[str] = (*GENERATOR_KINDS, "tcd", "lm")) -> dict[str, float]:
    """Max relative gradient error of every training loss on a tiny float64 model."""
    rng = np.random.default_rng(seed)
    pairs = [(list(rng.integers(4, 12, size=rng.integers(2, 5))), list(rng.integers(4, 12, size=rng.integers(1, 4))))
             for _ in range(3)]
    batch = make_batch(pairs)
    labels = np.array([1, 0, 1])
    errors = {}
    for kind in kinds:
        cfg = ModelConfig(kind=kind, seed=seed, **TOY_DIMS)
        with T.default_dtype(np.float64):
            if kind == "tcd":
                model = TCD(cfg, np.random.default_rng(seed))
                build = lambda m=model: m.loss(batch.post, batch.post_mask, batch.resp, batch.resp_mask, labels)
            elif kind == "lm":
                model = RnnLm(cfg, np.random.default_rng(seed))
                build = lambda m=model: m.loss(batch)
            else:
                model = build_model(cfg, np.random.default_rng(seed))
                eps = model.sample_eps(batch.size, np.random.default_rng(seed + 1))
                build = lambda m=model, e=eps: m.loss(batch, e, 0.7).total
        errors[kind] = grad_check(build, model.parameters())
    return errors


# -- generation and reranking ---------------------------------------------------------

def eval_posts(corpus: Corpus, limit: int | None = None) -> list[tuple[str, ...]]:
    posts = corpus.posts
    return posts[:limit] if limit else posts


def generate(model, vocab: Vocab, posts: Sequence[Sequence[str]], seed: int, n_z: int | None = None,
             beam_size: int | None = None) -> list[dict]:
    records = []
    for i, post in enumerate(posts):
        ids = vocab.encode(post[:model.config.max_len])
        cands = generate_candidates(model, ids, n_z=n_z, beam_size=beam_size, seed=int(seed) * 1_000_003 + i)
        records.append({
            "post": " ".join(post),
            "candidates": [{"response": " ".join(vocab.decode(c.tokens)), "loglik": c.loglik, "sample": c.sample}
                           for c in cands],
        })
    return records


def rerank(records: Sequence[dict], tcd: TCD, vocab: Vocab, lam: float = 5.0, k: int = 5) -> list[dict]:
    out = []
    for rec in records:
        post_ids = vocab.encode(rec["post"].split())
        cands = [Candidate(tuple(vocab.encode(c["response"].split())), c["loglik"], c["sample"])
                 for c in rec["candidates"]]
        if not cands:
            out.append({"post": rec["post"], "ranked": []})
            continue
        ranked = rerank_with_tcd(cands, tcd, post_ids, lam, k)
        out.append({
            "post": rec["post"],
            "ranked": [{"response": " ".join(vocab.decode(r.tokens)), "loglik": r.loglik, "tcd_prob": r.tcd_prob,
                        "score": r.score, "rank": r.rank} for r in ranked],
        })
    return out


def evaluate(ranked_by_model: dict[str, Sequence[dict]], lm: RnnLm, vocab: Vocab, train: Corpus,
             top_k: int = 5) -> MetricsReport:
    report = MetricsReport()
    training = train.responses()
    for name, records in ranked_by_model.items():
        per_post, failures = [], 0
        for rec in records:
            if not rec["ranked"]:
                failures += 1
                continue
            per_post.append([tuple(r["response"].split()) for r in rec["ranked"][:top_k]])
        report.rows.append(score_responses(name, per_post, lm, vocab, training, failures))
    return report


def write_jsonl(records: Sequence[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_all(run_dir, config: ModelConfig, seed: int, n_posts: int = 500, kinds: Sequence[str] = GENERATOR_KINDS,
            max_test_posts: int | None = None) -> MetricsReport:
    """gen-data, train every model plus TCD and LM, generate, rerank, evaluate."""
    run = Path(run_dir)
    corpora = write_dataset(run / "data", seed, n_posts)
    train = corpora["train"]
    base = ModelConfig.from_dict({**config.to_dict(), "seed": seed})
    vocab = vocab_for(train, base)
    tcd, _ = train_discriminator(base, train, vocab)
    save_model(tcd, run / "tcd.ckpt", vocab)
    lm, _ = train_language_model(base, train, vocab)
    save_model(lm, run / "lm.ckpt", vocab)
    posts = eval_posts(corpora["test"], max_test_posts)
    ranked = {}
    for kind in kinds:
        cfg = ModelConfig.from_dict({**base.to_dict(), "kind": kind})
        model, trainer = train_generator(cfg, train, vocab)
        save_model(model, run / f"{kind}.ckpt", vocab, trainer)
        records = generate(model, vocab, posts, seed)
        write_jsonl(records, run / f"{kind}.candidates.jsonl")
        ranked[kind] = rerank(records, tcd, vocab, cfg.rerank_lambda, cfg.top_k)
        write_jsonl(ranked[kind], run / f"{kind}.ranked.jsonl")
    report = evaluate(ranked, lm, vocab, train, base.top_k)
    (run / "report.tsv").write_text(report.to_table())
    (run / "report.jsonl").write_text(report.to_jsonl())
    return report
