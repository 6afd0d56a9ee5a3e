"""Diversity and fluency metrics, and the RNN language model used for PPL-on-LM."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, Vocab, iter_batches
from .layers import Embedding, Linear, LSTMCell, Module, lstm_encode
from .models import ModelConfig

log = logging.getLogger(__name__)

Tokens = Sequence[str]


def _tok(r) -> tuple:
    return tuple(r.split()) if isinstance(r, str) else tuple(r)


def ngrams(tokens: Sequence, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Iterable, n: int) -> float:
    """Distinct n-grams over total n-grams, pooled across ``responses``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen, total = set(), 0
    for r in responses:
        grams = ngrams(_tok(r), n)
        seen.update(grams)
        total += len(grams)
    if total == 0:
        raise ValueError(f"no response has at least {n} tokens")
    return len(seen) / total


def unique_pct(responses: Sequence) -> float:
    """Fraction of distinct response sentences."""
    responses = [_tok(r) for r in responses]
    if not responses:
        raise ValueError("unique_pct needs at least one response")
    return len(set(responses)) / len(responses)


def matching_pct(responses: Sequence, training_responses: Iterable) -> float:
    """Fraction of ``responses`` that occur verbatim (as token sequences) in the training set."""
    responses = [_tok(r) for r in responses]
    if not responses:
        return 0.0
    index = {_tok(r) for r in training_responses}
    return sum(r in index for r in responses) / len(responses)


# -- language model ---------------------------------------------------------------

class RnnLm(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.vocab_size < 5:
            raise ValueError("config.vocab_size must be set before building a model")
        self.config = config
        std = config.init_std
        self.embed = Embedding(config.vocab_size, config.embed_dim, rng, std)
        self.cell = LSTMCell(config.embed_dim, config.hidden_dim, rng, std)
        self.out = Linear(config.hidden_dim, config.vocab_size, rng, std)

    def logits(self, inputs: np.ndarray) -> T.Tensor:
        return self.out(T.stack(lstm_encode(self.cell, self.embed(inputs)), axis=1))

    def loss(self, batch) -> T.Tensor:
        """Token-summed NLL of ``batch.dec_out`` given ``batch.dec_in``, averaged over sentences."""
        logits = self.logits(batch.dec_in)
        V = logits.shape[-1]
        w = batch.dec_mask.reshape(-1).astype(logits.data.dtype)
        nll = T.softmax_cross_entropy(T.reshape(logits, (-1, V)), batch.dec_out.reshape(-1), w)
        return nll * (1.0 / batch.size)

    def token_logprobs(self, ids: Sequence[int]) -> np.ndarray:
        """Log-probabilities of each token of ``ids`` followed by EOS."""
        with T.no_grad():
            logits = self.logits(np.array([[BOS, *ids]])).data[0].astype(np.float64)
        logp = T.log_softmax_np(logits)
        return logp[np.arange(len(ids) + 1), [*ids, EOS]]


def train_lm(lm: RnnLm, sentences: Sequence[Sequence[int]], epochs: int, batch_size: int, seed: int) -> list[float]:
    from .optim import Adam

    opt = Adam(lm.parameters(), lr=lm.config.lr)
    rng = np.random.default_rng([seed, 3])
    pairs = [((BOS,), list(s)) for s in sentences]
    history = []
    for _ in range(epochs):
        nll = tokens = 0.0
        for batch in iter_batches(pairs, batch_size, rng):
            opt.zero_grad()
            loss = lm.loss(batch)
            T.backward(loss)
            opt.step()
            nll += float(loss.data) * batch.size
            tokens += batch.n_tokens
        history.append(nll / tokens)
    return history


def lm_perplexity(lm, sentences: Sequence[Sequence[int]]) -> float:
    """``exp(total NLL / total tokens)`` with the end-of-sentence token counted."""
    if not sentences:
        raise ValueError("lm_perplexity needs at least one sentence")
    total, count = 0.0, 0
    for s in sentences:
        lp = np.asarray(lm.token_logprobs(list(s)), dtype=np.float64)
        total -= lp.sum()
        count += lp.size
    return math.exp(total / count)


# -- reports -------------------------------------------------------------------------

@dataclass
class MetricsRow:
    model: str
    ppl_on_lm: float
    matching_pct: float
    distinct_1: float
    distinct_2: float
    unique_pct: float
    n_posts: int
    n_responses: int
    failures: int = 0


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    COLUMNS = ("model", "ppl_on_lm", "matching_pct", "distinct_1", "distinct_2", "unique_pct",
               "n_posts", "n_responses", "failures")

    def row(self, model: str) -> MetricsRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def to_table(self, sep: str = "\t") -> str:
        lines = [sep.join(self.COLUMNS)]
        for r in self.rows:
            d = asdict(r)
            lines.append(sep.join(f"{d[c]:.2f}" if isinstance(d[c], float) else str(d[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rows)


def score_responses(name: str, per_post: Sequence[Sequence[Tokens]], lm, vocab: Vocab,
                    training_responses: Iterable, failures: int = 0) -> MetricsRow:
    pooled = [tuple(r) for responses in per_post for r in responses]
    if not pooled:
        raise ValueError(f"{name}: no responses to score")
    ppl = lm_perplexity(lm, [vocab.encode(r) for r in pooled])
    nonempty = [r for r in pooled if r]
    d1 = distinct_n(nonempty, 1) if nonempty else 0.0
    d2 = distinct_n(nonempty, 2) if any(len(r) >= 2 for r in pooled) else 0.0
    return MetricsRow(name, ppl, 100 * matching_pct(pooled, training_responses), 100 * d1, 100 * d2,
                      100 * unique_pct(pooled), len(per_post), len(pooled), failures)


def evaluate_models(models: Mapping[str, Callable[[Tokens], Sequence[Tokens]]], test_posts: Sequence[Tokens],
                    lm, vocab: Vocab, training_responses: Iterable, top_k: int = 5) -> MetricsReport:
    """Pool each model's top-k responses over ``test_posts`` and score them.

    ``models`` maps a name to a function returning the reranked responses
    for a post.  A post whose generation raises is skipped and counted.
    """
    training_responses = list(training_responses)
    report = MetricsReport()
    for name, respond in models.items():
        per_post, failures = [], 0
        for post in test_posts:
            try:
                per_post.append([tuple(r) for r in respond(post)][:top_k])
            except Exception as exc:  # noqa: BLE001 - one bad post must not sink the report
                log.warning("%s: generation failed for %r: %s", name, " ".join(post), exc)
                failures += 1
        report.rows.append(score_responses(name, per_post, lm, vocab, training_responses, failures))
    return report
