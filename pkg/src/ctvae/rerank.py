"""Topic-coherence discriminator (ESIM with 1-layer LSTMs) and candidate reranking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Corpus, Vocab, _pad
from .decoding import Candidate
from .layers import MLP, Embedding, LSTMCell, Module, lstm_encode, max_pool, mean_pool
from .models import ModelConfig
from .tensor import Tensor


class TCD(Module):
    """Binary classifier for whether a response coheres with a post.

    Both sides share the input encoder.  Soft alignment uses inner-product
    scores; each side is enhanced as ``[a; a~; a - a~; a * a~]``, run
    through a composition LSTM, pooled by mean and max, and classified by
    a tanh MLP with a two-way softmax head.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.vocab_size < 5:
            raise ValueError("config.vocab_size must be set before building a model")
        self.config = config
        std, E, H = config.init_std, config.embed_dim, config.hidden_dim
        self.embed = Embedding(config.vocab_size, E, rng, std)
        self.encoder = LSTMCell(E, H, rng, std)
        self.composer = LSTMCell(4 * H, H, rng, std)
        self.classifier = MLP([4 * H, H, 2], ["tanh", "linear"], rng, std)

    def _encode(self, ids):
        return T.stack(lstm_encode(self.encoder, self.embed(ids)), axis=1)

    def align(self, a: Tensor, b: Tensor, a_mask, b_mask):
        """Cross-attention: returns ``(a~, b~, weights_a, weights_b)``."""
        dt = a.data.dtype
        e = T.bmm(a, T.transpose(b, (0, 2, 1)))                     # [B, La, Lb]
        wa = T.softmax(e + ((np.asarray(b_mask, dt) - 1.0) * 1e9)[:, None, :], axis=2)
        wb = T.softmax(T.transpose(e, (0, 2, 1)) + ((np.asarray(a_mask, dt) - 1.0) * 1e9)[:, None, :], axis=2)
        return T.bmm(wa, b), T.bmm(wb, a), wa, wb

    def _compose(self, a: Tensor, a_tilde: Tensor, mask) -> Tensor:
        m = T.concat([a, a_tilde, a - a_tilde, a * a_tilde], axis=2)
        states = lstm_encode(self.composer, m)
        return T.concat([mean_pool(states, mask), max_pool(states, mask)], axis=1)

    def logits(self, post, post_mask, resp, resp_mask) -> Tensor:
        dt = self.embed.weight.data.dtype
        post_mask, resp_mask = np.asarray(post_mask, dt), np.asarray(resp_mask, dt)
        a, b = self._encode(post), self._encode(resp)
        a_tilde, b_tilde, _, _ = self.align(a, b, post_mask, resp_mask)
        v = T.concat([self._compose(a, a_tilde, post_mask), self._compose(b, b_tilde, resp_mask)], axis=1)
        return self.classifier(v)

    def loss(self, post, post_mask, resp, resp_mask, labels) -> Tensor:
        logits = self.logits(post, post_mask, resp, resp_mask)
        return T.softmax_cross_entropy(logits, labels) * (1.0 / len(labels))

    def prob(self, post, post_mask, resp, resp_mask) -> np.ndarray:
        with T.no_grad():
            logits = self.logits(post, post_mask, resp, resp_mask).data.astype(np.float64)
        return np.exp(T.log_softmax_np(logits))[:, 1]


def tcd_forward(tcd: TCD, post_ids: Sequence[int], response_ids: Sequence[int]) -> float:
    """Probability that ``response_ids`` is a coherent reply to ``post_ids``."""
    if len(post_ids) == 0 or len(response_ids) == 0:
        raise ValueError("tcd_forward needs non-empty post and response")
    V = tcd.config.vocab_size
    if max(post_ids) >= V or max(response_ids) >= V:
        raise ValueError(f"token id outside vocabulary of size {V}")
    ones = lambda s: np.ones((1, len(s)))
    return float(tcd.prob(np.array([post_ids]), ones(post_ids), np.array([response_ids]), ones(response_ids))[0])


def tcd_probs(tcd: TCD, post_ids: Sequence[int], responses: Sequence[Sequence[int]]) -> np.ndarray:
    """Batched :func:`tcd_forward` of many responses against one post."""
    if not responses:
        return np.zeros(0)
    resp, resp_mask = _pad(responses)
    post = np.repeat(np.array([post_ids]), len(responses), axis=0)
    return tcd.prob(post, np.ones(post.shape), resp, resp_mask)


# -- training data -------------------------------------------------------------

def make_negatives(corpus: Corpus, seed: int) -> list[tuple[tuple, tuple, int]]:
    """All pairs as positives plus an equal number of shuffled negatives.

    Responses are permuted across pairs; any negative that happens to be a
    true pair of its post is re-drawn.  Returns ``(post, response, label)``.
    """
    if len(corpus.index) < 2:
        raise ValueError("need at least two distinct posts to build negatives")
    rng = np.random.default_rng(seed)
    pairs = corpus.pairs
    true = {post: set(resps) for post, resps in corpus.index.items()}
    responses = [r for _, r in pairs]
    perm = rng.permutation(len(pairs))
    negatives = []
    for i, (post, _) in enumerate(pairs):
        resp = responses[perm[i]]
        tries = 0
        while resp in true[post]:
            tries += 1
            if tries > 1000:
                raise ValueError(f"could not find a negative response for post {' '.join(post)!r}")
            resp = responses[rng.integers(len(responses))]
        negatives.append((post, resp, 0))
    return [(p, r, 1) for p, r in pairs] + negatives


def train_tcd(tcd: TCD, labeled: Sequence[tuple[tuple, tuple, int]], vocab: Vocab, epochs: int,
              batch_size: int, seed: int, lr: float | None = None, max_len: int = 30) -> list[float]:
    """Minimise binary cross-entropy with Adam; returns mean loss per epoch."""
    from .optim import Adam

    opt = Adam(tcd.parameters(), lr=lr or tcd.config.lr)
    rng = np.random.default_rng([seed, 2])
    encoded = [(vocab.encode(p[:max_len]), vocab.encode(r[:max_len]), y) for p, r, y in labeled]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(encoded))
        total = 0.0
        for start in range(0, len(order), batch_size):
            chunk = [encoded[i] for i in order[start:start + batch_size]]
            post, pm = _pad([c[0] for c in chunk])
            resp, rm = _pad([c[1] for c in chunk])
            labels = np.array([c[2] for c in chunk])
            opt.zero_grad()
            loss = tcd.loss(post, pm, resp, rm, labels)
            T.backward(loss)
            opt.step()
            total += float(loss.data) * len(chunk)
        losses.append(total / len(encoded))
    return losses


def tcd_accuracy(tcd: TCD, labeled, vocab: Vocab, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(labeled), batch_size):
        chunk = labeled[start:start + batch_size]
        post, pm = _pad([vocab.encode(c[0]) for c in chunk])
        resp, rm = _pad([vocab.encode(c[1]) for c in chunk])
        p = tcd.prob(post, pm, resp, rm)
        correct += int(np.sum((p > 0.5) == np.array([c[2] == 1 for c in chunk])))
    return correct / len(labeled)


# -- ranking ----------------------------------------------------------------------

@dataclass
class RankedResponse:
    tokens: tuple[int, ...]
    loglik: float
    tcd_prob: float
    score: float
    rank: int


def rank_score(loglik: float, tcd_prob: float, lam: float = 5.0) -> float:
    """``loglik + lam * ln(tcd_prob)``."""
    if not tcd_prob > 0:
        raise ValueError(f"tcd_prob must be in (0, 1], got {tcd_prob}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return loglik + lam * math.log(tcd_prob)


def rerank_topk(candidates: Sequence[Candidate], probs: Sequence[float], lam: float = 5.0,
                k: int = 5) -> list[RankedResponse]:
    """Score, deduplicate (keeping the best copy), sort and truncate to ``k``.

    ``probs[i]`` is the discriminator probability of ``candidates[i]``;
    equal scores fall back to the token sequence for a stable order.
    """
    if not candidates:
        raise ValueError("rerank_topk needs at least one candidate")
    best: dict[tuple[int, ...], RankedResponse] = {}
    for cand, p in zip(candidates, probs):
        # floor keeps ln finite when the discriminator saturates in float32
        p = max(float(p), 1e-12)
        s = rank_score(cand.loglik, p, lam)
        cur = best.get(cand.tokens)
        if cur is None or s > cur.score:
            best[cand.tokens] = RankedResponse(cand.tokens, cand.loglik, p, s, 0)
    ranked = sorted(best.values(), key=lambda r: (-r.score, r.tokens))[:k]
    for i, r in enumerate(ranked, 1):
        r.rank = i
    return ranked


def rerank_with_tcd(candidates: Sequence[Candidate], tcd: TCD, post_ids: Sequence[int], lam: float = 5.0,
                    k: int = 5) -> list[RankedResponse]:
    safe = [c.tokens if c.tokens else (0,) for c in candidates]
    probs = tcd_probs(tcd, post_ids, [list(s) for s in safe])
    return rerank_topk(candidates, probs, lam, k)
