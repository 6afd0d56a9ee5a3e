"""Seq2Seq with attention, CVAE, CVAE-simple and CTVAE response generators."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, iter_batches
from .layers import (ConditionalDecoder, Embedding, Linear, LSTMCell, MLP, Module, lstm_decode_step,
                     lstm_encode, mean_pool)
from .optim import Adam
from .tensor import Tensor
from .variational import AnnealSchedule, GaussianParams, kl_pair, kl_vs_standard, kl_weight, reparameterize

log = logging.getLogger(__name__)

GENERATOR_KINDS = ("seq2seq", "cvae", "cvae-simple", "ctvae")
MODEL_KINDS = GENERATOR_KINDS + ("tcd", "lm")


@dataclass
class ModelConfig:
    kind: str = "ctvae"
    embed_dim: int = 300
    hidden_dim: int = 300
    latent_dim: int = 100
    vocab_cap: int = 35000
    vocab_size: int = 0
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 10
    pretrain_steps: int = 0
    ramp_steps: int = 5000
    kld_period: int = 3
    kl_mode: str = "masked"
    fixed_kl_weight: float | None = None
    max_len: int = 30
    init_std: float = 0.02
    beam_size: int = 20
    n_z: int = 50
    seq2seq_beam: int = 50
    rerank_lambda: float = 5.0
    top_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        for name in ("embed_dim", "hidden_dim", "latent_dim", "batch_size", "max_len", "beam_size", "n_z",
                     "seq2seq_beam", "top_k", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.rerank_lambda < 0:
            raise ValueError("lr must be positive and rerank_lambda non-negative")
        self.schedule()

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.pretrain_steps, self.ramp_steps, self.kld_period, self.kl_mode,
                              self.fixed_kl_weight)

    @property
    def variational(self) -> bool:
        return self.kind in ("cvae", "cvae-simple", "ctvae")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# CPU-sized dims; decoding and reranking settings keep their defaults.  At this size
# the latent stays in use only with a larger init and learning rate than the
# full-size defaults, and with a longer KL warm-up.
DESK_PRESET = dict(embed_dim=32, hidden_dim=64, latent_dim=16, batch_size=64, epochs=25, lr=2e-3,
                   pretrain_steps=800, ramp_steps=1500, init_std=0.2)


def preset(name: str, **overrides) -> ModelConfig:
    if name == "full":
        return ModelConfig(**overrides)
    if name == "desk":
        return ModelConfig(**{**DESK_PRESET, **overrides})
    raise ValueError(f"unknown preset {name!r}")


class LossTerms(NamedTuple):
    total: Tensor      # nll + w * kl, per example
    nll: Tensor        # token-summed cross-entropy, per example
    kl: Tensor         # KL per example (0 for seq2seq)
    nll_sum: float
    n_tokens: int


def _cast(a, like: Tensor) -> np.ndarray:
    return np.asarray(a, dtype=like.data.dtype)


class Generator(Module):
    """Shared pieces: the condition encoder and the decoding hooks."""

    kind = "base"

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.vocab_size < 5:
            raise ValueError("config.vocab_size must be set before building a model")
        self.config = config
        std = config.init_std
        self.cond_embed = Embedding(config.vocab_size, config.embed_dim, rng, std)
        self.cond_cell = LSTMCell(config.embed_dim, config.hidden_dim, rng, std)

    @property
    def dtype(self):
        return self.cond_embed.weight.data.dtype

    def encode_condition(self, post_ids, mask=None) -> tuple[Tensor, list[Tensor]]:
        """Mean-pooled condition-encoder states ``x`` plus the per-step states."""
        post_ids = np.atleast_2d(np.asarray(post_ids))
        if post_ids.shape[1] == 0:
            raise ValueError("empty post")
        states = lstm_encode(self.cond_cell, self.cond_embed(post_ids))
        return mean_pool(states, mask), states

    def sample_eps(self, batch_size: int, rng: np.random.Generator) -> np.ndarray | None:
        return None

    def loss(self, batch: Batch, eps=None, kl_w: float = 1.0) -> LossTerms:
        raise NotImplementedError

    def decode_init(self, post_ids: Sequence[int], n_groups: int, rng: np.random.Generator):
        """Return ``(state, step_fn)`` for ``n_groups`` independent searches on one post."""
        raise NotImplementedError

    def _reconstruct(self, decoder: ConditionalDecoder, batch: Batch, x: Tensor, enc: Tensor):
        h0 = x
        state = (h0, Tensor(np.zeros(h0.shape, dtype=h0.data.dtype)))
        emb = decoder.embed(batch.dec_in)
        hs = []
        for t in range(batch.dec_in.shape[1]):
            state = decoder.cell(T.concat([emb[:, t, :], enc], axis=1), state)
            hs.append(state[0])
        return self._nll(decoder.out(T.stack(hs, axis=1)), batch)

    @staticmethod
    def _nll(logits: Tensor, batch: Batch) -> Tensor:
        V = logits.shape[-1]
        flat = T.reshape(logits, (-1, V))
        return T.softmax_cross_entropy(flat, batch.dec_out.reshape(-1), _cast(batch.dec_mask.reshape(-1), logits))


class VariationalGenerator(Generator):
    """Decoder conditioned on ``enc = [x; z]`` with initial hidden state ``x``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        std, H, L = config.init_std, config.hidden_dim, config.latent_dim
        self.out_embed = Embedding(config.vocab_size, config.embed_dim, rng, std)
        self.out_cell = LSTMCell(config.embed_dim, H, rng, std)
        self.decoder = ConditionalDecoder(config.vocab_size, config.embed_dim, H + L, H, rng, std)

    def encode_response(self, resp_ids, mask=None) -> Tensor:
        return mean_pool(lstm_encode(self.out_cell, self.out_embed(resp_ids)), mask)

    def sample_eps(self, batch_size, rng):
        return rng.standard_normal((batch_size, self.config.latent_dim)).astype(self.dtype)

    def latent_terms(self, batch: Batch, x: Tensor, eps) -> tuple[Tensor, Tensor]:
        """Return ``(z, per-example KL)`` for a training batch."""
        raise NotImplementedError

    def loss(self, batch: Batch, eps=None, kl_w: float = 1.0) -> LossTerms:
        B = batch.size
        if eps is None:
            eps = np.zeros((B, self.config.latent_dim), dtype=self.dtype)
        x, _ = self.encode_condition(batch.post, _cast(batch.post_mask, self.cond_embed.weight))
        z, kl = self.latent_terms(batch, x, eps)
        nll_sum = self._reconstruct(self.decoder, batch, x, T.concat([x, z], axis=1))
        nll = nll_sum * (1.0 / B)
        kl_mean = T.mean(kl)
        total = nll + kl_mean * float(kl_w)
        return LossTerms(total, nll, kl_mean, float(nll_sum.data), batch.n_tokens)

    def prior_latents(self, x: Tensor, eps: np.ndarray) -> Tensor:
        """z samples used at generation time."""
        raise NotImplementedError

    def decode_init(self, post_ids, n_groups, rng):
        with T.no_grad():
            x, _ = self.encode_condition(np.asarray([post_ids]))
            xs = Tensor(np.repeat(x.data, n_groups, axis=0))
            eps = self.sample_eps(n_groups, rng)
            z = self.prior_latents(xs, eps)
            enc = np.concatenate([xs.data, z.data], axis=1)
        state = (xs.data, np.zeros_like(xs.data), enc)
        return state, self._step

    def _step(self, state, tokens):
        h, c, enc = state
        with T.no_grad():
            logits, (h2, c2) = lstm_decode_step(self.decoder, self.decoder.embed(tokens), Tensor(enc),
                                                (Tensor(h), Tensor(c)))
        return T.log_softmax_np(logits.data), (h2.data, c2.data, enc)


class CTVAE(VariationalGenerator):
    """Recognition q(t|y), fixed prior N(0, I) on t, and z = transform([x; t])."""

    kind = "ctvae"

    def __init__(self, config, rng):
        super().__init__(config, rng)
        std, H, L = config.init_std, config.hidden_dim, config.latent_dim
        self.recognition = MLP([H, H, 2 * L], ["softplus", "linear"], rng, std)
        self.transform = MLP([H + L, H, H, L], ["tanh", "tanh", "linear"], rng, std)

    def recognize(self, y: Tensor) -> GaussianParams:
        return GaussianParams.split(self.recognition(y))

    def latent_terms(self, batch, x, eps):
        y = self.encode_response(batch.resp, _cast(batch.resp_mask, x))
        q = self.recognize(y)
        t = reparameterize(q, _cast(eps, x))
        z = self.transform(T.concat([x, t], axis=1))
        return z, kl_vs_standard(q)

    def prior_latents(self, x, eps):
        return self.transform(T.concat([x, Tensor(_cast(eps, x))], axis=1))


class CVAE(VariationalGenerator):
    """Recognition q(z|x,y) and a learned prior p(z|x) of the same shape."""

    kind = "cvae"

    def __init__(self, config, rng):
        super().__init__(config, rng)
        std, H, L = config.init_std, config.hidden_dim, config.latent_dim
        self.recognition = MLP([2 * H, H, 2 * L], ["softplus", "linear"], rng, std)
        self.prior = MLP([H, H, 2 * L], ["softplus", "linear"], rng, std)

    def recognize(self, x: Tensor, y: Tensor) -> GaussianParams:
        return GaussianParams.split(self.recognition(T.concat([x, y], axis=1)))

    def prior_params(self, x: Tensor) -> GaussianParams:
        return GaussianParams.split(self.prior(x))

    def latent_terms(self, batch, x, eps):
        y = self.encode_response(batch.resp, _cast(batch.resp_mask, x))
        q = self.recognize(x, y)
        z = reparameterize(q, _cast(eps, x))
        return z, kl_pair(q, self.prior_params(x))

    def prior_latents(self, x, eps):
        return reparameterize(self.prior_params(x), _cast(eps, x))


class CVAESimple(CVAE):
    """CVAE whose prior is fixed to N(0, I)."""

    kind = "cvae-simple"

    def __init__(self, config, rng):
        VariationalGenerator.__init__(self, config, rng)
        std, H, L = config.init_std, config.hidden_dim, config.latent_dim
        self.recognition = MLP([2 * H, H, 2 * L], ["softplus", "linear"], rng, std)

    def prior_params(self, x):
        zeros = np.zeros((x.shape[0], self.config.latent_dim), dtype=x.data.dtype)
        return GaussianParams(Tensor(zeros), Tensor(zeros.copy()))

    def latent_terms(self, batch, x, eps):
        y = self.encode_response(batch.resp, _cast(batch.resp_mask, x))
        q = self.recognize(x, y)
        return reparameterize(q, _cast(eps, x)), kl_vs_standard(q)

    def prior_latents(self, x, eps):
        return Tensor(_cast(eps, x))


class AttentionDecoder(Module):
    """LSTM decoder whose output layer sees ``[h_t; context_t]``.

    Attention scores are inner products between the decoder state and the
    encoder states.
    """

    def __init__(self, vocab_size, embed_dim, hidden_dim, rng, std):
        self.embed = Embedding(vocab_size, embed_dim, rng, std)
        self.cell = LSTMCell(embed_dim, hidden_dim, rng, std)
        self.out = Linear(2 * hidden_dim, vocab_size, rng, std)

    def attend(self, h: Tensor, enc_states: Tensor, mask_bias: np.ndarray) -> tuple[Tensor, Tensor]:
        B, L, H = enc_states.shape
        scores = T.reshape(T.bmm(enc_states, T.reshape(h, (B, H, 1))), (B, L)) + mask_bias
        weights = T.softmax(scores, axis=1)
        context = T.reshape(T.bmm(T.reshape(weights, (B, 1, L)), enc_states), (B, H))
        return weights, context

    def step(self, tokens, state, enc_states: Tensor, mask_bias: np.ndarray):
        h, c = self.cell(self.embed(tokens), state)
        weights, context = self.attend(h, enc_states, mask_bias)
        return self.out(T.concat([h, context], axis=1)), (h, c), weights


def _mask_bias(mask: np.ndarray, like: Tensor) -> np.ndarray:
    return ((np.asarray(mask) - 1.0) * 1e9).astype(like.data.dtype)


class Seq2Seq(Generator):
    kind = "seq2seq"

    def __init__(self, config, rng):
        super().__init__(config, rng)
        self.decoder = AttentionDecoder(config.vocab_size, config.embed_dim, config.hidden_dim, rng,
                                        config.init_std)

    def loss(self, batch, eps=None, kl_w: float = 1.0) -> LossTerms:
        mask = _cast(batch.post_mask, self.cond_embed.weight)
        x, states = self.encode_condition(batch.post, mask)
        enc_states = T.stack(states, axis=1)
        bias = _mask_bias(mask, x)
        state = (x, Tensor(np.zeros(x.shape, dtype=x.data.dtype)))
        logits = []
        for t in range(batch.dec_in.shape[1]):
            out, state, _ = self.decoder.step(batch.dec_in[:, t], state, enc_states, bias)
            logits.append(out)
        nll_sum = self._nll(T.stack(logits, axis=1), batch)
        nll = nll_sum * (1.0 / batch.size)
        zero = Tensor(np.zeros((), dtype=x.data.dtype))
        return LossTerms(nll, nll, zero, float(nll_sum.data), batch.n_tokens)

    def decode_init(self, post_ids, n_groups, rng):
        with T.no_grad():
            x, states = self.encode_condition(np.asarray([post_ids]))
            enc_states = np.repeat(T.stack(states, axis=1).data, n_groups, axis=0)
            h = np.repeat(x.data, n_groups, axis=0)
        bias = np.zeros(enc_states.shape[:2], dtype=h.dtype)
        return (h, np.zeros_like(h), enc_states, bias), self._step

    def _step(self, state, tokens):
        h, c, enc_states, bias = state
        with T.no_grad():
            logits, (h2, c2), _ = self.decoder.step(tokens, (Tensor(h), Tensor(c)), Tensor(enc_states), bias)
        return T.log_softmax_np(logits.data), (h2.data, c2.data, enc_states, bias)


MODEL_CLASSES: dict[str, type[Generator]] = {
    "seq2seq": Seq2Seq,
    "cvae": CVAE,
    "cvae-simple": CVAESimple,
    "ctvae": CTVAE,
}


def build_model(config: ModelConfig, rng: np.random.Generator | None = None) -> Generator:
    if config.kind not in MODEL_CLASSES:
        raise ValueError(f"{config.kind!r} is not a generator kind")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return MODEL_CLASSES[config.kind](config, rng)


# -- training -------------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str, last_good: dict[str, np.ndarray] | None):
        self.step = step
        self.last_good = last_good
        super().__init__(f"loss became non-finite at step {step}: {detail}")


@dataclass
class EpochStats:
    nll_per_token: float
    kl: float
    kl_weight: float
    steps: int
    nll_per_example: float = 0.0


@dataclass
class Trainer:
    """Owns the optimizer, schedule, step counter and sampling RNG for one model."""

    model: Module
    config: ModelConfig
    rng: np.random.Generator = None
    optimizer: Adam = None
    step: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng([self.config.seed, 1])
        if self.optimizer is None:
            self.optimizer = Adam(self.model.parameters(), lr=self.config.lr)
        self.schedule = self.config.schedule()
        self._last_good = None

    def current_kl_weight(self) -> float:
        return kl_weight(self.step, self.schedule)

    def train_step(self, batch: Batch) -> LossTerms:
        model, sched = self.model, self.schedule
        w = kl_weight(self.step, sched)
        eps = model.sample_eps(batch.size, self.rng) if hasattr(model, "sample_eps") else None
        active = sched.fixed_weight is not None or sched.kl_active(self.step)
        if sched.mode == "masked":
            terms = model.loss(batch, eps, w if active else 0.0)
            self._check(terms)
            self.optimizer.zero_grad()
            T.backward(terms.total)
            self.optimizer.step()
        else:
            terms = model.loss(batch, eps, 0.0)
            self._check(terms)
            self.optimizer.zero_grad()
            T.backward(terms.nll)
            self.optimizer.step()
            if active and w > 0 and terms.kl.requires_grad:
                self.optimizer.zero_grad()
                T.backward(terms.kl * w)
                self.optimizer.step()
        self.step += 1
        return terms

    def _check(self, terms: LossTerms):
        if not np.isfinite(terms.total.data):
            raise TrainingDiverged(self.step, f"nll={terms.nll_sum}, kl={float(terms.kl.data)}", self._last_good)

    def train_epoch(self, pairs: Sequence, batch_size: int | None = None) -> EpochStats:
        if not pairs:
            raise ValueError("cannot train on an empty corpus")
        self._last_good = {k: v.data.copy() for k, v in self.model.parameters().items()}
        nll_sum = kl_sum = 0.0
        tokens = examples = steps = 0
        for batch in iter_batches(pairs, batch_size or self.config.batch_size, self.rng):
            terms = self.train_step(batch)
            nll_sum += terms.nll_sum
            kl_sum += float(terms.kl.data) * batch.size
            tokens += terms.n_tokens
            examples += batch.size
            steps += 1
        stats = EpochStats(nll_sum / tokens, kl_sum / examples, self.current_kl_weight(), steps,
                           nll_sum / examples)
        self.history.append(stats)
        return stats


def evaluate_nll(model: Generator, pairs: Sequence, rng: np.random.Generator | None = None,
                 batch_size: int = 128) -> tuple[float, float]:
    """Per-token NLL and mean KL over ``pairs``; eps is zero unless ``rng`` is given."""
    nll = kl = 0.0
    tokens = n = 0
    with T.no_grad():
        for batch in iter_batches(pairs, batch_size):
            eps = model.sample_eps(batch.size, rng) if rng is not None else None
            terms = model.loss(batch, eps, 1.0)
            nll += terms.nll_sum
            kl += float(terms.kl.data) * batch.size
            tokens += terms.n_tokens
            n += batch.size
    return nll / tokens, kl / n


def negative_elbo_per_token(terms: LossTerms, batch_size: int) -> float:
    """Per-token negative ELBO estimate; its negation lower-bounds log p(y|x) per token."""
    total = float(terms.nll.data) + float(terms.kl.data)
    return total * batch_size / terms.n_tokens
