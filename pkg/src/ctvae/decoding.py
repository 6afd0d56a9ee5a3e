"""Beam search and multi-response candidate generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import BOS, EOS, PAD

# step_fn(state, tokens[N]) -> (log_probs [N, V], new_state); state is a tuple of arrays with leading dim N
StepFn = Callable[[tuple, np.ndarray], tuple[np.ndarray, tuple]]


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False
    state: tuple | None = None

    def key(self):
        return (-self.logprob, self.tokens)


def _take(state: tuple, idx: np.ndarray) -> tuple:
    return tuple(s[idx] for s in state)


def beam_search(step_fn: StepFn, init_state: tuple, beam_size: int, max_len: int,
                n_groups: int = 1, bos: int = BOS, eos: int = EOS) -> list[list[Hypothesis]]:
    """Length-unnormalised beam search run for ``n_groups`` independent searches at once.

    ``init_state`` has one row per group.  At every step each live
    hypothesis is expanded by every token; the pool of already finished
    hypotheses and the expansions is cut back to the best ``beam_size``.
    A hypothesis finishes when it emits ``eos`` or reaches ``max_len``
    tokens.  Ties are broken by the lexicographically smaller token
    sequence, i.e. the lower token id.  Expansions with log-probability
    ``-inf`` are never kept.  Returns, per group, up to ``beam_size``
    finished hypotheses sorted best first.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    live: list[list[Hypothesis]] = [[Hypothesis((), 0.0)] for _ in range(n_groups)]
    finished: list[list[Hypothesis]] = [[] for _ in range(n_groups)]
    rows_state = init_state
    row_owner = [(g, 0) for g in range(n_groups)]
    last = np.full(n_groups, bos, dtype=np.int64)

    for length in range(1, max_len + 1):
        if not row_owner:
            break
        logp, new_state = step_fn(rows_state, last)
        logp = np.asarray(logp, dtype=np.float64)
        V = logp.shape[1]
        by_group: dict[int, list[int]] = {}
        for r, (g, _) in enumerate(row_owner):
            by_group.setdefault(g, []).append(r)

        next_rows, next_owner, next_last = [], [], []
        for g, rows in by_group.items():
            base = np.array([live[g][row_owner[r][1]].logprob for r in rows])
            scores = (base[:, None] + logp[rows]).reshape(-1)
            keep = min(beam_size, scores.size)
            # everything tied with the cut-off survives into the exact sort below
            cutoff = np.partition(scores, scores.size - keep)[scores.size - keep]
            cand_idx = np.nonzero((scores >= cutoff) & np.isfinite(scores))[0]
            pool = list(finished[g])
            for flat in cand_idx:
                ri, tok = divmod(int(flat), V)
                parent = live[g][row_owner[rows[ri]][1]]
                done = tok == eos or length == max_len
                pool.append(Hypothesis(parent.tokens + (tok,), float(scores[flat]), done, (rows[ri],)))
            pool.sort(key=Hypothesis.key)
            pool = pool[:beam_size]
            finished[g] = [h for h in pool if h.finished]
            live[g] = []
            for h in pool:
                if h.finished:
                    h.state = None
                    continue
                next_owner.append((g, len(live[g])))
                next_rows.append(h.state[0])
                next_last.append(h.tokens[-1])
                h.state = None
                live[g].append(h)
        row_owner = next_owner
        if next_rows:
            idx = np.asarray(next_rows, dtype=np.int64)
            rows_state = _take(new_state, idx)
            last = np.asarray(next_last, dtype=np.int64)
    return [sorted(f, key=Hypothesis.key) for f in finished]


def greedy_decode(step_fn: StepFn, init_state: tuple, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    state, last = init_state, np.array([bos])
    tokens, total = [], 0.0
    for _ in range(max_len):
        logp, state = step_fn(state, last)
        tok = int(np.argmax(logp[0]))
        total += float(logp[0, tok])
        tokens.append(tok)
        if tok == eos:
            break
        last = np.array([tok])
    return Hypothesis(tuple(tokens), total, True)


def forced_logprob(step_fn: StepFn, init_state: tuple, tokens: Sequence[int], bos: int = BOS) -> float:
    """Log-probability of ``tokens`` (including any trailing EOS) under teacher forcing."""
    state, last = init_state, np.array([bos])
    total = 0.0
    for tok in tokens:
        logp, state = step_fn(state, last)
        total += float(logp[0, tok])
        last = np.array([tok])
    return total


@dataclass
class Candidate:
    tokens: tuple[int, ...]      # response ids without EOS
    loglik: float                # log p(response + EOS | condition)
    sample: int                  # index of the latent sample (or beam rank for seq2seq)


def _ban(step: StepFn, banned: Sequence[int]) -> StepFn:
    """Forbid ``banned`` ids without renormalising, so scores stay model log-probs."""

    def wrapped(state, tokens):
        logp, new_state = step(state, tokens)
        logp = np.array(logp, dtype=np.float64)
        logp[:, list(banned)] = -np.inf
        return logp, new_state

    return wrapped


def _strip(tokens: tuple[int, ...], eos: int = EOS) -> tuple[int, ...]:
    return tokens[:-1] if tokens and tokens[-1] == eos else tokens


def generate_candidates(model, post_ids: Sequence[int], n_z: int | None = None, beam_size: int | None = None,
                        seed: int = 0, max_len: int | None = None) -> list[Candidate]:
    """Multiple responses for one post.

    Variational models draw ``n_z`` latent samples and keep the best beam
    per sample.  Seq2Seq runs one beam of ``seq2seq_beam`` and returns all
    finished hypotheses.  PAD and BOS are never generated.
    """
    cfg = model.config
    max_len = cfg.max_len if max_len is None else max_len
    rng = np.random.default_rng(seed)
    if model.kind == "seq2seq":
        B = cfg.seq2seq_beam if beam_size is None else beam_size
        state, step = model.decode_init(post_ids, 1, rng)
        hyps = beam_search(_ban(step, (PAD, BOS)), state, B, max_len)[0]
        return [Candidate(_strip(h.tokens), h.logprob, i) for i, h in enumerate(hyps)]
    n_z = cfg.n_z if n_z is None else n_z
    if n_z < 1:
        raise ValueError("n_z must be >= 1")
    state, step = model.decode_init(post_ids, n_z, rng)
    B = cfg.beam_size if beam_size is None else beam_size
    groups = beam_search(_ban(step, (PAD, BOS)), state, B, max_len, n_groups=n_z)
    return [Candidate(_strip(g[0].tokens), g[0].logprob, i) for i, g in enumerate(groups)]
