"""Corpora, vocabulary, batching and the synthetic 1-to-n corpus generator."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ["<pad>", "<unk>", "<s>", "</s>"]
MAX_LEN = 30


class CorpusFormatError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


@dataclass
class Corpus:
    name: str
    pairs: list[tuple[tuple[str, ...], tuple[str, ...]]]
    rejected: int = 0
    index: dict[tuple[str, ...], list[tuple[str, ...]]] = field(init=False, repr=False)

    def __post_init__(self):
        self.pairs = [(tuple(p), tuple(r)) for p, r in self.pairs]
        for post, resp in self.pairs:
            if not post or not resp:
                raise ValueError(f"{self.name}: empty post or response")
        self.index = defaultdict(list)
        for post, resp in self.pairs:
            self.index[post].append(resp)
        self.index = dict(self.index)

    def __len__(self):
        return len(self.pairs)

    @property
    def posts(self) -> list[tuple[str, ...]]:
        return list(self.index)

    def responses(self) -> list[tuple[str, ...]]:
        return [r for _, r in self.pairs]


def check_disjoint(*corpora: Corpus) -> None:
    seen: dict[tuple[str, ...], str] = {}
    for corpus in corpora:
        for post in corpus.index:
            other = seen.setdefault(post, corpus.name)
            if other != corpus.name:
                raise ValueError(f"post {' '.join(post)!r} appears in both {other} and {corpus.name}")


def load_corpus(path, name: str | None = None) -> Corpus:
    """Read a tab-separated ``post<TAB>response`` file (UTF-8, whitespace tokens).

    A line without exactly one tab is a format error; a record with an
    empty side is dropped and counted in ``Corpus.rejected``.
    """
    path = Path(path)
    pairs, rejected = [], 0
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(path, line_no, f"expected 2 tab-separated fields, got {len(fields)}")
            post, resp = fields[0].split(), fields[1].split()
            if not post or not resp:
                rejected += 1
                continue
            pairs.append((post, resp))
    if rejected:
        log.info("%s: rejected %d records with an empty field", path, rejected)
    return Corpus(name or path.stem, pairs, rejected=rejected)


def write_corpus(corpus: Corpus, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for post, resp in corpus.pairs:
            fh.write(f"{' '.join(post)}\t{' '.join(resp)}\n")


def filter_by_frequency(corpus: Corpus, min_freq: int) -> Corpus:
    """Drop pairs containing any token seen fewer than ``min_freq`` times."""
    counts = Counter(tok for p, r in corpus.pairs for tok in (*p, *r))
    kept = [(p, r) for p, r in corpus.pairs if all(counts[t] >= min_freq for t in (*p, *r))]
    return Corpus(corpus.name, kept, rejected=corpus.rejected + len(corpus.pairs) - len(kept))


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out


def build_vocab(corpus: Corpus | Iterable[Corpus], cap: int = 35000) -> Vocab:
    """Keep the ``cap - 4`` most frequent tokens; ties go to the lexicographically smaller token."""
    corpora = [corpus] if isinstance(corpus, Corpus) else list(corpus)
    counts = Counter(tok for c in corpora for p, r in c.pairs for tok in (*p, *r))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: max(0, cap - len(SPECIALS))]])


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    post: np.ndarray        # [B, Lx] ids
    post_mask: np.ndarray   # [B, Lx]
    resp: np.ndarray        # [B, Ly] ids (response body, output-encoder input)
    resp_mask: np.ndarray
    dec_in: np.ndarray      # [B, Ly+1] <s> + response
    dec_out: np.ndarray     # [B, Ly+1] response + </s>
    dec_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.post.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.dec_mask.sum())


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def encode_pairs(corpus: Corpus, vocab: Vocab, max_len: int = MAX_LEN) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(p[:max_len]), vocab.encode(r[:max_len])) for p, r in corpus.pairs]


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    if not pairs:
        raise ValueError("empty batch")
    post, post_mask = _pad([p for p, _ in pairs])
    resp, resp_mask = _pad([r for _, r in pairs])
    dec_in, dec_mask = _pad([[BOS, *r] for _, r in pairs])
    dec_out, _ = _pad([[*r, EOS] for _, r in pairs])
    return Batch(post, post_mask, resp, resp_mask, dec_in, dec_out, dec_mask)


def iter_batches(pairs: Sequence, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    order = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        yield make_batch([pairs[i] for i in order[start:start + batch_size]])


# -- synthetic corpus ----------------------------------------------------------

TOPICS = {
    "rain": ["umbrella", "cloud", "storm", "puddle"],
    "coffee": ["latte", "cup", "bean", "cafe"],
    "football": ["goal", "match", "striker", "stadium"],
    "music": ["song", "album", "guitar", "singer"],
    "movie": ["film", "actor", "cinema", "ticket"],
    "cat": ["kitten", "paw", "whisker", "purr"],
    "dog": ["puppy", "leash", "bark", "walk"],
    "beijing": ["hutong", "subway", "smog", "palace"],
    "exam": ["grade", "teacher", "paper", "library"],
    "travel": ["flight", "hotel", "passport", "luggage"],
    "cooking": ["recipe", "noodle", "kitchen", "dumpling"],
    "game": ["level", "boss", "console", "player"],
    "phone": ["screen", "battery", "app", "charger"],
    "weekend": ["brunch", "nap", "party", "picnic"],
    "birthday": ["cake", "gift", "candle", "wish"],
    "summer": ["sun", "icecream", "heat", "holiday"],
    "winter": ["snow", "scarf", "frost", "hotpot"],
    "book": ["novel", "chapter", "author", "page"],
    "gym": ["workout", "muscle", "treadmill", "coach"],
    "beach": ["wave", "sand", "shell", "surf"],
}
ADJECTIVES = ["great", "awful", "cute", "crazy", "nice", "boring", "amazing", "weird", "cool", "sad", "funny", "lovely"]
VERBS = ["love", "hate", "miss", "want", "need", "like", "enjoy", "remember", "watch", "try"]
TIMES = ["today", "tonight", "tomorrow", "again", "now", "lately", "forever", "sometimes"]

POST_TEMPLATES = [
    "i {verb} {topic} {time}",
    "the {noun} of {topic} is so {adj}",
    "{time} the {topic} {noun} was {adj}",
    "who wants {topic} and {noun} with me {time}",
    "my {noun} {verb} {topic} {time}",
    "{adj} {topic} {noun} {time} right",
]
# (template, weight): a few short templates dominate, mirroring generic chat replies
RESPONSE_TEMPLATES = [
    ("{topic} is {adj}", 6.0),
    ("haha {topic}", 6.0),
    ("i {verb} {topic} too", 4.0),
    ("{adj} {noun} for {topic} {time}", 1.0),
    ("me too i {verb} {topic} {time}", 1.0),
    ("let us {verb} {topic} and {noun} {time}", 1.0),
    ("{topic} {noun} is my favourite", 1.0),
    ("no way {topic} is {adj} {time}", 1.0),
    ("the {noun} makes {topic} {adj}", 1.0),
]


def _fill(template: str, topic: str, rng: np.random.Generator) -> tuple[str, ...]:
    slots = {
        "topic": topic,
        "noun": TOPICS[topic][rng.integers(len(TOPICS[topic]))],
        "adj": ADJECTIVES[rng.integers(len(ADJECTIVES))],
        "verb": VERBS[rng.integers(len(VERBS))],
        "time": TIMES[rng.integers(len(TIMES))],
    }
    return tuple(template.format(**slots).split())


def gen_synthetic(seed: int, n_posts: int = 500, mean_responses: float = 19.0,
                  split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> tuple[Corpus, Corpus, Corpus]:
    """Generate train/dev/test corpora with a 1-to-n post/response mapping.

    Each post names one topic word and every response to it repeats that
    word, so coherence is learnable from surface tokens.  Response counts
    are ``1 + Poisson(mean_responses - 1)`` (floored at 2) and responses to
    one post are distinct.  Splits partition the posts.
    """
    if n_posts < 3:
        raise ValueError("need at least 3 posts for three disjoint splits")
    rng = np.random.default_rng(seed)
    topics = list(TOPICS)
    weights = np.array([w for _, w in RESPONSE_TEMPLATES])
    weights = weights / weights.sum()

    posts: list[tuple[tuple[str, ...], str]] = []
    seen = set()
    while len(posts) < n_posts:
        topic = topics[rng.integers(len(topics))]
        post = _fill(POST_TEMPLATES[rng.integers(len(POST_TEMPLATES))], topic, rng)
        if post not in seen:
            seen.add(post)
            posts.append((post, topic))

    grouped = []
    for post, topic in posts:
        n = max(2, 1 + int(rng.poisson(mean_responses - 1)))
        responses: list[tuple[str, ...]] = []
        tries = 0
        while len(responses) < n and tries < 50 * n:
            tries += 1
            template = RESPONSE_TEMPLATES[rng.choice(len(RESPONSE_TEMPLATES), p=weights)][0]
            resp = _fill(template, topic, rng)
            if resp not in responses:
                responses.append(resp)
        grouped.append((post, responses))

    n_train = max(1, int(round(split[0] * n_posts)))
    n_dev = max(1, int(round(split[1] * n_posts)))
    n_train = min(n_train, n_posts - n_dev - 1)
    bounds = [(0, n_train), (n_train, n_train + n_dev), (n_train + n_dev, n_posts)]
    names = ["train", "dev", "test"]
    out = []
    for name, (lo, hi) in zip(names, bounds):
        pairs = [(post, r) for post, responses in grouped[lo:hi] for r in responses]
        out.append(Corpus(name, pairs))
    return tuple(out)


def topic_of(tokens: Sequence[str]) -> str | None:
    for tok in tokens:
        if tok in TOPICS:
            return tok
    return None
