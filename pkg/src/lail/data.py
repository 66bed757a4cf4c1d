"""Synthetic speech corpus.

A small probabilistic grammar produces sentences; every character maps to
one or two of twelve phonemes; each phoneme is rendered as a few copies of
its unit-norm prototype vector plus Gaussian noise.  Two noise tiers stand
in for "clean" and "other" recording conditions.

Everything is a pure function of ``(seed, params)``: each utterance draws
from its own named random stream.
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import RngState

DETERMINERS = ["the", "a", "my"]
NOUNS = ["cat", "dog", "man", "kid", "bird", "hen", "fox", "cow", "pig"]
OBJECTS = ["box", "cup", "hat", "ball", "book", "bed", "mat", "pot"]
TRANSITIVE = ["sees", "gets", "has", "hits", "likes", "takes", "holds", "pats"]
INTRANSITIVE = ["runs", "sits", "sleeps", "naps", "hops"]
ADJECTIVES = ["big", "red", "old", "hot", "sad", "tall"]
ADVERBS = ["now", "fast", "too", "here"]
PREPOSITIONS = ["on", "in", "by", "near"]
# finance-flavoured vocabulary with its own verbs
JARGON_NOUNS = ["stock", "bond", "fund", "loan", "bank", "cash", "debt", "tax"]
JARGON_VERBS = ["buys", "sells", "owes", "lends"]
JARGON = frozenset(JARGON_NOUNS + JARGON_VERBS)

SPLITS = ("train", "dev", "test_clean", "test_other", "lm")


@dataclass
class GrammarParams:
    p_adjective: float = 0.3
    p_adverb: float = 0.25
    p_prep_phrase: float = 0.3
    p_intransitive: float = 0.25
    jargon_rate: float = 0.15
    min_words: int = 3
    max_words: int = 8


def _pick(g: np.random.Generator, words):
    return words[int(g.integers(len(words)))]


def _noun_phrase(g, p: GrammarParams, nouns) -> list[str]:
    np_ = [_pick(g, DETERMINERS)]
    if g.random() < p.p_adjective:
        np_.append(_pick(g, ADJECTIVES))
    np_.append(_pick(g, nouns))
    return np_


def sample_sentence(g: np.random.Generator, p: GrammarParams) -> str:
    """One sentence from the grammar (rejection-sampled to the word limits)."""
    while True:
        if g.random() < p.jargon_rate:
            words = _noun_phrase(g, p, NOUNS + ["bank"]) + [_pick(g, JARGON_VERBS)]
            words += _noun_phrase(g, p, JARGON_NOUNS)
            if g.random() < p.p_adverb:
                words.append(_pick(g, ADVERBS))
        else:
            words = _noun_phrase(g, p, NOUNS)
            if g.random() < p.p_intransitive:
                words.append(_pick(g, INTRANSITIVE))
            else:
                words.append(_pick(g, TRANSITIVE))
                words += _noun_phrase(g, p, OBJECTS + NOUNS)
            if g.random() < p.p_adverb:
                words.append(_pick(g, ADVERBS))
            if g.random() < p.p_prep_phrase:
                words += [_pick(g, PREPOSITIONS), _pick(g, DETERMINERS), _pick(g, OBJECTS)]
        if p.min_words <= len(words) <= p.max_words:
            return " ".join(words)


def has_jargon(sentence: str) -> bool:
    return any(w in JARGON for w in sentence.split())


@dataclass
class Corpus:
    sentences: dict[str, list[str]]

    def alphabet(self) -> str:
        return "".join(sorted({c for ss in self.sentences.values() for s in ss for c in s}))


def gen_corpus(seed: int, sizes: dict[str, int], params: GrammarParams | None = None) -> Corpus:
    """Sentence-disjoint splits sampled from the grammar.

    ``sizes`` maps split name to sentence count.  Sentences are deduplicated
    globally, so no sentence appears in two splits.
    """
    params = params or GrammarParams()
    total = sum(sizes.values())
    if total < 3:
        raise ValueError("need at least 3 sentences")
    g = RngState(seed).child("corpus").generator()
    seen: set[str] = set()
    pool: list[str] = []
    attempts = 0
    while len(pool) < total:
        s = sample_sentence(g, params)
        attempts += 1
        if attempts > 200 * total:
            raise RuntimeError(f"grammar cannot produce {total} distinct sentences")
        if s not in seen:
            seen.add(s)
            pool.append(s)
    out: dict[str, list[str]] = {}
    pos = 0
    for name, n in sizes.items():
        out[name] = pool[pos:pos + n]
        pos += n
    if "train" in out:
        _cover_alphabet(out)
    return Corpus(out)


def _cover_alphabet(splits: dict[str, list[str]]) -> None:
    # swap sentences into train until every character occurs there
    train = splits["train"]
    for _ in range(1000):
        have = {c for t in train for c in t}
        others = [(n, i, s) for n, ss in splits.items() if n != "train" for i, s in enumerate(ss)]
        missing = sorted({c for _, _, s in others for c in s} - have)
        if not missing:
            return
        name, i, _ = next(o for o in others if missing[0] in o[2])
        counts = Counter(c for t in train for c in set(t))
        j = next(j for j, t in enumerate(train) if all(counts[c] > 1 for c in set(t)))
        train[j], splits[name][i] = splits[name][i], train[j]
    raise RuntimeError("could not cover the alphabet with the train split")


# -- acoustics ---------------------------------------------------------------


@dataclass
class PhonemeInventory:
    prototypes: np.ndarray  # (n_phonemes, d_feat), unit rows
    lexicon: dict[str, tuple[int, ...]]

    @property
    def n_phonemes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d_feat(self) -> int:
        return self.prototypes.shape[1]

    def phonemes(self, text: str) -> list[int]:
        out: list[int] = []
        for c in text:
            if c not in self.lexicon:
                raise KeyError(f"character {c!r} has no lexicon entry")
            out.extend(self.lexicon[c])
        return out

    def nearest(self, frames: np.ndarray) -> np.ndarray:
        d2 = ((frames[:, None, :] - self.prototypes[None]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)


def make_inventory(seed: int, alphabet: str, n_phonemes: int = 12, d_feat: int = 16) -> PhonemeInventory:
    """Orthonormal prototypes and a character lexicon.

    Space maps to phoneme 0 (a pause).  The first ``n_phonemes - 1`` letters
    (in a seeded shuffle) get one phoneme each; the remaining letters get a
    distinct ordered pair, so some letter pairs sound like single letters.
    """
    if n_phonemes > d_feat:
        raise ValueError("orthonormal prototypes need n_phonemes <= d_feat")
    g = RngState(seed).child("inventory").generator()
    q, _ = np.linalg.qr(g.normal(size=(d_feat, d_feat)))
    protos = q[:, :n_phonemes].T.copy()
    letters = [c for c in alphabet if c != " "]
    order = [letters[i] for i in g.permutation(len(letters))]
    singles = n_phonemes - 1
    lexicon: dict[str, tuple[int, ...]] = {" ": (0,)}
    pairs = [(a, b) for a in range(1, n_phonemes) for b in range(1, n_phonemes) if a != b]
    pair_order = g.permutation(len(pairs))
    k = 0
    for i, c in enumerate(order):
        if i < singles:
            lexicon[c] = (i + 1,)
        else:
            lexicon[c] = pairs[pair_order[k]]
            k += 1
    return PhonemeInventory(protos, lexicon)


@dataclass
class FeatureSequence:
    text: str
    phonemes: list[int]
    durations: list[int]
    features: np.ndarray
    noise_sigma: float


def render_utterance(text: str, inventory: PhonemeInventory, noise_sigma: float,
                     rng: RngState | np.random.Generator, d_min: int = 2, d_max: int = 4) -> FeatureSequence:
    g = rng.generator() if isinstance(rng, RngState) else rng
    ph = inventory.phonemes(text)
    dur = g.integers(d_min, d_max + 1, size=len(ph)).tolist()
    clean = np.repeat(inventory.prototypes[ph], dur, axis=0) if ph else np.zeros((0, inventory.d_feat))
    noise = g.normal(size=clean.shape) * noise_sigma if noise_sigma > 0 else 0.0
    return FeatureSequence(text, ph, dur, clean + noise, noise_sigma)


# -- dataset -------------------------------------------------------------------


@dataclass
class DataParams:
    n_train: int = 240
    n_dev: int = 40
    n_test: int = 100
    n_lm: int = 4000
    sigma_clean: float = 0.2
    sigma_other: float = 0.45
    d_feat: int = 16
    n_phonemes: int = 12
    d_min: int = 2
    d_max: int = 4
    jargon_rate: float = 0.15


@dataclass
class Utterance:
    split: str
    text: str
    features: np.ndarray


@dataclass
class Dataset:
    utterances: list[Utterance]
    lm_text: list[str]
    d_feat: int

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]

    def alphabet(self) -> str:
        chars = {c for u in self.utterances for c in u.text} | {c for s in self.lm_text for c in s}
        return "".join(sorted(chars))

    def digest(self) -> str:
        return hashlib.sha256(dumps(self)).hexdigest()


def generate_dataset(seed: int, params: DataParams | None = None) -> Dataset:
    """Render the default train/dev/test splits plus a text-only LM corpus.

    Train and dev utterances alternate between the two noise tiers; every
    test sentence is rendered once per tier so the two test splits differ
    only in noise.
    """
    p = params or DataParams()
    corpus = gen_corpus(seed, {"train": p.n_train, "dev": p.n_dev, "test": p.n_test, "lm": p.n_lm},
                        GrammarParams(jargon_rate=p.jargon_rate))
    inv = make_inventory(seed, corpus.alphabet(), p.n_phonemes, p.d_feat)
    root = RngState(seed).child("render")
    utts: list[Utterance] = []

    def render(split, i, text, sigma):
        fs = render_utterance(text, inv, sigma, root.child(f"{split}/{i}"), p.d_min, p.d_max)
        utts.append(Utterance(split, text, fs.features))

    for split in ("train", "dev"):
        for i, text in enumerate(corpus.sentences[split]):
            render(split, i, text, p.sigma_clean if i % 2 == 0 else p.sigma_other)
    for i, text in enumerate(corpus.sentences["test"]):
        render("test_clean", i, text, p.sigma_clean)
    for i, text in enumerate(corpus.sentences["test"]):
        render("test_other", i, text, p.sigma_other)
    return Dataset(utts, list(corpus.sentences["lm"]), p.d_feat)


# -- file format ---------------------------------------------------------------
#
#   magic "LAILDATA" | version u32 | n_records u32 | d_feat u32
#   record: split u8 | text_len u32 | text utf-8 | T0 u32 | T0*d_feat f64
#
# Text-only LM sentences are records with split "lm" and T0 = 0.

DATA_MAGIC = b"LAILDATA"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def dumps(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    records = [(u.split, u.text, u.features) for u in ds.utterances]
    records += [("lm", s, np.zeros((0, ds.d_feat))) for s in ds.lm_text]
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<III", DATA_VERSION, len(records), ds.d_feat))
    for split, text, feats in records:
        raw = text.encode("utf-8")
        buf.write(struct.pack("<BI", SPLITS.index(split), len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", feats.shape[0]))
        buf.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> Dataset:
    pos = 0

    def take(n):
        nonlocal pos
        if n < 0 or pos + n > len(blob):
            raise DatasetFormatError(f"truncated dataset: record needs {n} bytes at offset {pos}, file has {len(blob)}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(8) != DATA_MAGIC:
        raise DatasetFormatError("not a LAIL dataset (bad magic)")
    version, count, d_feat = struct.unpack("<III", take(12))
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {DATA_VERSION})")
    utts, lm = [], []
    for _ in range(count):
        tag, tlen = struct.unpack("<BI", take(5))
        if tag >= len(SPLITS):
            raise DatasetFormatError(f"unknown split tag {tag}")
        text = take(tlen).decode("utf-8")
        (t0,) = struct.unpack("<I", take(4))
        feats = np.frombuffer(take(8 * t0 * d_feat), dtype="<f8").reshape(t0, d_feat).astype(np.float64)
        if SPLITS[tag] == "lm":
            lm.append(text)
        else:
            utts.append(Utterance(SPLITS[tag], text, feats))
    if pos != len(blob):
        raise DatasetFormatError(f"{len(blob) - pos} trailing bytes after the last record")
    return Dataset(utts, lm, d_feat)


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dumps(ds))


def load_dataset(path) -> Dataset:
    return loads(Path(path).read_bytes())
