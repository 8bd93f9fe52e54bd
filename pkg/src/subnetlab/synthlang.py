"""Synthetic languages and multilingual corpora.

A language is a first-order Markov chain over a subset of the 26-letter
global alphabet, plus an END state controlling sentence length. Related
languages are made by convex interpolation of transition tables, so a
family-similarity knob exists. "Audio" for a sentence is a run of noisy
embedding frames per character (1-3 frames each).

Vocabulary convention: CTC blank is index 0, letters 'a'..'z' are 1..26.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .ctc import min_frames
from .model import rng_for

GLOBAL_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
VOCAB_SIZE = len(GLOBAL_ALPHABET) + 1  # + blank
MIN_TEXT_LEN = 3
MAX_TEXT_LEN = 40
MAX_FRAMES_PER_CHAR = 3

ROW_SUM_TOL = 1e-6


def text_to_labels(text: str) -> list[int]:
    return [GLOBAL_ALPHABET.index(c) + 1 for c in text]


def labels_to_text(labels) -> str:
    return "".join(GLOBAL_ALPHABET[i - 1] for i in labels)


@dataclass(frozen=True)
class LanguageSpec:
    """Markov-chain sentence generator for one synthetic language."""
    id: str
    alphabet: str                 # subset of GLOBAL_ALPHABET, sorted
    initial_dist: np.ndarray      # (|alphabet|,)
    transition: np.ndarray        # (|alphabet|, |alphabet| + 1), last column = END
    mean_len: float

    def __post_init__(self):
        if not self.alphabet:
            raise ValueError("alphabet must be non-empty")
        if any(c not in GLOBAL_ALPHABET for c in self.alphabet):
            raise ValueError(f"alphabet {self.alphabet!r} not a subset of the global alphabet")
        a = len(self.alphabet)
        if self.initial_dist.shape != (a,) or self.transition.shape != (a, a + 1):
            raise ValueError("distribution shapes inconsistent with alphabet")
        if np.any(self.initial_dist < 0) or np.any(self.transition < 0):
            raise ValueError("negative probabilities")
        if abs(self.initial_dist.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("initial_dist does not sum to 1")
        if np.max(np.abs(self.transition.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("transition rows do not sum to 1")


def _random_rows(rng: np.random.Generator, n_rows: int, n_symbols: int,
                 end_prob: float) -> np.ndarray:
    rows = rng.dirichlet(np.full(n_symbols, 0.5), size=n_rows)
    rows = rows / rows.sum(axis=1, keepdims=True)
    out = np.concatenate([rows * (1.0 - end_prob),
                          np.full((n_rows, 1), end_prob)], axis=1)
    return out


def make_language(seed: int, parent: LanguageSpec | None = None,
                  alpha: float | None = None, *, language_id: str | None = None,
                  alphabet_size: int = 10, mean_len: float = 8.0) -> LanguageSpec:
    """Draw a language, optionally a family relative of `parent`.

    alpha in [0, 1] blends transition structure: 1 copies the parent
    exactly, 0 ignores it (a fresh unrelated language on the same
    alphabet). Deterministic in (seed, parent, alpha).
    """
    if parent is not None:
        if alpha is None:
            raise ValueError("alpha required when parent is given")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha {alpha} outside [0, 1]")
    rng = rng_for(seed, "language")
    if parent is None:
        letters = rng.choice(len(GLOBAL_ALPHABET), size=alphabet_size, replace=False)
        alphabet = "".join(sorted(GLOBAL_ALPHABET[i] for i in letters))
    else:
        alphabet = parent.alphabet
    a = len(alphabet)

    end_prob = 1.0 / mean_len
    fresh_init = rng.dirichlet(np.full(a, 0.5))
    fresh_init = fresh_init / fresh_init.sum()
    fresh_trans = _random_rows(rng, a, a, end_prob)

    if parent is None or alpha == 0.0:
        init, trans = fresh_init, fresh_trans
    elif alpha == 1.0:
        init, trans = parent.initial_dist.copy(), parent.transition.copy()
    else:
        init = alpha * parent.initial_dist + (1.0 - alpha) * fresh_init
        init = init / init.sum()
        trans = alpha * parent.transition + (1.0 - alpha) * fresh_trans
        trans = trans / trans.sum(axis=1, keepdims=True)

    return LanguageSpec(
        id=language_id if language_id is not None else f"lang{seed}",
        alphabet=alphabet, initial_dist=init, transition=trans, mean_len=mean_len)


def sample_text(spec: LanguageSpec, rng: np.random.Generator) -> str:
    """One sentence: length in [3, 40], symbols from spec.alphabet."""

    def draw(probs: np.ndarray) -> int:
        return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))

    end = len(spec.alphabet)
    symbols = [min(draw(spec.initial_dist), end - 1)]
    while len(symbols) < MAX_TEXT_LEN:
        row = spec.transition[symbols[-1]]
        if len(symbols) < MIN_TEXT_LEN:
            mass = row[:end].sum()
            if mass <= 0.0:
                symbols.append(symbols[-1])  # END-only row: hold the symbol
                continue
            nxt = min(draw(row[:end] / mass), end - 1)
        else:
            nxt = draw(row)
            if nxt >= end:
                break
        symbols.append(nxt)
    return "".join(spec.alphabet[i] for i in symbols)


def make_embedding_table(seed: int, input_dim: int) -> np.ndarray:
    """Per-experiment acoustic codebook: one vector per global letter."""
    return rng_for(seed, "embeddings").standard_normal((len(GLOBAL_ALPHABET), input_dim)) \
        .astype(np.float32)


def synth_frames(text: str, embedding_table: np.ndarray, rng: np.random.Generator,
                 noise_sigma: float = 0.1, min_repeats: int = 1,
                 max_repeats: int = MAX_FRAMES_PER_CHAR) -> np.ndarray:
    """Noisy frame run per character: repeats ~ Uniform{min..max}, iid Gaussian noise."""
    if not text:
        raise ValueError("cannot synthesize frames for empty text")
    input_dim = embedding_table.shape[1]
    rows = []
    for c in text:
        base = embedding_table[GLOBAL_ALPHABET.index(c)]
        r = int(rng.integers(min_repeats, max_repeats + 1))
        noise = rng.normal(0.0, noise_sigma, size=(r, input_dim)) if noise_sigma > 0 \
            else np.zeros((r, input_dim))
        rows.append(base[None, :] + noise)
    return np.concatenate(rows, axis=0).astype(np.float32)


@dataclass(frozen=True)
class Utterance:
    language_id: str
    text: str
    frames: np.ndarray


@dataclass(frozen=True)
class CorpusSpec:
    proportions: dict[str, float]
    total_utterances: int
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if any(p < 0 for p in self.proportions.values()):
            raise ValueError("proportions must be non-negative")
        if abs(sum(self.proportions.values()) - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"proportions sum to {sum(self.proportions.values())}, not 1")
        if abs(sum(self.splits) - 1.0) > ROW_SUM_TOL:
            raise ValueError("split fractions must sum to 1")
        if self.total_utterances < 0:
            raise ValueError("total_utterances must be >= 0")


def largest_remainder(weights: dict[str, float], total: int) -> dict[str, int]:
    """Integer apportionment: floors, then leftovers to largest remainders
    (ties broken by lexicographic key)."""
    keys = sorted(weights)
    exact = {k: weights[k] * total for k in keys}
    counts = {k: int(math.floor(exact[k] + 1e-9)) for k in keys}
    leftover = total - sum(counts.values())
    by_remainder = sorted(keys, key=lambda k: (-(exact[k] - math.floor(exact[k] + 1e-9)), k))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def _split_counts(n: int, splits: tuple[float, float, float]) -> tuple[int, int, int]:
    named = largest_remainder({f"{i}": f for i, f in enumerate(splits)}, n)
    return named["0"], named["1"], named["2"]


def build_corpus(corpus_spec: CorpusSpec, language_specs: dict[str, LanguageSpec],
                 seed: int, input_dim: int = 16, noise_sigma: float = 0.1,
                 embedding_table: np.ndarray | None = None) -> dict[str, list[Utterance]]:
    """Deterministic {train, val, test} corpus with per-language stratified splits.

    Pass embedding_table to share one acoustic codebook across several
    corpora drawn with different seeds (e.g. pretraining vs fine-tuning).
    """
    for lang_id in corpus_spec.proportions:
        if lang_id not in language_specs:
            raise KeyError(f"no LanguageSpec for corpus language {lang_id!r}")
    table = embedding_table if embedding_table is not None \
        else make_embedding_table(seed, input_dim)
    counts = largest_remainder(corpus_spec.proportions, corpus_spec.total_utterances)

    corpus: dict[str, list[Utterance]] = {"train": [], "val": [], "test": []}
    for lang_id in sorted(counts):
        spec = language_specs[lang_id]
        rng = rng_for(seed, "corpus", lang_id)
        utts = []
        for _ in range(counts[lang_id]):
            # resample until the frame run can emit the text under CTC
            # (repeated characters need a separating blank frame)
            for _attempt in range(1000):
                text = sample_text(spec, rng)
                frames = synth_frames(text, table, rng, noise_sigma)
                if frames.shape[0] >= min_frames(text_to_labels(text)):
                    break
            else:
                raise RuntimeError(f"could not draw a CTC-feasible utterance for {lang_id!r}")
            utts.append(Utterance(lang_id, text, frames))
        n_train, n_val, _ = _split_counts(len(utts), corpus_spec.splits)
        corpus["train"].extend(utts[:n_train])
        corpus["val"].extend(utts[n_train:n_train + n_val])
        corpus["test"].extend(utts[n_train + n_val:])
    return corpus


# Default cast: one dominant language, three mid-share, one low-share, plus
# two held-out languages (one related to "es", one unrelated) that never
# appear in the pretraining mixture.
_RAW_SHARES = {"en": 0.159, "de": 0.058, "fr": 0.055, "es": 0.051, "pl": 0.048, "ca": 0.0016}

DEFAULT_LANGUAGE_DEFS: tuple[tuple[str, int, str | None, float | None], ...] = (
    ("en", 101, None, None),
    ("de", 102, None, None),
    ("fr", 103, None, None),
    ("es", 104, None, None),
    ("pl", 105, None, None),
    ("ca", 106, None, None),
    ("as", 107, "es", 0.8),
    ("xh", 108, None, None),
)


def default_pretrain_shares() -> dict[str, float]:
    """Hour shares of the six pretraining languages, renormalized to sum to 1."""
    total = sum(_RAW_SHARES.values())
    return {k: v / total for k, v in _RAW_SHARES.items()}


def default_languages() -> dict[str, LanguageSpec]:
    specs: dict[str, LanguageSpec] = {}
    for lang_id, seed, parent, alpha in DEFAULT_LANGUAGE_DEFS:
        specs[lang_id] = make_language(
            seed, parent=specs[parent] if parent else None,
            alpha=alpha, language_id=lang_id)
    return specs


def write_corpus_jsonl(corpus: dict[str, list[Utterance]], out_dir: str) -> None:
    """One JSON-lines file per split; frames as nested float lists."""
    os.makedirs(out_dir, exist_ok=True)
    for split, utts in corpus.items():
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w", encoding="utf-8") as fh:
            for utt in utts:
                record = {"language_id": utt.language_id, "text": utt.text,
                          "frames": [[float(x) for x in row] for row in utt.frames]}
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_corpus_jsonl(in_dir: str) -> dict[str, list[Utterance]]:
    corpus: dict[str, list[Utterance]] = {}
    for split in ("train", "val", "test"):
        path = os.path.join(in_dir, f"{split}.jsonl")
        utts = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                utts.append(Utterance(rec["language_id"], rec["text"],
                                      np.asarray(rec["frames"], dtype=np.float32)))
        corpus[split] = utts
    return corpus
