"""Tokenisation, TSV ingestion, synthetic tasks and evaluation metrics."""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import CLS_ID, PAD_ID, SEP_ID, UNK_ID

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"]
INPUT_FORMATS = ("single_sentence", "sentence_pair", "passage_question_answer")
METRICS = ("accuracy", "f1", "matthews")
NUM_CHOICES = 4
MAX_MALFORMED_FRACTION = 0.10

_WORD = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    pass


@dataclass
class TaskSpec:
    name: str = "task"
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    input_format: str = "single_sentence"
    max_len: int = 64
    metric: str = "accuracy"

    def __post_init__(self):
        if self.input_format not in INPUT_FORMATS:
            raise ValueError(f"input_format must be one of {INPUT_FORMATS}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.max_len < 3:
            raise ValueError("max_len must fit CLS, one token and SEP")

    @property
    def num_fields(self) -> int:
        return {"single_sentence": 1, "sentence_pair": 2, "passage_question_answer": 6}[self.input_format]


@dataclass
class Example:
    ids: list            # list[int], or one list per answer choice
    label: float | int
    line: int = 0


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, texts, min_freq: int = 2) -> "Vocab":
        counts = Counter(w for t in texts for w in words(t))
        kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls(kept)

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def to_list(self) -> list[str]:
        return self.itos[len(SPECIAL_TOKENS):]


def _truncate(segments: list[list[int]], budget: int) -> list[list[int]]:
    segments = [list(s) for s in segments]
    while sum(map(len, segments)) > budget:
        longest = max(range(len(segments)), key=lambda i: (len(segments[i]), -i))
        segments[longest].pop()
    return segments


def _pack(segments: list[list[int]], max_len: int) -> list[int]:
    segments = [s for s in segments if s] or [[]]
    segments = _truncate(segments, max_len - 1 - len(segments))
    ids = [CLS_ID]
    for s in segments:
        ids += s + [SEP_ID]
    return ids


def tokenize(texts, vocab: Vocab, spec: TaskSpec) -> list:
    """Token ids ``[CLS] a [SEP] (b [SEP])``; a list of such per answer choice
    for passage/question/answer input."""
    if isinstance(texts, str):
        texts = [texts]
    enc = [vocab.encode(words(t)) for t in texts]
    if spec.input_format == "passage_question_answer":
        passage, question, *answers = enc
        return [_pack([passage, question, a], spec.max_len) for a in answers]
    return _pack(enc, spec.max_len)


@dataclass
class Corpus:
    examples: list[Example]
    vocab: Vocab
    labels: list[str] | None          # class names; None for regression
    malformed: list[int] = field(default_factory=list)


def _parse_label(raw: str, spec: TaskSpec, regression: bool):
    if spec.input_format == "passage_question_answer":
        raw = raw.strip().upper()
        if raw in "ABCD" and len(raw) == 1:
            return "ABCD".index(raw)
        value = int(raw)
        if not 0 <= value < NUM_CHOICES:
            raise ValueError(raw)
        return value
    if regression:
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError(raw)
        return value
    if not raw.strip():
        raise ValueError("empty label")
    return raw.strip()


def read_tsv(path, spec: TaskSpec, regression: bool = False):
    """Rows of (label, texts, line number) plus the numbers of malformed lines."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    lines = [(i, l) for i, l in enumerate(lines, start=1) if l.strip()]
    if not lines:
        raise DataError(f"{path}: no examples (empty file)")
    rows, bad = [], []
    for lineno, line in lines:
        cols = line.split("\t")
        n = spec.num_fields
        if spec.input_format == "sentence_pair" and len(cols) == 2:
            cols.append("")
        if len(cols) != n + 1 or not cols[1].strip():
            bad.append(lineno)
            continue
        try:
            label = _parse_label(cols[0], spec, regression)
        except ValueError:
            bad.append(lineno)
            continue
        rows.append((label, cols[1:], lineno))
    for lineno in bad:
        log.warning("%s:%d: malformed line skipped", path, lineno)
    if len(bad) > MAX_MALFORMED_FRACTION * len(lines):
        raise DataError(f"{path}: {len(bad)} of {len(lines)} lines malformed (limit 10%)")
    return rows, bad


def ingest_dataset(path, spec: TaskSpec, vocab: Vocab | None = None,
                   labels: list[str] | None = None, seed: int = 0,
                   regression: bool = False, min_freq: int = 2) -> Corpus:
    """Parse, tokenise and shuffle a TSV split.

    Pass ``vocab``/``labels`` from the training split when reading dev or test
    data; otherwise both are built from this file.
    """
    rows, bad = read_tsv(path, spec, regression)
    if vocab is None:
        vocab = Vocab.build((t for _, texts, _ in rows for t in texts), min_freq=min_freq)
    mc = spec.input_format == "passage_question_answer"
    if not regression and not mc:
        if labels is None:
            labels = sorted({r[0] for r in rows}, key=lambda s: (len(s), s))
        index = {name: i for i, name in enumerate(labels)}
        unknown = {r[0] for r in rows} - set(index)
        if unknown:
            raise DataError(f"{path}: labels {sorted(unknown)} not seen in training data")
    examples = []
    for label, texts, lineno in rows:
        y = label if (regression or mc) else index[label]
        examples.append(Example(tokenize(texts, vocab, spec), y, lineno))
    order = np.random.default_rng(seed).permutation(len(examples))
    examples = [examples[i] for i in order]
    log.info("%s: %d examples, %d malformed lines skipped", path, len(examples), len(bad))
    return Corpus(examples, vocab, None if (regression or mc) else labels, bad)


@dataclass
class Dataset:
    """Padded id array ``[N, n]`` (``[N, C, n]`` for multiple choice) plus labels."""
    ids: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def num_choices(self) -> int | None:
        return self.ids.shape[1] if self.ids.ndim == 3 else None

    def subset(self, idx) -> "Dataset":
        return Dataset(self.ids[idx], self.labels[idx])


def to_dataset(examples: Sequence[Example], max_len: int) -> Dataset:
    def pad(ids):
        if ids[0] != CLS_ID:
            raise DataError("example does not start with CLS")
        if len(ids) > max_len:
            raise DataError(f"example longer than max_len={max_len}")
        return ids + [PAD_ID] * (max_len - len(ids))

    rows = [[pad(c) for c in e.ids] if isinstance(e.ids[0], list) else pad(e.ids)
            for e in examples]
    return Dataset(np.asarray(rows, dtype=np.int64), np.asarray([e.label for e in examples]))


# --- synthetic tasks -------------------------------------------------------

MARKERS = (("sun", "sky", "sea", "star"), ("ash", "oak", "elm", "ivy"))
KEYWORDS = ("north", "south", "east", "west", "up", "down", "left", "right")
SYNTHETIC_KINDS = ("marker_majority", "keyword_pair", "long_noise")


def _noise(rng, n: int, vocab_size: int = 50) -> list[str]:
    return [f"w{int(i):02d}" for i in rng.integers(0, vocab_size, size=n)]


def synthetic_rows(kind: str, size: int, seed: int = 0, length: int = 60) -> list[tuple]:
    """Labelled rows where a few planted tokens decide the label.

    * ``marker_majority``: ``length`` words, 3 of them markers drawn from two
      classes; the label is the majority marker class.
    * ``keyword_pair``: two noisy sentences each hiding one keyword; label 1
      when the keywords match.
    * ``long_noise``: one class marker hidden in ``length`` noise words.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(size):
        if kind == "marker_majority":
            text = _noise(rng, length - 3)
            classes = rng.integers(0, 2, size=3)
            for slot, c in zip(sorted(rng.choice(length, size=3, replace=False)), classes):
                text.insert(int(slot), MARKERS[c][rng.integers(0, 4)])
            rows.append((int(classes.sum() >= 2), " ".join(text)))
        elif kind == "keyword_pair":
            same = int(rng.integers(0, 2))
            k1 = int(rng.integers(0, len(KEYWORDS)))
            k2 = k1 if same else int((k1 + rng.integers(1, len(KEYWORDS))) % len(KEYWORDS))
            half = length // 2 - 1
            a, b = _noise(rng, half), _noise(rng, half)
            a.insert(int(rng.integers(0, half + 1)), KEYWORDS[k1])
            b.insert(int(rng.integers(0, half + 1)), KEYWORDS[k2])
            rows.append((same, " ".join(a), " ".join(b)))
        else:
            c = int(rng.integers(0, 2))
            text = _noise(rng, length - 1)
            text.insert(int(rng.integers(0, length)), MARKERS[c][rng.integers(0, 4)])
            rows.append((c, " ".join(text)))
    return rows


def synthetic_task_generator(kind: str, size: int, seed: int, path=None, length: int = 60) -> str:
    """Write (or return) a TSV compatible with :func:`ingest_dataset`."""
    text = "".join("\t".join(str(c) for c in row) + "\n"
                   for row in synthetic_rows(kind, size, seed, length))
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --- metrics -----------------------------------------------------------------

def accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    return float((pred == gold).mean())


def f1(pred, gold, positive: int = 1) -> float:
    pred, gold = np.asarray(pred) == positive, np.asarray(gold) == positive
    tp = float(np.sum(pred & gold))
    denom = float(pred.sum() + gold.sum())
    return 2 * tp / denom if denom else 0.0


def matthews(pred, gold) -> float:
    pred, gold = np.asarray(pred).astype(bool), np.asarray(gold).astype(bool)
    tp, tn = np.sum(pred & gold), np.sum(~pred & ~gold)
    fp, fn = np.sum(pred & ~gold), np.sum(~pred & gold)
    denom = math.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
    return float(tp * tn - fp * fn) / denom if denom else 0.0


METRIC_FUNCTIONS = {"accuracy": accuracy, "f1": f1, "matthews": matthews}
