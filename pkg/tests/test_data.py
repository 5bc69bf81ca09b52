import numpy as np
import pytest

from fcakit.data import (DataError, TaskSpec, Vocab, accuracy, f1, ingest_dataset, matthews,
                         synthetic_rows, synthetic_task_generator, to_dataset, tokenize, words)
from fcakit.encoder import CLS_ID, PAD_ID, SEP_ID, UNK_ID


@pytest.fixture
def vocab():
    return Vocab(["the", "cat", "sat", "dog", "ran", "."])


def test_special_ids(vocab):
    assert (CLS_ID, SEP_ID, PAD_ID, UNK_ID) == (0, 1, 2, 3)
    assert vocab.itos[:4] == ["[CLS]", "[SEP]", "[PAD]", "[UNK]"]


def test_words_lowercase_and_punctuation():
    assert words("The Cat, sat!") == ["the", "cat", ",", "sat", "!"]


def test_tokenize_single(vocab):
    ids = tokenize("The cat sat on.", vocab, TaskSpec())
    assert ids == [CLS_ID, 4, 5, 6, UNK_ID, 9, SEP_ID]


def test_tokenize_pair_empty_second(vocab):
    ids = tokenize(["the cat", ""], vocab, TaskSpec(input_format="sentence_pair"))
    assert ids == [CLS_ID, 4, 5, SEP_ID]
    both = tokenize(["the cat", "dog"], vocab, TaskSpec(input_format="sentence_pair"))
    assert both == [CLS_ID, 4, 5, SEP_ID, 7, SEP_ID]


def test_tokenize_truncation(vocab):
    ids = tokenize(" ".join(["cat"] * 50), vocab, TaskSpec(max_len=10))
    assert len(ids) == 10 and ids[0] == CLS_ID and ids[-1] == SEP_ID
    pair = tokenize(["cat " * 20, "dog dog"], vocab, TaskSpec(max_len=10, input_format="sentence_pair"))
    assert len(pair) == 10 and pair[-1] == SEP_ID and pair.count(SEP_ID) == 2


def test_tokenize_round_trip(vocab):
    spec = TaskSpec()
    assert tokenize("the dog ran", vocab, spec) == tokenize("the dog ran", vocab, spec)


def test_vocab_min_freq():
    v = Vocab.build(["a a b", "a c c"], min_freq=2)
    assert v.to_list() == ["a", "c"]


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(input_format="triple")
    with pytest.raises(ValueError):
        TaskSpec(metric="bleu")


def _write(tmp_path, text, name="d.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ingest_basic(tmp_path):
    p = _write(tmp_path, "pos\tthe cat sat\nneg\tthe dog ran\npos\tthe cat ran\n")
    c = ingest_dataset(p, TaskSpec(), seed=3, min_freq=1)
    assert c.labels == ["neg", "pos"]
    assert len(c.examples) == 3 and c.malformed == []
    assert all(e.ids[0] == CLS_ID and e.ids[-1] == SEP_ID for e in c.examples)
    again = ingest_dataset(p, TaskSpec(), seed=3, min_freq=1)
    assert [e.line for e in again.examples] == [e.line for e in c.examples]


def test_ingest_one_line(tmp_path):
    c = ingest_dataset(_write(tmp_path, "1\thello\n"), TaskSpec())
    assert len(c.examples) == 1


def test_ingest_empty_file(tmp_path):
    with pytest.raises(DataError, match="empty"):
        ingest_dataset(_write(tmp_path, "\n\n"), TaskSpec())


def test_ingest_unreadable(tmp_path):
    with pytest.raises(DataError):
        ingest_dataset(tmp_path / "missing.tsv", TaskSpec())


def test_ingest_malformed_reported(tmp_path, caplog):
    good = "".join(f"1\tline {i}\n" for i in range(19))
    c = ingest_dataset(_write(tmp_path, good + "oops no tab\n"), TaskSpec())
    assert c.malformed == [20]
    assert "d.tsv:20" in caplog.text


def test_ingest_too_many_malformed(tmp_path):
    text = "1\tok\n" * 8 + "bad\n" * 2
    with pytest.raises(DataError, match="malformed"):
        ingest_dataset(_write(tmp_path, text), TaskSpec())


def test_ingest_unknown_dev_label(tmp_path):
    train = ingest_dataset(_write(tmp_path, "a\tx\nb\ty\n", "tr.tsv"), TaskSpec())
    with pytest.raises(DataError):
        ingest_dataset(_write(tmp_path, "c\tx\n", "dv.tsv"), TaskSpec(), vocab=train.vocab,
                       labels=train.labels)


def test_ingest_regression(tmp_path):
    c = ingest_dataset(_write(tmp_path, "0.5\ta\n2\tb\n"), TaskSpec(), regression=True)
    assert sorted(e.label for e in c.examples) == [0.5, 2.0] and c.labels is None


def test_multiple_choice_expansion(tmp_path):
    line = "C\tthe passage text\twhat sat ?\tcat\tdog\tthe cat\tnone\n"
    spec = TaskSpec(input_format="passage_question_answer", max_len=16)
    c = ingest_dataset(_write(tmp_path, line), spec, min_freq=1)
    ex = c.examples[0]
    assert ex.label == 2
    assert len(ex.ids) == 4
    for choice in ex.ids:
        assert choice[0] == CLS_ID and choice.count(SEP_ID) == 3
    data = to_dataset(c.examples, 16)
    assert data.ids.shape == (1, 4, 16) and data.num_choices == 4


def test_to_dataset_pads_tail():
    from fcakit.data import Example
    d = to_dataset([Example([0, 5, 1], 0), Example([0, 5, 6, 7, 1], 1)], 6)
    assert d.ids.tolist() == [[0, 5, 1, 2, 2, 2], [0, 5, 6, 7, 1, 2]]
    with pytest.raises(DataError):
        to_dataset([Example([5, 1], 0)], 6)


def test_synthetic_byte_identical(tmp_path):
    a = synthetic_task_generator("marker_majority", 50, 7, tmp_path / "a.tsv")
    b = synthetic_task_generator("marker_majority", 50, 7, tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert a == b
    assert synthetic_task_generator("marker_majority", 50, 8) != a


def test_marker_majority_definition():
    from fcakit.data import MARKERS
    for label, text in synthetic_rows("marker_majority", 200, 0):
        toks = text.split()
        assert len(toks) == 60
        classes = [c for t in toks for c, group in enumerate(MARKERS) if t in group]
        assert len(classes) == 3
        assert label == int(sum(classes) >= 2)


@pytest.mark.parametrize("kind", ["keyword_pair", "long_noise"])
def test_other_kinds_ingest(tmp_path, kind):
    spec = TaskSpec(input_format="sentence_pair" if kind == "keyword_pair" else "single_sentence")
    p = tmp_path / "k.tsv"
    synthetic_task_generator(kind, 40, 0, p)
    c = ingest_dataset(p, spec)
    assert len(c.examples) == 40 and c.malformed == []


def test_marker_majority_linear_probe():
    """Bag-of-words least-squares probe separates the classes."""
    train = synthetic_rows("marker_majority", 2000, 1)
    test = synthetic_rows("marker_majority", 500, 2)
    vocab = sorted({w for _, t in train for w in t.split()})
    index = {w: i for i, w in enumerate(vocab)}

    def features(rows):
        x = np.zeros((len(rows), len(vocab) + 1))
        x[:, -1] = 1.0
        for r, (_, text) in enumerate(rows):
            for w in text.split():
                if w in index:
                    x[r, index[w]] += 1
        return x, np.array([2.0 * y - 1 for y, _ in rows])

    xtr, ytr = features(train)
    w, *_ = np.linalg.lstsq(xtr, ytr, rcond=None)
    xte, yte = features(test)
    acc = np.mean(np.sign(xte @ w) == yte)
    assert acc > 0.95, acc


def test_metrics():
    assert accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)
    assert f1([1, 0, 1, 1], [1, 1, 0, 1]) == pytest.approx(2 / 3)
    assert matthews([1, 0, 1, 0], [1, 0, 1, 0]) == pytest.approx(1.0)
    assert matthews([1, 1, 1], [1, 0, 1]) == 0.0
