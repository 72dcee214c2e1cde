import numpy as np
import pytest

from mpma.corpus import (GLYPHS, CorpusError, SyntheticWorld, batches_per_epoch, generate_corpus, glyph_label,
                         load_corpus, read_corpus)
from mpma.masking import CLS_ID, MASK_ID, PAD_ID, UNK_ID
from mpma.tokenizer import SPECIAL_TOKENS, Vocabulary, detokenize, tokenize, wordpiece


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    return generate_corpus(10, SyntheticWorld(seed=5), tmp_path_factory.mktemp("c") / "c10")


# --- tokenizer ----------------------------------------------------------------


def test_reserved_ids():
    v = Vocabulary.build(["disc"])
    assert [v.index[t] for t in SPECIAL_TOKENS] == [PAD_ID, CLS_ID, MASK_ID, UNK_ID]


def test_empty_text():
    rep = tokenize("", Vocabulary.build(["a"]), 5)
    assert rep.ids.tolist() == [CLS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert rep.valid.tolist() == [True, False, False, False, False]


def test_greedy_longest_match():
    v = Vocabulary.build([], ["un", "##render", "##able", "##r"])
    assert wordpiece("unrenderable", v) == ["un", "##render", "##able"]
    rep = tokenize("unrenderable", v, 6)
    assert [v.tokens[i] for i in rep.ids[1:4]] == ["un", "##render", "##able"]


def test_verbatim_word_is_one_token():
    v = Vocabulary.build(["disc", "di"], ["##sc"])
    assert wordpiece("disc", v) == ["disc"]


def test_unknown_residue_maps_to_unk():
    v = Vocabulary.build(["disc"], ["un"])
    assert wordpiece("unzip", v) == ["[UNK]"]
    assert tokenize("zzz disc", v, 4).ids.tolist() == [CLS_ID, UNK_ID, v.index["disc"], PAD_ID]


def test_truncation():
    v = Vocabulary.build(["a"])
    rep = tokenize("a a a a a", v, 3)
    assert rep.ids.tolist() == [CLS_ID, v.index["a"], v.index["a"]] and rep.valid.all()


def test_round_trip_on_world_reports():
    world = SyntheticWorld(seed=1)
    vocab = world.vocabulary()
    for i in range(30):
        _, text, _ = world.sample(i)
        rep = tokenize(text, vocab, 24)
        assert detokenize(rep.ids, vocab) == " ".join(text.split())
        assert rep.ids.max() < len(vocab) and MASK_ID not in rep.ids


def test_vocabulary_save_load(tmp_path):
    v = SyntheticWorld().vocabulary()
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


# --- world and corpus ----------------------------------------------------------


def test_report_names_its_glyph():
    world = SyntheticWorld(seed=2)
    for i in range(40):
        _, text, scene = world.sample(i)
        assert GLYPHS[scene.glyph] in text.split()
        assert glyph_label(text) == scene.glyph


def test_class_balance_over_1000_samples():
    world = SyntheticWorld(seed=0)
    rng_labels = [world.sample(i)[2].glyph for i in range(1000)]
    freq = np.bincount(rng_labels, minlength=4) / 1000
    assert np.all(np.abs(freq - 0.25) <= 0.05), freq


def test_generation_is_byte_deterministic(tmp_path):
    a = generate_corpus(8, SyntheticWorld(seed=3), tmp_path / "a")
    b = generate_corpus(8, SyntheticWorld(seed=3), tmp_path / "b")
    for name in ("images.bin", "reports.txt", "vocab.txt", "manifest.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = generate_corpus(8, SyntheticWorld(seed=4), tmp_path / "c")
    assert (a / "images.bin").read_bytes() != (c / "images.bin").read_bytes()


def test_round_trip_pixels(small):
    world = SyntheticWorld(seed=5)
    corpus = read_corpus(small)
    assert corpus.images.shape == (10, 1, 32, 32)
    for i in range(10):
        img, text, _ = world.sample(i)
        np.testing.assert_allclose(corpus.images[i], img, atol=1e-7)
        assert corpus.reports[i] == text
    assert corpus.images.min() >= 0.0 and corpus.images.max() <= 1.0


def test_batches_of_four_over_ten(small):
    sizes = [len(b) for b in load_corpus(small, batch_size=4, length=16, seed=0)]
    assert sizes == [4, 4, 2]
    assert batches_per_epoch(10, 4) == 3


def test_loader_covers_epoch_in_seeded_order(small):
    a = np.concatenate([b.indices for b in load_corpus(small, 4, 16, seed=1, epoch=0)])
    b = np.concatenate([b.indices for b in load_corpus(small, 4, 16, seed=1, epoch=0, prefetch=0)])
    assert np.array_equal(a, b) and sorted(a.tolist()) == list(range(10))
    c = np.concatenate([b.indices for b in load_corpus(small, 4, 16, seed=1, epoch=1)])
    assert not np.array_equal(a, c)


def _copy(src, dst):
    dst.mkdir()
    for f in src.iterdir():
        (dst / f.name).write_bytes(f.read_bytes())
    return dst


def test_corrupted_magic_names_file(small, tmp_path):
    bad = _copy(small, tmp_path / "bad")
    raw = bytearray((bad / "images.bin").read_bytes())
    raw[:4] = b"XXXX"
    (bad / "images.bin").write_bytes(bytes(raw))
    with pytest.raises(CorpusError, match="images.bin"):
        read_corpus(bad)


def test_truncated_images_rejected(small, tmp_path):
    bad = _copy(small, tmp_path / "trunc")
    raw = (bad / "images.bin").read_bytes()
    (bad / "images.bin").write_bytes(raw[:-8])
    with pytest.raises(CorpusError, match="truncated"):
        read_corpus(bad)


def test_report_count_mismatch_rejected(small, tmp_path):
    bad = _copy(small, tmp_path / "count")
    lines = (bad / "reports.txt").read_text().splitlines()
    (bad / "reports.txt").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(CorpusError, match="reports.txt"):
        read_corpus(bad)


def test_size_must_be_positive(tmp_path):
    with pytest.raises(CorpusError):
        generate_corpus(0, SyntheticWorld(), tmp_path / "z")
