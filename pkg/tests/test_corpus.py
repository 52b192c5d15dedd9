import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qada.corpus import (
    CLS,
    PAD,
    SEP,
    SOURCE,
    TARGET,
    UNK,
    DataError,
    GenConfig,
    QaExample,
    Vocab,
    build_neighborhood,
    bundled_lexicon_pairs,
    char_span_to_tokens,
    generate_domain_pair,
    load_dataset,
    make_example,
    object_pools,
    read_lexicon,
    save_dataset,
    split_dev,
    tokenize,
)
from qada.numerics import Rng


@pytest.fixture
def vocab():
    return Vocab(["the", "cat", "sat", ".", "runs", "a", "b", "c", "d"])


def test_reserved_ids(vocab):
    assert (PAD, UNK, CLS, SEP) == (0, 1, 2, 3)
    assert [vocab.token(i) for i in range(4)] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]


def test_vocab_is_a_bijection(vocab):
    assert all(vocab.id(vocab.token(i)) == i for i in range(len(vocab)))
    assert vocab.add("cat") == vocab.id("cat")


def test_vocab_save_load(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == vocab


def test_tokenize_examples(vocab):
    ids, offsets = tokenize("The cat sat.", vocab)
    assert [vocab.token(i) for i in ids] == ["the", "cat", "sat", "."]
    assert offsets == [(0, 3), (4, 7), (8, 11), (11, 12)]
    assert tokenize("", vocab) == ([], [])
    ids, _ = tokenize("Zyzzyva runs", vocab)
    assert ids == [UNK, vocab.id("runs")]


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet=st.sampled_from("ab c.,!?\tZ9é"), max_size=40))
def test_offsets_point_back_to_text(text):
    ids, offsets = tokenize(text, Vocab())
    assert len(ids) == len(offsets)
    for s, e in offsets:
        piece = text[s:e]
        assert piece and not piece.isspace()


# --- neighbourhoods ----------------------------------------------------------------


def test_neighborhood_two_hops(vocab):
    nb = build_neighborhood(vocab, [("a", "b"), ("b", "c")])
    a, b, c = (vocab.id(t) for t in "abc")
    assert nb[a] == [(b, 1, pytest.approx(0.1)), (c, 2, pytest.approx(0.01))]
    # directed: nothing listed back
    assert nb[c] == []


def test_neighborhood_keeps_shortest_hop(vocab):
    nb = build_neighborhood(vocab, [("a", "b"), ("a", "c"), ("b", "c")])
    a, b, c = (vocab.id(t) for t in "abc")
    assert {(t, h) for t, h, _ in nb[a]} == {(b, 1), (c, 1)}


def test_neighborhood_empty_lexicon(vocab):
    nb = build_neighborhood(vocab, [])
    assert all(not nb.has_synonyms(i) for i in range(len(vocab)))


def test_neighborhood_skips_oov_pairs(vocab):
    nb = build_neighborhood(vocab, [("a", "zzz"), ("a", "b")])
    assert nb.skipped_pairs == 1
    assert [t for t, _, _ in nb[vocab.id("a")]] == [vocab.id("b")]


def test_neighborhood_custom_alpha_and_decay(vocab):
    nb = build_neighborhood(vocab, [("a", "b"), ("b", "c")], alpha_original=2.0, decay=0.5)
    assert [alpha for _, _, alpha in nb[vocab.id("a")]] == [1.0, 0.5]


def _min_hops_by_paths(pairs, root, max_hops):
    """Shortest hop to every node by enumerating all simple paths (brute force)."""
    nodes = sorted({x for p in pairs for x in p})
    edges = set(pairs)
    best = {}
    for length in range(1, max_hops + 1):
        for path in itertools.permutations([n for n in nodes if n != root], length):
            chain = (root,) + path
            if all((chain[i], chain[i + 1]) in edges for i in range(length)):
                best.setdefault(path[-1], length)
    return best


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from("abcdef")), max_size=12))
def test_neighborhood_matches_path_enumeration(pairs):
    vocab = Vocab("abcdef")
    nb = build_neighborhood(vocab, pairs)
    pairs = [(x, y) for x, y in pairs if x != y]
    for root in "abcdef":
        got = {vocab.token(t): h for t, h, _ in nb[vocab.id(root)]}
        assert got == _min_hops_by_paths(pairs, root, 2)
        assert root not in got
        for t, h, alpha in nb[vocab.id(root)]:
            assert alpha == pytest.approx(0.1**h)


def test_read_bundled_lexicon():
    pairs = read_lexicon()
    assert set(bundled_lexicon_pairs()) == set(pairs)


def test_read_lexicon_rejects_bad_line(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("# comment\na b\nonly\n", encoding="utf-8")
    with pytest.raises(DataError, match="line 3"):
        read_lexicon(path)


# --- records and files -------------------------------------------------------------


def _record(text="cat", start=4, **extra):
    rec = {"id": "r1", "context": "The cat sat.", "question": "Who sat?", "answers": [{"text": text, "answer_start": start}]}
    rec.update(extra)
    return rec


def test_char_span_to_token_span(vocab):
    assert make_example(_record(), vocab).answer == (1, 1)


def test_partial_answer_snaps_outward(vocab):
    ex = make_example(_record("at s", 5), vocab)
    assert ex.answer == (1, 2)
    assert ex.span_text(*ex.answer) == "cat sat"


def test_unlabeled_record(vocab):
    rec = _record()
    del rec["answers"]
    assert make_example(rec, vocab).answer is None


def test_char_span_without_overlap():
    assert char_span_to_tokens([(0, 3), (4, 7)], 3, 4) is None


def test_example_invariants():
    with pytest.raises(ValueError):
        QaExample("x", "a b", "q", (5, 6), ((0, 1), (2, 3)), (1,), answer=(1, 2))
    with pytest.raises(ValueError):
        QaExample("x", "a b", "q", (5, 6), ((0, 1), (2, 3)), (1,), answer=(0, 0), pseudo=True)


def test_with_answer_and_unlabeled(vocab):
    ex = make_example(_record(), vocab)
    pl = ex.unlabeled().with_answer(0, 1, 0.7)
    assert pl.pseudo and pl.confidence == 0.7 and pl.answer == (0, 1)
    assert ex.unlabeled().answer is None and ex.unlabeled().answer_texts == ()


def test_load_dataset_errors(tmp_path, vocab):
    path = tmp_path / "d.jsonl"
    lines = [json.dumps(_record()), json.dumps(_record("cat", 40)), "", json.dumps(_record())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    report = load_dataset(path, vocab, with_report=True)
    assert len(report.examples) == 2 and report.rejected == 1

    path.write_text(json.dumps(_record()) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        load_dataset(path, vocab)


def test_dataset_roundtrip(tmp_path):
    pair = generate_domain_pair(GenConfig(n_source=30, n_target=30), Rng(1))
    examples = [make_example(r, pair.vocab) for r in pair.source + pair.target]
    examples.append(examples[0].unlabeled())
    save_dataset(tmp_path / "d.jsonl", examples)
    assert load_dataset(tmp_path / "d.jsonl", pair.vocab) == examples


# --- synthetic pair ----------------------------------------------------------------


def test_generator_sizes_and_valid_spans():
    pair = generate_domain_pair(GenConfig(), Rng(7))
    assert len(pair.source) == 200 and len(pair.target) == 200
    for rec in pair.source + pair.target:
        ex = make_example(rec, pair.vocab)
        assert ex.answer is not None
        text = ex.span_text(*ex.answer)
        assert text and text == rec["answers"][0]["text"]


def test_generator_is_deterministic():
    a = generate_domain_pair(GenConfig(n_source=50, n_target=50), Rng(3))
    b = generate_domain_pair(GenConfig(n_source=50, n_target=50), Rng(3))
    assert a.source == b.source and a.target == b.target and a.vocab == b.vocab


def test_generator_domain_shift():
    cfg = GenConfig()
    pair = generate_domain_pair(cfg, Rng(0))
    src_q = {r["question"].split()[0] for r in pair.source}
    tgt_q = {r["question"].split()[0] for r in pair.target}
    assert src_q == {"what"} and tgt_q == {"which"}
    mean_len = lambda rs: sum(len(r["context"].split()) for r in rs) / len(rs)
    assert mean_len(pair.target) > mean_len(pair.source)
    pools = object_pools(cfg)
    src_objects = {n for ns in pools[SOURCE].values() for n in ns}
    tgt_objects = {n for ns in pools[TARGET].values() for n in ns}
    assert len(tgt_objects - src_objects) == (cfg.objects_per_relation - cfg.shared_objects) * cfg.n_relations
    assert all(r["domain"] == TARGET for r in pair.target)


def test_target_unlabeled_strips_answers():
    pair = generate_domain_pair(GenConfig(n_source=5, n_target=5), Rng(0))
    assert all("answers" not in r for r in pair.target_unlabeled)
    assert all("answers" in r for r in pair.target)


def test_generated_lexicon_is_in_vocabulary():
    pair = generate_domain_pair(GenConfig(n_source=5, n_target=5), Rng(0))
    assert build_neighborhood(pair.vocab, pair.lexicon).skipped_pairs == 0


@pytest.mark.parametrize(
    "bad",
    [dict(source_facts=(3, 2)), dict(target_facts=(1, 9)), dict(shared_objects=9), dict(n_relations=0), dict(two_word_answer=1.5)],
)
def test_gen_config_validation(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad)


def test_split_dev():
    train, dev = split_dev(list(range(50)), 0.1, Rng(0))
    assert len(dev) == 5 and sorted(train + dev) == list(range(50))
    assert split_dev(list(range(50)), 0.1, Rng(0)) == (train, dev)
