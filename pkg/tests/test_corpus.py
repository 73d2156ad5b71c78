"""Chain file parsing, splitting, and vocabulary construction."""

import json

import pytest
from hypothesis import given, settings, strategies as st

from scriptcausal.corpus import (ChainCorpus, build_vocab_from, chain_ids,
                                 load_chains, parse_chain_line, split_corpus,
                                 write_chains)
from scriptcausal.errors import ConfigError, DataFormatError
from scriptcausal.events import NUM_SPECIALS


def _event_json(pred, fact, text, oot):
    obj = {"pred": pred, "dep": "nsubj", "fact": fact}
    if text:
        obj["text"] = text
    if oot:
        obj["oot"] = oot
    return obj


def _chain_json(chain_id, events):
    return json.dumps({
        "chain_id": chain_id,
        "events": [_event_json(*e) for e in events]})


def _write(tmp_path, lines, name="c.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


BASIC = _chain_json("c1", [("eat", "pos", ["he", "ate"], []),
                           ("ghost", "neg", [], []),
                           ("pay", "pos", ["paid"], [])])


def test_factual_filter(tmp_path):
    path = _write(tmp_path, [BASIC])
    corpus = load_chains(path, factual_only=True)
    preds = [e.event.predicate for e in corpus.chains[0].events]
    assert preds == ["eat", "pay"]


def test_factual_filter_off_keeps_all(tmp_path):
    path = _write(tmp_path, [BASIC])
    corpus = load_chains(path)
    assert len(corpus.chains[0].events) == 3


def test_duplicate_chain_id_rejected(tmp_path):
    path = _write(tmp_path, [BASIC, BASIC])
    with pytest.raises(DataFormatError, match="c1"):
        load_chains(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = _write(tmp_path, [BASIC, "{broken"])
    with pytest.raises(DataFormatError, match="line 2"):
        load_chains(path)


def test_parse_rejects_missing_fields():
    with pytest.raises(DataFormatError):
        parse_chain_line(json.dumps({"chain_id": "x", "events": [{"pred": "a"}]}))


def test_round_trip_is_byte_identical(tmp_path):
    src = _write(tmp_path, [
        _chain_json("a", [("go", "pos", ["went"], [["sleep:nsubj", 4]])]),
        _chain_json("b", [("run", "neg", [], [])])])
    corpus = load_chains(src)
    out1, out2 = tmp_path / "o1.jsonl", tmp_path / "o2.jsonl"
    write_chains(corpus, out1)
    write_chains(load_chains(out1), out2)
    assert out1.read_bytes() == out2.read_bytes()


def _toy_corpus(tmp_path, n=100):
    lines = [_chain_json(f"c{i}", [("a", "pos", [], []), ("b", "pos", [], [])])
             for i in range(n)]
    return load_chains(_write(tmp_path, lines))


def test_split_sizes(tmp_path):
    corpus = _toy_corpus(tmp_path)
    tr, dv, te = split_corpus(corpus, (0.9, 0.05, 0.05), seed=7)
    assert (len(tr.chains), len(dv.chains), len(te.chains)) == (90, 5, 5)


def test_split_deterministic(tmp_path):
    corpus = _toy_corpus(tmp_path)
    a = split_corpus(corpus, (0.8, 0.1, 0.1), seed=3)
    b = split_corpus(corpus, (0.8, 0.1, 0.1), seed=3)
    for x, y in zip(a, b):
        assert [c.chain_id for c in x.chains] == [c.chain_id for c in y.chains]


def test_split_is_a_partition(tmp_path):
    corpus = _toy_corpus(tmp_path, n=37)
    parts = split_corpus(corpus, (0.6, 0.2, 0.2), seed=1)
    ids = [c.chain_id for p in parts for c in p.chains]
    assert sorted(ids) == sorted(c.chain_id for c in corpus.chains)


def test_split_bad_ratios_rejected(tmp_path):
    corpus = _toy_corpus(tmp_path, n=10)
    with pytest.raises(ConfigError):
        split_corpus(corpus, (0.6, 0.2, 0.1), seed=0)


def test_build_vocab_counts_and_threshold(tmp_path):
    lines = []
    for i in range(12):
        lines.append(_chain_json(f"c{i}", [("walk", "pos", [], [])]))
    lines.append(_chain_json("rare", [("sprint", "pos", [], [])]))
    corpus = load_chains(_write(tmp_path, lines))
    vocab = build_vocab_from(corpus, min_count=10)
    assert vocab.num_events == 1
    assert vocab.id_of("walk:nsubj") >= NUM_SPECIALS
    assert vocab.id_of("sprint:nsubj") == 0  # below threshold → UNK


def test_build_vocab_includes_oot_candidates(tmp_path):
    lines = [_chain_json("c0", [("go", "pos", [], [["sleep:dobj", 4]])])]
    corpus = load_chains(_write(tmp_path, lines))
    vocab = build_vocab_from(corpus, min_count=1)
    assert vocab.id_of("sleep:dobj") >= NUM_SPECIALS


def test_chain_ids_maps_events(tmp_path):
    corpus = _toy_corpus(tmp_path, n=2)
    vocab = build_vocab_from(corpus, min_count=1)
    ids = chain_ids(corpus.chains[0], vocab)
    assert ids == [vocab.id_of("a:nsubj"), vocab.id_of("b:nsubj")]


@settings(max_examples=25)
@given(st.integers(5, 60), st.integers(0, 2**31 - 1))
def test_split_always_partitions(n, seed):
    chains = [parse_chain_line(_chain_json(f"c{i}", [("a", "pos", [], [])]))
              for i in range(n)]
    corpus = ChainCorpus(chains)
    parts = split_corpus(corpus, (0.7, 0.15, 0.15), seed=seed)
    ids = sorted(c.chain_id for p in parts for c in p.chains)
    assert ids == sorted(c.chain_id for c in chains)
