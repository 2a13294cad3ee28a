import itertools
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emergelab import analysis as an
from emergelab.errors import ContractError, FormatError

from oracles import brute_topsim, mp_cosine, planted_language

# example messages printed in the source table, one row per message
TABLE_ROWS = [
    [32, 27, 32, 6, 32, 6, 32, 27, 32, 45, 32, 32, 45, 26, 26],
    [9, 9, 27, 21, 27, 21, 6, 27, 32, 9, 6, 21, 6, 26, 32],
    [27, 27, 21, 6, 6, 9, 6, 27, 27, 6, 9, 6, 9, 9, 27],
    [6, 6, 26, 21, 32, 45, 32, 9, 32, 32, 27, 32, 6, 6, 32],
]
# counted by hand from the rows above: (count of 32, count of "27 32", immediate repeats)
TABLE_COUNTS = [(7, 2, 2), (2, 1, 1), (0, 0, 4), (6, 1, 3)]


# ----------------------------------------------------------------- cosine

def test_cosine_trivial_cases():
    a = np.array([1.0, 2.0, 3.0])
    assert an.cosine_distance(a, a) == pytest.approx(0.0, abs=1e-15)
    assert an.cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)
    assert an.cosine_distance([1, 0], [-2, 0]) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        an.cosine_distance([0, 0], [1, 0])


@pytest.mark.parametrize("seed", range(10))
def test_cosine_matches_extended_precision(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=16), rng.normal(size=16)
    assert abs(an.cosine_distance(a, b) - mp_cosine(a, b)) < 1e-12


def test_pairwise_order_and_zero_row():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    d = an.pairwise_cosine_distances(x)
    expect = [an.cosine_distance(x[i], x[j]) for i, j in itertools.combinations(range(5), 2)]
    np.testing.assert_allclose(d, expect, atol=1e-14)
    x[2] = 0
    with pytest.raises(ContractError, match="row 2"):
        an.pairwise_cosine_distances(x)


# ----------------------------------------------------------------- topsim

@pytest.mark.parametrize("n", [3, 6, 9, 12])
@pytest.mark.parametrize("seed", range(3))
def test_topsim_matches_brute_force(n, seed):
    rng = np.random.default_rng([seed, n])
    A = rng.normal(size=(n, 4))
    B = A + rng.normal(scale=0.7, size=(n, 4))
    assert abs(an.topographic_similarity(A, B) - brute_topsim(A, B)) < 1e-9


def test_topsim_with_tied_distances_matches_oracle():
    # axis-aligned unit vectors give many identical distances
    A = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]], dtype=float)
    B = np.random.default_rng(1).normal(size=(6, 3))
    assert abs(an.topographic_similarity(A, B) - brute_topsim(A, B)) < 1e-9


def test_topsim_pearson_option():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    da, db = an.pairwise_cosine_distances(A), an.pairwise_cosine_distances(B)
    assert an.topographic_similarity(A, B, "pearson") == pytest.approx(np.corrcoef(da, db)[0, 1], abs=1e-12)
    with pytest.raises(ContractError):
        an.topographic_similarity(A, B, "kendall")


def test_topsim_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        an.topographic_similarity(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    with pytest.raises(ContractError):
        an.topographic_similarity(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    same = np.ones((4, 3))
    with pytest.raises(ContractError, match="constant"):
        an.topographic_similarity(same, rng.normal(size=(4, 3)))
    a = an.RepresentationSpace((0, 1, 2), rng.normal(size=(3, 2)))
    b = an.RepresentationSpace((0, 2, 1), rng.normal(size=(3, 2)))
    with pytest.raises(ContractError):
        an.topographic_similarity(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 12), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_topsim_invariants(n, d, seed):
    # continuous draws: exact distance ties (which float rounding could
    # reorder under scaling) occur with probability zero
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, d))
    B = A + rng.normal(size=A.shape)
    assert an.topographic_similarity(A, A) == 1.0
    rho = an.topographic_similarity(A, B)
    assert -1.0 <= rho <= 1.0
    assert abs(rho - an.topographic_similarity(B, A)) < 1e-12
    perm = rng.permutation(len(A))
    assert abs(rho - an.topographic_similarity(A[perm], B[perm])) < 1e-12
    scale = rng.uniform(0.5, 4.0, size=(len(A), 1))
    assert abs(rho - an.topographic_similarity(A * scale, B)) < 1e-9


# ------------------------------------------------------------------ traces

def _records(n, rng, copy_sender=False):
    out = []
    for i in range(n):
        visual = rng.normal(size=6)
        sender = visual.copy() if copy_sender else rng.normal(size=4)
        out.append(an.trace_record(i, rng.integers(10, size=3), rng.choice(26, 2, replace=False),
                                   visual, sender, rng.normal(size=4)))
    return out


def test_trace_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    recs = _records(8, rng)
    an.write_trace(tmp_path / "t.jsonl", recs, 10)
    spaces, corpus = an.collect_spaces(tmp_path / "t.jsonl", 0)
    assert corpus.vocab_size == 10 and len(corpus) == 8
    for tap in an.TAPS:
        assert len(spaces[tap]) == 8
        assert np.array_equal(spaces[tap].vectors, np.array([r[tap] for r in recs]))
    assert corpus.char_sets[3] == frozenset(recs[3]["chars"])


def test_identity_tap_gives_similarity_one():
    spaces, _ = an.collect_spaces(_records(20, np.random.default_rng(1), copy_sender=True), 10)
    assert an.topographic_similarity(spaces["visual"], spaces["sender"]) == 1.0


def test_collect_spaces_rejects_bad_dumps(tmp_path):
    recs = _records(4, np.random.default_rng(2))
    recs[1]["index"] = 0
    with pytest.raises(FormatError):
        an.collect_spaces(recs, 10)
    recs = _records(4, np.random.default_rng(2))
    del recs[2]["receiver"]
    with pytest.raises(FormatError):
        an.collect_spaces(recs, 10)
    (tmp_path / "bad.jsonl").write_text("not json\n")
    with pytest.raises(FormatError):
        an.read_trace(tmp_path / "bad.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(FormatError):
        an.read_trace(tmp_path / "empty.jsonl")


# ------------------------------------------------------------------ recall

def test_one_hot_messages_layout():
    x = an.one_hot_messages([[1, 0], [2, 2]], 3)
    assert x.tolist() == [[0, 1, 0, 1, 0, 0], [0, 0, 1, 0, 0, 1]]


def test_recall_perfect_probe_and_ties():
    present = an.presence_labels([{0, 5, 7}, {1, 2, 3}])
    act = present.astype(float)
    assert an.recall_at_k(act, present, 3) == (1.0, 1.0)
    hits_k, hits_min = an.recall_at_k(act, present, 26)
    assert hits_k * 26 == pytest.approx(3)
    assert hits_min == 1.0
    # all-equal activations: top-1 is character 0
    flat = np.zeros((2, 26))
    assert an.recall_at_k(flat, present, 1)[0] == 0.5
    for k in (0, 27):
        with pytest.raises(ContractError):
            an.recall_at_k(act, present, k)


def test_recall_fixed_probe_counts_frequency():
    rng = np.random.default_rng(4)
    sets = [set(rng.choice(26, 3, replace=False).tolist()) for _ in range(500)]
    present = an.presence_labels(sets)
    act = np.zeros((500, 26))
    act[:, 0] = 1.0
    assert an.recall_at_k(act, present, 1)[0] == pytest.approx(present[:, 0].mean())


def test_recall_random_activations_hypergeometric():
    rng = np.random.default_rng(11)
    n = 10_000
    present = an.presence_labels([set(rng.choice(26, 5, replace=False).tolist()) for _ in range(n)])
    mean, sd = an.recall_at_k(rng.random((n, 26)), present, 5)[0], an.recall_chance(5, 5)[1]
    assert an.recall_chance(5, 5)[0] == pytest.approx(5 / 26)
    assert abs(mean - 5 / 26) < 3 * sd / math.sqrt(n)


def test_recall_chance_matches_enumeration():
    # exact hypergeometric variance of hits for N=3, k=2, 26 characters
    N, k, C = 3, 2, 26
    hits = [len({0, 1} & set(s)) for s in itertools.combinations(range(C), N)]
    mean, sd = an.recall_chance(N, k)
    assert mean == pytest.approx(np.mean(hits) / k)
    assert sd == pytest.approx(np.std(hits) / k)


# ------------------------------------------------------------------ probes

def test_probe_recovers_planted_language():
    x, y = planted_language(600, 3, np.random.default_rng(0))
    res = an.train_probe(x, y, seed=0, epochs=60)
    assert res.recall[3][0] >= 0.99
    assert res.excluded == []
    assert ((res.test_outputs > 0) & (res.test_outputs < 1)).all()


def test_probe_is_deterministic():
    x, y = planted_language(100, 2, np.random.default_rng(1))
    a = an.train_probe(x, y, seed=3, epochs=5)
    b = an.train_probe(x, y, seed=3, epochs=5)
    assert np.array_equal(a.test_outputs, b.test_outputs) and a.recall == b.recall


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(2)
    x, y = planted_language(1000, 3, rng)
    res = an.train_probe(x, y[rng.permutation(len(y))], seed=0, epochs=30)
    mean, sd = an.recall_chance(3, 3)
    assert abs(res.recall[3][0] - mean) < 3 * sd / math.sqrt(len(res.test_index))


def test_probe_excludes_degenerate_characters(caplog):
    rng = np.random.default_rng(3)
    sets = [{0, int(c)} for c in rng.integers(1, 5, size=50)]
    res = an.train_probe(rng.normal(size=(50, 4)), an.presence_labels(sets), epochs=2)
    assert 0 in res.excluded and 20 in res.excluded
    assert "excluded" in caplog.text


def test_hidden_probe_runs():
    x, y = planted_language(80, 2, np.random.default_rng(4))
    res = an.train_probe(x, y, epochs=3, hidden=8)
    assert res.model.hidden is not None
    assert ((res.test_outputs > 0) & (res.test_outputs < 1)).all()


# ----------------------------------------------------------- message stats

@pytest.mark.parametrize("row,counts", list(zip(TABLE_ROWS, TABLE_COUNTS)))
def test_message_stats_on_printed_rows(row, counts):
    s = an.message_stats([row], vocab_size=50)
    assert s.total == 15
    assert (s.unigrams[32], s.bigrams[(27, 32)], s.repeats) == counts


def test_message_stats_first_row_details():
    s = an.message_stats([TABLE_ROWS[0]], vocab_size=50)
    assert s.top_symbol == 32 and s.dominance == pytest.approx(7 / 15)
    assert s.repeat_rate == pytest.approx(2 / 14)
    assert s.bigrams[(32, 32)] == 1 and s.bigrams[(26, 26)] == 1


def test_message_stats_constant_corpus():
    s = an.message_stats([[4, 4, 4]] * 5)
    assert s.dominance == 1.0 and s.repeats == 10 and s.repeats_per_message == 2.0


def test_pmi_independent_symbols_near_zero():
    rng = np.random.default_rng(0)
    msgs = rng.integers(5, size=(100_001, 2))
    s = an.message_stats(msgs, vocab_size=5)
    # each cell holds ~4000 counts, so log-ratio noise is about 1/sqrt(4000)
    assert max(abs(v) for v in s.pmi.values()) < 5 / math.sqrt(4000)


def test_pmi_formula_small_case():
    s = an.message_stats([[0, 1], [0, 1], [1, 0]], vocab_size=2)
    # add-1 joint over the 4 cells: (count + 1) / 7; marginals sum a row or column of it
    p01, p0_, p_1 = 3 / 7, (3 + 1) / 7, (3 + 1) / 7
    assert s.pmi[(0, 1)] == pytest.approx(math.log(p01 / (p0_ * p_1)))


def test_message_stats_empty():
    with pytest.raises(ContractError):
        an.message_stats([])


# --------------------------------------------------------------------- svg

def test_svg_is_well_formed():
    text = an.svg_bar_chart("A & B", ["x", "y"], [0.5, -0.2])
    root = ET.fromstring(text)
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("rect")]) == 2


def test_trace_record_is_json_safe():
    rec = an.trace_record(1, np.array([1, 2]), {3}, np.ones(2, np.float32), np.zeros(2), np.zeros(2))
    assert json.loads(json.dumps(rec)) == rec
