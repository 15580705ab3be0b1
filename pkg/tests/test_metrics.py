import json
import math
from itertools import combinations

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cvaekd.metrics import EvalPair, bleu, format_table, lcs_length, rouge_l, rouge_n, score_all, write_report


def E(c, r):
    return EvalPair.of(c, r)


# --- brute-force oracles, written without Counter or the library helpers ----------

def _grams(toks, n):
    return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]


def _precisions(pairs, n_max):
    out = []
    for n in range(1, n_max + 1):
        match = total = 0
        for p in pairs:
            cg, rg = _grams(p.candidate, n), _grams(p.reference, n)
            match += sum(min(cg.count(g), rg.count(g)) for g in set(cg))
            total += len(cg)
        out.append(match / total if n == 1 else (match + 1) / (total + 1))
    return out


def _bleu_oracle(pairs, n_max):
    c = sum(len(p.candidate) for p in pairs)
    r = sum(len(p.reference) for p in pairs)
    ps = _precisions(pairs, n_max)
    if min(ps) == 0:
        return 0.0
    geo = 1.0
    for x in ps:
        geo *= x
    return 100 * math.exp(min(0.0, 1 - r / c)) * geo ** (1 / n_max)


def _lcs_table(a, b):
    T = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            T[i][j] = T[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(T[i - 1][j], T[i][j - 1])
    return T[-1][-1]


def _lcs_enumerate(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs = set(combinations(a, k))
        if any(s in subs for s in combinations(b, k)):
            return k
    return 0


# --- BLEU ------------------------------------------------------------------------

def test_bleu_brevity_penalty_hand_value():
    assert bleu([E("the cat sat", "the cat sat down")], 1) == pytest.approx(100 * math.exp(1 - 4 / 3), abs=1e-12)
    assert bleu([E("the cat sat", "the cat sat down")], 1) == pytest.approx(71.65, abs=5e-3)


def test_bleu_perfect_and_disjoint():
    assert bleu([E("a b c d e", "a b c d e")], 4) == pytest.approx(100.0, abs=1e-12)
    assert bleu([E("x y z", "a b c")], 1) == 0.0
    with pytest.raises(ValueError):
        bleu([], 4)
    with pytest.raises(ValueError):
        bleu([E("a", "a")], 5)


def test_bleu_smoothing_keeps_bleu4_nonzero():
    # no 3- or 4-gram matches, yet add-one smoothing gives a positive score
    assert bleu([E("a b x c d", "a b y c d")], 4) > 0.0


def test_bleu_per_order_mode():
    pairs = [E("a b c d", "a b c e")]
    p = _precisions(pairs, 2)
    assert bleu(pairs, 2, cumulative=False) == pytest.approx(100 * p[1], rel=1e-12)


def test_bleu_monotonicity_counterexample():
    # p = (1/2, 1/4, 1/3, 1/2): the smoothed higher orders rise, so BLEU-4 > BLEU-3
    pairs = [E("a b c d", "a x c y")]
    assert _precisions(pairs, 4) == pytest.approx([0.5, 0.25, 1 / 3, 0.5])
    assert bleu(pairs, 4) > bleu(pairs, 3)


words = st.sampled_from(list("abcde"))
seqs = st.lists(words, min_size=1, max_size=12)
pair_lists = st.lists(st.tuples(seqs, seqs), min_size=1, max_size=6).map(
    lambda xs: [EvalPair(tuple(c), tuple(r)) for c, r in xs])


@settings(max_examples=200, deadline=None)
@given(pair_lists)
def test_bleu_matches_brute_force(pairs):
    for n in range(1, 5):
        assert bleu(pairs, n) == pytest.approx(_bleu_oracle(pairs, n), rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(pair_lists, st.integers(1, 3))
def test_bleu_nonincreasing_when_precisions_do_not_rise(pairs, n):
    ps = _precisions(pairs, n + 1)
    assume(ps[n] <= min(ps[:n]))
    assert bleu(pairs, n + 1) <= bleu(pairs, n) + 1e-9


@settings(max_examples=100, deadline=None)
@given(pair_lists, st.randoms(use_true_random=False))
def test_scores_bounded_and_permutation_invariant(pairs, rnd):
    s = score_all(pairs)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    t = score_all(shuffled)
    for k, v in s.items():
        if k != "n_pairs":
            assert 0.0 <= v <= 100.0 + 1e-9
            assert t[k] == pytest.approx(v, abs=1e-9)


def test_identical_pairs_score_100_everywhere():
    s = score_all([E("a b c d e", "a b c d e"), E("x y z w", "x y z w")])
    assert all(s[k] == pytest.approx(100.0, abs=1e-12) for k in s if k != "n_pairs")
    assert s["n_pairs"] == 2


# --- ROUGE -------------------------------------------------------------------------

def test_rouge_hand_values():
    assert rouge_n([E("a b c", "a b d")], 1) == pytest.approx(200 / 3, abs=1e-12)
    assert rouge_n([E("a b c", "a b d")], 2) == pytest.approx(50.0, abs=1e-12)
    assert rouge_n([E("a b c", "x y z")], 1) == 0.0
    assert rouge_n([E("a b", "a b c d")], 1, mode="recall") == pytest.approx(50.0)
    assert rouge_l([E("a c b", "a b c")]) == pytest.approx(200 / 3, abs=1e-12)
    assert rouge_l([E("a b c", "a b c")]) == pytest.approx(100.0)


def test_rouge_macro_average():
    assert rouge_n([E("a", "a"), E("b", "c")], 1) == pytest.approx(50.0)


def test_rouge_errors():
    for f in (lambda: rouge_n([], 1), lambda: rouge_l([]), lambda: rouge_n([E("a", "a")], 3)):
        with pytest.raises(ValueError):
            f()
    with pytest.raises(ValueError):
        EvalPair((), ())


def test_lcs_single_shared_token_at_ends():
    assert lcs_length(list("abcz"), list("zxyw")) == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(words, max_size=50), st.lists(words, max_size=50))
def test_lcs_matches_dp_table(a, b):
    assert lcs_length(a, b) == _lcs_table(a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(words, max_size=7), st.lists(words, max_size=7))
def test_lcs_matches_enumeration(a, b):
    assert lcs_length(a, b) == _lcs_enumerate(a, b)


# --- reporting -------------------------------------------------------------------

def test_report_and_table(tmp_path):
    s = score_all([E("a b c", "a b d")])
    write_report(tmp_path / "s.json", s)
    back = json.loads((tmp_path / "s.json").read_text())
    assert set(back) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rouge2", "rougeL", "n_pairs"}
    table = format_table([("CVAE-KD", s), ("no KD", s)])
    lines = table.splitlines()
    assert lines[0].split()[1:] == ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L"]
    assert len({len(line) for line in lines}) == 1
    assert "66.67" in lines[2]
