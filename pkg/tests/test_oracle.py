import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wanspec.oracle import (
    OracleConfig,
    OracleConfigError,
    Prediction,
    SequenceView,
    TokenRecord,
    TraceExhausted,
    TraceParseError,
    dumps_sequence,
    entropy_of,
    open_oracle,
    read_trace,
    top2_probs,
    verify,
    write_trace,
)


def records(cfg, n_seq):
    o = open_oracle(cfg)
    return [r for _ in range(n_seq) for r in o.next_sequence()]


def test_same_seed_same_stream():
    cfg = OracleConfig(seed=1)
    a, b = records(cfg, 10), records(cfg, 10)
    assert len(a) >= 1000
    assert dumps_sequence(a) == dumps_sequence(b)


def test_different_seed_differs():
    assert dumps_sequence(records(OracleConfig(seed=1), 1)) != dumps_sequence(
        records(OracleConfig(seed=2), 1)
    )


def test_perfect_match_prob():
    for r in records(OracleConfig(seed=3, match_prob=1.0), 5):
        assert r.draft_prediction.top[0][0] == r.target_token


def test_match_rate_seed_7():
    recs = records(OracleConfig(seed=7, match_prob=0.8), 100)
    assert len(recs) == 10_000
    rate = sum(r.draft_matches for r in recs) / len(recs)
    assert 0.79 <= rate <= 0.81


@pytest.mark.parametrize("p", [0.3, 0.6, 0.95])
@pytest.mark.parametrize("seed", [0, 11])
def test_match_rate_calibrated(p, seed):
    recs = records(OracleConfig(seed=seed, match_prob=p), 100)
    rate = sum(r.draft_matches for r in recs) / len(recs)
    assert abs(rate - p) < 0.02


def test_sequence_length_one_is_eos():
    (rec,) = open_oracle(OracleConfig(sequence_length=1)).next_sequence()
    assert rec.target_token == 0


def test_last_token_is_eos_and_only_there():
    seq = open_oracle(OracleConfig(seed=5, eos_id=7)).next_sequence()
    assert [r.target_token == 7 for r in seq] == [False] * 99 + [True]


def test_greedy_consistency():
    for r in records(OracleConfig(seed=4), 5):
        assert r.target_prediction.argmax == r.target_token


def test_mismatch_entropy_is_higher_on_average():
    recs = records(OracleConfig(seed=8), 50)
    hit = [r.draft_prediction.entropy for r in recs if r.draft_matches]
    miss = [r.draft_prediction.entropy for r in recs if not r.draft_matches]
    assert sum(miss) / len(miss) > 3 * sum(hit) / len(hit)


def test_second_candidate_recovers_sometimes():
    recs = records(OracleConfig(seed=9, second_correct_prob=0.3), 100)
    miss = [r for r in recs if not r.draft_matches]
    rate = sum(r.draft_prediction.argmax2 == r.target_token for r in miss) / len(miss)
    assert abs(rate - 0.3) < 0.05


@pytest.mark.parametrize(
    "dist, want",
    [
        ([1.0], 0.0),
        ([0.5, 0.5], math.log(2)),
        ([0.7, 0.2, 0.1], 0.8018185525433373),
    ],
)
def test_entropy_examples(dist, want):
    assert entropy_of(dist) == pytest.approx(want, abs=1e-12)


def test_entropy_rejects_bad_input():
    with pytest.raises(ValueError):
        entropy_of([0.5, 0.6])
    with pytest.raises(ValueError):
        entropy_of([1.5, -0.5])


@settings(max_examples=300)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12).filter(lambda w: sum(w) > 1e-3))
def test_entropy_matches_direct_sum_and_is_permutation_invariant(weights):
    total = sum(weights)
    p = [w / total for w in weights]
    p[-1] = 1.0 - sum(p[:-1])
    p = [max(x, 0.0) for x in p]
    direct = -math.fsum(x * math.log(x) for x in p if x > 0)
    assert abs(entropy_of(p) - direct) < 1e-12
    assert abs(entropy_of(list(reversed(p))) - entropy_of(p)) < 1e-12
    assert entropy_of(p) <= math.log(len(p)) + 1e-12


def test_top2_probs_monotone_and_valid():
    prev = 2.0
    for i in range(1, 60):
        h = i / 10
        p1, p2 = top2_probs(h)
        assert 0 < p2 < p1 <= 1 and p1 + p2 <= 1
        assert p1 < prev
        prev = p1


def test_prediction_validation():
    with pytest.raises(ValueError):
        Prediction(((1, 0.5),), 0.1)
    with pytest.raises(ValueError):
        Prediction(((1, 0.3), (2, 0.6)), 0.1)
    with pytest.raises(ValueError):
        Prediction(((1, 0.7), (2, 0.6)), 0.1)
    with pytest.raises(ValueError):
        TokenRecord(0, 5, Prediction(((1, 0.6), (5, 0.3)), 0.5), Prediction(((1, 0.6), (5, 0.3)), 0.5))


def test_config_validation():
    for bad in [
        OracleConfig(kind="nope"),
        OracleConfig(match_prob=1.5),
        OracleConfig(sequence_length=0),
        OracleConfig(kind="trace"),
        OracleConfig(eos_id=99999),
    ]:
        with pytest.raises(OracleConfigError):
            bad.validate()


HAND = [
    {"t": 5, "tp": [[5, 0.9], [6, 0.05]], "te": 0.4, "dp": [[5, 0.8], [9, 0.1]], "de": 0.7},
    {"t": 7, "tp": [[7, 0.6], [2, 0.3]], "te": 0.9, "dp": [[3, 0.5], [7, 0.4]], "de": 1.0},
    {"t": 0, "tp": [[0, 0.99], [1, 0.005]], "te": 0.06, "dp": [[0, 0.97], [4, 0.01]], "de": 0.15},
]


def test_trace_readback_verbatim(tmp_path):
    p = tmp_path / "t.jsonl"
    line = json.dumps({"tokens": HAND}, separators=(",", ":"))
    p.write_text(line + "\n")
    (seq,) = read_trace(p)
    assert [r.target_token for r in seq] == [5, 7, 0]
    assert seq[1].draft_prediction.top == ((3, 0.5), (7, 0.4))
    assert dumps_sequence(seq) == line


def test_trace_oracle_samples_without_replacement(tmp_path):
    p = tmp_path / "t.jsonl"
    write_trace(p, OracleConfig(seed=2, sequence_length=5), 3)
    o = open_oracle(OracleConfig(kind="trace", trace_path=str(p), seed=0))
    seqs = [tuple(r.target_token for r in o.next_sequence()) for _ in range(3)]
    assert len(set(seqs)) == 3
    with pytest.raises(TraceExhausted):
        o.next_sequence()


def test_gen_trace_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trace(a, OracleConfig(seed=4), 2)
    write_trace(b, OracleConfig(seed=4), 2)
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 2


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("not json", "invalid JSON"),
        ('{"x": 1}', "tokens"),
        ('{"tokens": [{"t": 1, "tp": [[1, 0.9], [2, 0.1]], "te": 0.1, "dp": [[1, 0.9]], "de": 0.1}]}', "dp"),
        ('{"tokens": [{"t": 2, "tp": [[1, 0.9], [2, 0.1]], "te": 0.1, "dp": [[1, 0.9], [2, 0.1]], "de": 0.1}]}', "argmax"),
        ('{"tokens": [{"tp": [[1, 0.9], [2, 0.1]], "te": 0.1, "dp": [[1, 0.9], [2, 0.1]], "de": 0.1}]}', "'t'"),
    ],
)
def test_trace_errors_name_the_record(tmp_path, line, fragment):
    p = tmp_path / "bad.jsonl"
    good = json.dumps({"tokens": HAND})
    p.write_text(good + "\n" + line + "\n")
    with pytest.raises(TraceParseError) as info:
        read_trace(p)
    assert info.value.index == 1
    assert fragment in str(info.value)


def test_verify_greedy():
    seq = open_oracle(OracleConfig(seed=1, sequence_length=6)).next_sequence()
    view = SequenceView(seq)
    truth = view.target_tokens
    res = verify(view, 1, [truth[1], truth[2]])
    assert res.accepted == (truth[1], truth[2]) and res.bonus_token == truth[3]
    res = verify(view, 1, [truth[1], truth[2] + 1])
    assert res.accepted == (truth[1],) and res.bonus_token == truth[2]
    res = verify(view, 5, [])
    assert res.tokens == (0,)


def test_view_past_end_predicts_eos():
    view = SequenceView(open_oracle(OracleConfig(sequence_length=3)).next_sequence())
    assert view.draft_at(3).argmax == 0
