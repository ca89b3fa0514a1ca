import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import accuracy_oracle, spearman_oracle

from surgforge.datamodel import JudgeVerdict
from surgforge.errors import DegenerateInputError, EmptyInputError, JoinError, MismatchError, RangeError, SchemaError
from surgforge.evaluate import (
    DEFAULT_JUDGE_MODEL,
    JudgePolicy,
    Prediction,
    Reference,
    average_ranks,
    build_judge_prompt,
    compute_metrics,
    evaluate_run,
    human_correlation,
    parse_verdict,
    spearman,
)
from surgforge.llmclient import FunctionClient

REFS = ["The cystic duct is clipped.", "The gallbladder is retracted.", "The artery is divided."]


def verdict(m, t, s, i="x"):
    return JudgeVerdict(i, s, m, t)


# --- prompt --------------------------------------------------------------------------


def test_prompt_lists_numbered_references():
    request = build_judge_prompt("What happens?", REFS, "Clips are applied.", item_id="q1")
    user = request.messages[-1].content
    for i, ref in enumerate(REFS, start=1):
        assert f"{i}. {ref}" in user.splitlines()
    assert "4." not in user
    assert request.request_tag == "judge:q1"
    assert "JSON" in request.messages[0].content


def test_prompt_with_empty_candidate():
    request = build_judge_prompt("Q?", REFS[:1], "")
    assert request.messages[-1].content.endswith("Candidate answer: ")


def test_judge_model_default_and_override():
    assert DEFAULT_JUDGE_MODEL == "gpt-3.5-turbo-0125"
    assert build_judge_prompt("Q?", REFS, "a").model == DEFAULT_JUDGE_MODEL
    assert build_judge_prompt("Q?", REFS, "a", JudgePolicy(model="other-judge")).model == "other-judge"


def test_prompt_needs_references():
    with pytest.raises(ValueError):
        build_judge_prompt("Q?", [], "a")


# --- verdicts --------------------------------------------------------------------------


def test_parse_valid_verdict():
    v = parse_verdict('{"score":4,"matched":2,"total":3,"comment":"1 and 2 match"}', 3, "q1")
    assert v == JudgeVerdict("q1", 4, 2, 3, "1 and 2 match")


@pytest.mark.parametrize(
    "raw, error",
    [
        ('{"score":4,"matched":4,"total":3,"comment":""}', RangeError),
        ('{"score":7,"matched":1,"total":3,"comment":""}', RangeError),
        ('{"score":-1,"matched":1,"total":3,"comment":""}', RangeError),
        ('{"score":3,"matched":1,"total":2,"comment":""}', MismatchError),
        ('{"score":3.5,"matched":1,"total":3}', SchemaError),
        ('{"score":"3","matched":1,"total":3}', SchemaError),
        ('{"score":true,"matched":1,"total":3}', SchemaError),
        ("The answer is good, 4/5.", SchemaError),
        ("[1, 2]", SchemaError),
    ],
)
def test_parse_rejects(raw, error):
    with pytest.raises(error):
        parse_verdict(raw, 3)


def test_range_and_mismatch_are_schema_errors():
    # so the structured-call retry policy treats them as unusable replies
    assert issubclass(RangeError, SchemaError) and issubclass(MismatchError, SchemaError)


# --- metrics -------------------------------------------------------------------------------


def test_metrics_example():
    report = compute_metrics([verdict(1, 2, 3), verdict(0, 3, 1)])
    assert (report.accuracy_at_1, report.accuracy_at_all, report.mean_score) == (0.5, 0.2, 2.0)


def test_metrics_all_matched_and_mean():
    report = compute_metrics([verdict(2, 2, 5), verdict(3, 3, 0), verdict(1, 1, 4)])
    assert report.accuracy_at_1 == report.accuracy_at_all == 1.0
    assert report.mean_score == 3.0


def test_metrics_empty():
    with pytest.raises(EmptyInputError):
        compute_metrics([])


verdict_sets = st.lists(
    st.integers(1, 6).flatmap(lambda t: st.tuples(st.integers(0, t), st.just(t), st.integers(0, 5))),
    min_size=1,
    max_size=20,
)


@settings(max_examples=300, deadline=None)
@given(verdict_sets, st.randoms(use_true_random=False))
def test_metrics_oracle_and_permutation(triples, rnd):
    vs = [verdict(m, t, s, str(i)) for i, (m, t, s) in enumerate(triples)]
    report = compute_metrics(vs)
    acc1, accall, mean = accuracy_oracle(triples)
    assert report.accuracy_at_1 == float(acc1)
    assert report.accuracy_at_all == float(accall)
    assert report.mean_score == pytest.approx(float(mean), abs=1e-12)
    rnd.shuffle(vs)
    shuffled = compute_metrics(vs)
    assert (shuffled.accuracy_at_1, shuffled.accuracy_at_all) == (report.accuracy_at_1, report.accuracy_at_all)
    assert (report.accuracy_at_1 == 1.0) == all(m >= 1 for m, _, _ in triples)
    assert (report.accuracy_at_all == 1.0) == all(m == t for m, t, _ in triples)


def test_perfect_set_stays_perfect():
    perfect = [verdict(2, 2, 5), verdict(1, 1, 5)]
    extended = compute_metrics(perfect + [verdict(4, 4, 3)])
    assert extended.accuracy_at_1 == extended.accuracy_at_all == 1.0


# --- spearman -------------------------------------------------------------------------------


def test_spearman_examples():
    assert spearman([(1, 1), (2, 2), (3, 3)]) == 1.0
    assert spearman([(1, 3), (2, 2), (3, 1)]) == -1.0
    rho = spearman(zip((1, 2, 2, 4), (1, 3, 2, 4)))
    # ranks x=(1, 2.5, 2.5, 4), y=(1, 3, 2, 4): sxy=4.5, sxx=4.5, syy=5
    assert rho == pytest.approx(math.sqrt(0.9), abs=1e-15)
    assert rho == pytest.approx(0.9486832980505138, abs=1e-15)


def test_average_ranks():
    assert average_ranks([10, 20, 20, 5]) == [2.0, 3.5, 3.5, 1.0]


@pytest.mark.parametrize("pairs", [[], [(1, 2)], [(1, 1), (1, 2)], [(1, 3), (2, 3), (3, 3)]])
def test_spearman_degenerate(pairs):
    with pytest.raises(DegenerateInputError):
        spearman(pairs)


def non_degenerate(values):
    return len(set(values)) > 1


def _scores(n):
    return st.lists(st.integers(0, 5), min_size=n, max_size=n)


paired = (
    st.integers(2, 25)
    .flatmap(lambda n: st.tuples(_scores(n), _scores(n)))
    .filter(lambda xy: non_degenerate(xy[0]) and non_degenerate(xy[1]))
)


@settings(max_examples=300, deadline=None)
@given(paired)
def test_spearman_matches_oracle_symmetric_and_invariant(xy):
    x, y = xy
    rho = spearman(zip(x, y))
    assert -1.0 <= rho <= 1.0
    assert abs(rho - spearman_oracle(x, y)) <= 1e-12
    assert abs(rho - spearman(zip(y, x))) <= 1e-12
    # strictly increasing transform of one side
    assert abs(rho - spearman(zip([math.exp(v) * 3 + 1 for v in x], y))) <= 1e-12


def test_spearman_agrees_with_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    rng = random.Random(11)
    for _ in range(50):
        n = rng.randint(3, 30)
        x = [rng.randint(0, 5) for _ in range(n)]
        y = [rng.random() for _ in range(n)]
        if not non_degenerate(x):
            continue
        assert spearman(zip(x, y)) == pytest.approx(scipy_stats.spearmanr(x, y).statistic, abs=1e-12)


# --- evaluate_run ---------------------------------------------------------------------------


def items(n):
    refs = [Reference(f"q{i:02d}", "What happens?", tuple(REFS[: 1 + i % 3])) for i in range(n)]
    preds = [Prediction(f"q{i:02d}", "Clips are applied.") for i in range(n)]
    return preds, refs


def judge_fn(bad=()):
    def reply(request):
        item = request.request_tag.split(":")[1]
        if item in bad:
            return "I think it is fine."
        n = sum(1 for line in request.messages[-1].content.splitlines() if line[:1].isdigit())
        return json.dumps({"score": 3, "matched": 1, "total": n, "comment": "1 matches"})

    return FunctionClient(reply)


def test_evaluate_run_all_valid():
    preds, refs = items(10)
    verdicts, report, failures = evaluate_run(preds, refs, judge_fn())
    assert report.n_items == 10 and report.failures == 0 and failures == []
    assert [v.id for v in verdicts] == sorted(p.id for p in preds)
    assert report.accuracy_at_1 == 1.0


def test_evaluate_run_one_failure():
    preds, refs = items(10)
    verdicts, report, failures = evaluate_run(preds, refs, judge_fn(bad={"q04"}))
    assert report.n_items == 9 and report.failures == 1
    assert [f.clip_id for f in failures] == ["q04"]


def test_evaluate_run_join_error():
    preds, _ = items(3)
    _, refs = items(0)
    with pytest.raises(JoinError):
        evaluate_run(preds, refs + [Reference("other", "Q?", ("r",))], judge_fn())


def test_human_correlation():
    vs = [JudgeVerdict(f"q{i}", s, 0, 1) for i, s in enumerate([1, 2, 3, 4])]
    human = [{"id": i, "human_score": h} for i, h in (("q0", 0), ("q1", 2), ("q2", 1), ("q3", 5), ("zz", 5))]
    out = human_correlation(vs, human)
    assert out["n"] == 4
    assert out["spearman_rho"] == pytest.approx(spearman_oracle([0, 2, 1, 5], [1, 2, 3, 4]), abs=1e-12)
