from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvis.harness.task import (
    TaskError,
    TaskSpec,
    answer_token,
    channel_oracle_accuracy,
    full_information_oracle,
    generate_task,
    universe_bayes_rate,
    vocab_needed,
)

SPEC = TaskSpec(train_size=512, eval_size=256)


@pytest.fixture(scope="module")
def task():
    return generate_task(SPEC, 0)


def test_full_information_oracle_is_perfect(task):
    for part in task:
        assert all(full_information_oracle(s) == s.label for s in part)
        assert all(s.answer[0] == answer_token(s.qtype, s.label) for s in part)


def test_single_channel_oracle_hits_bayes(task):
    _, evals = task
    bayes = universe_bayes_rate(SPEC, {"color"}, "count")
    assert bayes == pytest.approx(0.25)
    assert channel_oracle_accuracy(evals, SPEC, {"color"}, "count") == pytest.approx(bayes)
    assert channel_oracle_accuracy(evals, SPEC, {"count"}, "count") == 1.0


def test_deterministic(task):
    again = generate_task(SPEC, 0)
    assert again == task
    assert generate_task(SPEC, 1) != task


def test_balanced(task):
    for part in task:
        for q in SPEC.questions:
            labels = Counter(s.label for s in part if s.qtype == q)
            n = sum(labels.values())
            assert all(abs(c / n - 1 / len(labels)) <= 0.05 for c in labels.values())
        qt = Counter(s.qtype for s in part)
        assert abs(qt["color"] - qt["count"]) <= 1


def test_splits_disjoint_by_nuisance(task):
    train, evals = task
    key = lambda s: (s.image.mark, s.image.layout)  # noqa: E731
    assert not {key(s) for s in train} & {key(s) for s in evals}


def test_universe_too_small():
    with pytest.raises(TaskError, match="too small"):
        generate_task(TaskSpec(train_size=4, eval_size=64), 0)
    with pytest.raises(TaskError):
        generate_task(TaskSpec(questions=("shape",)), 0)


def test_vocab():
    assert vocab_needed() <= 256


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_bayes_rate_is_prior_max_when_blind(n_colors, max_count):
    spec = TaskSpec(n_colors=n_colors, max_count=max_count)
    assert universe_bayes_rate(spec, {"color"}, "count") == pytest.approx(1 / max_count)
    assert universe_bayes_rate(spec, {"count"}, "count") == 1.0
