"""Complementary-channel question answering over synthetic images.

Questions ask for one attribute of the image. When each attribute is seen by
a different expert, answering every question type needs all of them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ..experts import ATTRIBUTES, MAX_ATTRIBUTE_VALUES, SyntheticImage
from ..lm import EOS
from ..model import Sample

BOS = 2
QMARK = 3
QUESTION_BASE = 4
ANSWER_BASE = 16


def question_token(attr: str) -> int:
    return QUESTION_BASE + ATTRIBUTES.index(attr)


def answer_token(attr: str, value: int) -> int:
    return ANSWER_BASE + MAX_ATTRIBUTE_VALUES * ATTRIBUTES.index(attr) + value


def vocab_needed() -> int:
    return ANSWER_BASE + MAX_ATTRIBUTE_VALUES * len(ATTRIBUTES)


class TaskError(ValueError):
    pass


@dataclass
class TaskSpec:
    n_colors: int = 4
    max_count: int = 4
    n_marks: int = 4
    n_layouts: int = 4
    questions: tuple[str, ...] = ("color", "count")
    train_size: int = 2048
    eval_size: int = 512
    channels: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.questions = tuple(self.questions)

    def universe(self) -> dict[str, int]:
        """Attribute -> number of values. Count value ``k`` means ``k + 1`` objects."""
        return {"color": self.n_colors, "count": self.max_count, "mark": self.n_marks, "layout": self.n_layouts}

    def problems(self, path: str = "task") -> list[tuple[str, str]]:
        out = []
        for attr, n in self.universe().items():
            key = {"color": "n_colors", "count": "max_count", "mark": "n_marks", "layout": "n_layouts"}[attr]
            if not 1 <= n <= MAX_ATTRIBUTE_VALUES:
                out.append((f"{path}.{key}", f"must lie in [1, {MAX_ATTRIBUTE_VALUES}]"))
        if not self.questions:
            out.append((f"{path}.questions", "need at least one question type"))
        for q in self.questions:
            if q not in ATTRIBUTES:
                out.append((f"{path}.questions", f"unknown attribute {q!r}"))
        if len(set(self.questions)) != len(self.questions):
            out.append((f"{path}.questions", "duplicate question type"))
        for name, attrs in self.channels.items():
            for a in attrs:
                if a not in ATTRIBUTES:
                    out.append((f"{path}.channels.{name}", f"unknown attribute {a!r}"))
        for key in ("train_size", "eval_size"):
            if getattr(self, key) < 1:
                out.append((f"{path}.{key}", "must be positive"))
        return out

    def to_dict(self) -> dict:
        return {
            "n_colors": self.n_colors,
            "max_count": self.max_count,
            "n_marks": self.n_marks,
            "n_layouts": self.n_layouts,
            "questions": list(self.questions),
            "train_size": self.train_size,
            "eval_size": self.eval_size,
            "channels": {k: list(v) for k, v in self.channels.items()},
        }


def answer_of(image: SyntheticImage, qtype: str) -> int:
    return getattr(image, qtype)


def make_sample(image: SyntheticImage, qtype: str) -> Sample:
    value = answer_of(image, qtype)
    return Sample(
        image=image,
        prefix=(BOS,),
        question=(question_token(qtype), QMARK),
        answer=(answer_token(qtype, value), EOS),
        qtype=qtype,
        label=value,
    )


def _splits(spec: TaskSpec) -> tuple[list[tuple], list[tuple], list[str]]:
    """Split nuisance-attribute combinations into disjoint train/eval pools."""
    uni = spec.universe()
    nuisance = [a for a in ATTRIBUTES if a not in spec.questions]
    combos = list(itertools.product(*[range(uni[a]) for a in nuisance]))
    if len(combos) < 2:
        # nothing left to hold out; both splits draw from the same pool
        return combos, combos, nuisance
    held = combos[::4]
    train = [c for i, c in enumerate(combos) if i % 4]
    return train, held, nuisance


def _generate(spec: TaskSpec, size: int, pool: list[tuple], nuisance: list[str], rng) -> list[Sample]:
    uni = spec.universe()
    nq = len(spec.questions)
    counters = {q: 0 for q in spec.questions}
    perms: dict[tuple[str, int], np.ndarray] = {}
    out = []
    for i in range(size):
        q = spec.questions[i % nq]
        j = counters[q]
        counters[q] += 1
        # the asked attribute cycles fastest so every prefix of a cycle is
        # class-balanced; the remaining asked-about attributes cover their
        # joint exactly once per full cycle
        others = [a for a in spec.questions if a != q]
        other_combos = list(itertools.product(*[range(uni[a]) for a in others]))
        n_q = uni[q]
        cycle_len = n_q * len(other_combos)
        cycle, k = divmod(j, cycle_len)
        key = (q, cycle)
        if key not in perms:
            perms[key] = rng.permutation(len(other_combos))
        value = k % n_q
        other = other_combos[perms[key][(k // n_q + value) % len(other_combos)]]
        attrs = {q: value, **dict(zip(others, other))}
        nuis = pool[int(rng.integers(len(pool)))] if pool else ()
        attrs.update(dict(zip(nuisance, nuis)))
        image = SyntheticImage(**{a: int(attrs.get(a, 0)) for a in ATTRIBUTES}, seed=int(rng.integers(2**31)))
        out.append(make_sample(image, q))
    return out


def generate_task(spec: TaskSpec, seed: int) -> tuple[list[Sample], list[Sample]]:
    probs = spec.problems()
    if probs:
        raise TaskError("; ".join(f"{p}: {m}" for p, m in probs))
    uni = spec.universe()
    most = max(uni[q] for q in spec.questions)
    for key in ("train_size", "eval_size"):
        if getattr(spec, key) < len(spec.questions) * most:
            raise TaskError(
                f"universe too small for requested sizes: {key}={getattr(spec, key)} cannot cover "
                f"{len(spec.questions)} question types x {most} answer classes"
            )
    train_pool, eval_pool, nuisance = _splits(spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]))
    train = _generate(spec, spec.train_size, train_pool, nuisance, rng)
    evals = _generate(spec, spec.eval_size, eval_pool, nuisance, rng)
    return train, evals


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def full_information_oracle(sample: Sample) -> int:
    return answer_of(sample.image, sample.qtype)


def channel_posterior_argmax(spec: TaskSpec, visible: set[str], qtype: str) -> dict[tuple, int]:
    """Bayes decision for ``qtype`` given only ``visible`` attributes, by enumeration."""
    uni = spec.universe()
    vis = [a for a in ATTRIBUTES if a in visible]
    table: dict[tuple, np.ndarray] = {}
    for combo in itertools.product(*[range(uni[a]) for a in ATTRIBUTES]):
        attrs = dict(zip(ATTRIBUTES, combo))
        key = tuple(attrs[a] for a in vis)
        table.setdefault(key, np.zeros(uni[qtype]))[attrs[qtype]] += 1
    return {k: int(np.argmax(v)) for k, v in table.items()}


def universe_bayes_rate(spec: TaskSpec, visible: set[str], qtype: str) -> float:
    """Best achievable accuracy on ``qtype`` from ``visible`` under a uniform universe."""
    uni = spec.universe()
    vis = [a for a in ATTRIBUTES if a in visible]
    table: dict[tuple, np.ndarray] = {}
    total = 0
    for combo in itertools.product(*[range(uni[a]) for a in ATTRIBUTES]):
        attrs = dict(zip(ATTRIBUTES, combo))
        key = tuple(attrs[a] for a in vis)
        table.setdefault(key, np.zeros(uni[qtype]))[attrs[qtype]] += 1
        total += 1
    return float(sum(v.max() for v in table.values()) / total)


def channel_oracle_accuracy(samples: list[Sample], spec: TaskSpec, visible: set[str], qtype: str) -> float:
    decide = channel_posterior_argmax(spec, visible, qtype)
    vis = [a for a in ATTRIBUTES if a in visible]
    hits = [decide[tuple(getattr(s.image, a) for a in vis)] == s.label for s in samples if s.qtype == qtype]
    if not hits:
        raise ValueError(f"no {qtype} questions in the set")
    return float(np.mean(hits))


def empirical_bayes_rate(samples: list[Sample], visible: set[str], qtype: str) -> float:
    """Bayes rate of the set's own joint distribution (optimistic on small sets)."""
    vis = [a for a in ATTRIBUTES if a in visible]
    groups: dict[tuple, dict[int, int]] = {}
    n = 0
    for s in samples:
        if s.qtype != qtype:
            continue
        key = tuple(getattr(s.image, a) for a in vis)
        g = groups.setdefault(key, {})
        g[s.label] = g.get(s.label, 0) + 1
        n += 1
    return sum(max(g.values()) for g in groups.values()) / n
