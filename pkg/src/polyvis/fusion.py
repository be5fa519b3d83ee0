"""Poly-expert fusion: per-expert MLP with m-patches-one-token, or a shared Q-Former.

Both paths map an ordered list of expert features to one token sequence of
width ``d_model`` and record which span of it came from which expert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .experts import ExpertSpec, PatchFeatures
from .numerics import ParamTensor, Tensor

M_RANGE = (1, 16)


class Segment(NamedTuple):
    expert: str
    start: int
    length: int
    grid: tuple[int, int]


@dataclass
class FusionConfig:
    method: str = "mlp"
    expert_order: tuple[str, ...] = ()
    m_per_expert: dict[str, int] = field(default_factory=dict)
    queries_per_expert: dict[str, int] = field(default_factory=dict)
    d_model: int = 64
    d_hidden: int = 64
    qformer_width: int = 768
    qformer_layers: int = 2
    qformer_heads: int = 4

    def __post_init__(self):
        self.expert_order = tuple(self.expert_order)

    def problems(self) -> list[tuple[str, str]]:
        """Every violated invariant as ``(field path, message)``."""
        out = []
        if self.method not in ("mlp", "qformer"):
            out.append(("fusion.method", f"must be 'mlp' or 'qformer', got {self.method!r}"))
        if len(set(self.expert_order)) != len(self.expert_order):
            out.append(("fusion.expert_order", "duplicate expert label"))
        if self.d_hidden != self.d_model:
            out.append(("fusion.d_hidden", f"must equal d_model ({self.d_model}), got {self.d_hidden}"))
        if self.method == "mlp":
            for name in self.expert_order:
                m = self.m_per_expert.get(name)
                if m is None:
                    out.append((f"fusion.m_per_expert.{name}", "missing entry for ordered expert"))
                elif not M_RANGE[0] <= m <= M_RANGE[1]:
                    out.append((f"fusion.m_per_expert.{name}", f"m={m} outside [1, 16]"))
        if self.method == "qformer":
            for name in self.expert_order:
                q = self.queries_per_expert.get(name)
                if q is None:
                    out.append((f"fusion.queries_per_expert.{name}", "missing entry for ordered expert"))
                elif q <= 0:
                    out.append((f"fusion.queries_per_expert.{name}", "needs at least one query"))
            if self.qformer_width % self.qformer_heads:
                out.append(("fusion.qformer_heads", "must divide qformer_width"))
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "expert_order": list(self.expert_order),
            "m_per_expert": dict(self.m_per_expert),
            "queries_per_expert": dict(self.queries_per_expert),
            "d_model": self.d_model,
            "d_hidden": self.d_hidden,
            "qformer_width": self.qformer_width,
            "qformer_layers": self.qformer_layers,
            "qformer_heads": self.qformer_heads,
        }


@dataclass
class GroupedFeatures:
    expert: str
    grid: tuple[int, int]
    features: np.ndarray  # [..., n/m, m*d]
    m: int


@dataclass
class FusedVisionTokens:
    tokens: Tensor  # [..., N, d_model]
    segments: list[Segment]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    def segment(self, expert: str) -> Segment:
        for s in self.segments:
            if s.expert == expert:
                return s
        raise KeyError(expert)


def check_m(m: int, n: int, grid_cols: int, name: str = "expert") -> None:
    if not M_RANGE[0] <= m <= M_RANGE[1]:
        raise ValueError(f"{name}: m={m} outside [1, 16]")
    if n % m:
        raise ValueError(f"{name}: m={m} does not divide {n} patches")
    if grid_cols % m:
        raise ValueError(f"{name}: m={m} does not divide {grid_cols} grid columns")


def group_patches(features: PatchFeatures, m: int) -> GroupedFeatures:
    """Concatenate each run of ``m`` consecutive (row-major) patch vectors."""
    rows, cols = features.grid
    check_m(m, features.n, cols, features.expert)
    x = features.features
    grouped = x.reshape(*x.shape[:-2], features.n // m, m * features.d)
    return GroupedFeatures(features.expert, (rows, cols // m), grouped, m)


def order_experts(features, order: Sequence[str]) -> list:
    """Reorder items labelled by expert name. Accepts a mapping or an iterable."""
    if isinstance(features, Mapping):
        by_name = dict(features)
    else:
        by_name = {}
        for item in features:
            label = _label(item)
            if label in by_name:
                raise ValueError(f"duplicate expert {label!r} in input")
            by_name[label] = item
    if len(set(order)) != len(order):
        raise ValueError(f"duplicate label in order {list(order)}")
    if set(order) != set(by_name):
        missing = sorted(set(by_name) - set(order))
        extra = sorted(set(order) - set(by_name))
        raise ValueError(f"order does not match experts (missing {missing}, unknown {extra})")
    return [by_name[k] for k in order]


def _label(item) -> str:
    for attr in ("expert", "name"):
        v = getattr(item, attr, None)
        if isinstance(v, str):
            return v
    if isinstance(item, str):
        return item
    raise TypeError(f"cannot find an expert label on {item!r}")


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(dtype)


class FusionParams:
    """Learnable fusion weights, keyed by name, all in the ``fusion`` group."""

    def __init__(self, config: FusionConfig, specs: Iterable[ExpertSpec], seed: int = 0, dtype=nx.TRAIN_DTYPE):
        self.config = config
        self.specs = {s.name: s for s in specs}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF05E]))
        self.tensors: dict[str, ParamTensor] = {}
        missing = [e for e in config.expert_order if e not in self.specs]
        if missing:
            raise ValueError(f"fusion order names unknown experts {missing}")
        if config.method == "mlp":
            self._init_mlp(rng, dtype)
        elif config.method == "qformer":
            self._init_qformer(rng, dtype)
        else:
            raise ValueError(f"unknown fusion method {config.method!r}")

    def _add(self, name: str, data: np.ndarray) -> ParamTensor:
        p = ParamTensor(data, f"fusion.{name}", "fusion")
        self.tensors[name] = p
        return p

    def _init_mlp(self, rng, dtype):
        cfg = self.config
        for name in cfg.expert_order:
            spec = self.specs[name]
            m = cfg.m_per_expert[name]
            self._add(f"mlp1.{name}.w", _dense(rng, m * spec.hidden_dim, cfg.d_hidden, dtype))
            self._add(f"mlp1.{name}.b", np.zeros((1, cfg.d_hidden), dtype))
        self._add("mlp2.w", _dense(rng, cfg.d_hidden, cfg.d_model, dtype))
        self._add("mlp2.b", np.zeros((1, cfg.d_model), dtype))

    def _init_qformer(self, rng, dtype):
        cfg = self.config
        W = cfg.qformer_width
        for name in cfg.expert_order:
            self._add(f"proj.{name}", _dense(rng, self.specs[name].hidden_dim, W, dtype))
        total_q = sum(cfg.queries_per_expert[n] for n in cfg.expert_order)
        self._add("queries", (rng.standard_normal((total_q, W)) * 0.5).astype(dtype))
        for layer in range(cfg.qformer_layers):
            for block in ("self", "cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    self._add(f"q{layer}.{block}.{w}", _dense(rng, W, W, dtype))
            self._add(f"q{layer}.ff1.w", _dense(rng, W, 2 * W, dtype))
            self._add(f"q{layer}.ff1.b", np.zeros((1, 2 * W), dtype))
            self._add(f"q{layer}.ff2.w", _dense(rng, 2 * W, W, dtype))
            self._add(f"q{layer}.ff2.b", np.zeros((1, W), dtype))
            for ln in ("ln1", "ln2", "ln3"):
                self._add(f"q{layer}.{ln}.g", np.ones((1, W), dtype))
                self._add(f"q{layer}.{ln}.b", np.zeros((1, W), dtype))
        self._add("out.w", _dense(rng, W, cfg.d_model, dtype))
        self._add("out.b", np.zeros((1, cfg.d_model), dtype))

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def parameters(self) -> list[ParamTensor]:
        return list(self.tensors.values())


def mlp_fuse(grouped: Sequence[GroupedFeatures], params: FusionParams) -> FusedVisionTokens:
    hidden, segments, start = [], [], 0
    for g in grouped:
        key = f"mlp1.{g.expert}.w"
        if key not in params:
            raise KeyError(f"no first-layer weights for expert {g.expert!r}")
        w, b = params[key], params[f"mlp1.{g.expert}.b"]
        if w.shape[0] != g.features.shape[-1]:
            raise nx.ShapeError(
                f"{g.expert}: grouped width {g.features.shape[-1]} vs first layer {w.shape[0]} "
                f"(was m={g.m} the configured value?)"
            )
        h = nx.silu(nx.linear_forward(nx.as_tensor(g.features), w, b))
        n = g.features.shape[-2]
        hidden.append(h)
        segments.append(Segment(g.expert, start, n, g.grid))
        start += n
    H = nx.concat(hidden, axis=-2) if len(hidden) > 1 else hidden[0]
    V = nx.linear_forward(H, params["mlp2.w"], params["mlp2.b"])
    return FusedVisionTokens(V, segments)


def query_grid(q: int) -> tuple[int, int]:
    """Near-square factorisation used as the positional grid of a query block."""
    r = int(math.isqrt(q))
    while q % r:
        r -= 1
    return (r, q // r)


def qformer_fuse(features: Sequence[PatchFeatures], params: FusionParams, config: FusionConfig) -> FusedVisionTokens:
    W, H = config.qformer_width, config.qformer_heads
    projected, segments, start = [], [], 0
    for f in features:
        q = config.queries_per_expert.get(f.expert, 0)
        if q <= 0:
            raise ValueError(f"expert {f.expert!r} has no queries")
        projected.append(nx.matmul(nx.as_tensor(f.features), params[f"proj.{f.expert}"]))
        segments.append(Segment(f.expert, start, q, query_grid(q)))
        start += q
    if start != params["queries"].shape[0]:
        raise nx.ShapeError(f"{start} queries requested but the query table holds {params['queries'].shape[0]}")
    kv = nx.concat(projected, axis=-2) if len(projected) > 1 else projected[0]
    lead = kv.shape[:-2]
    Q = params["queries"]
    if lead:
        Q = nx.add(np.zeros((*lead, 1, 1), dtype=Q.dtype), Q)
    for layer in range(config.qformer_layers):
        p = lambda k: params[f"q{layer}.{k}"]  # noqa: E731
        sa, _ = nx.multihead_attention(Q, Q, p("self.wq"), p("self.wk"), p("self.wv"), p("self.wo"), H)
        Q = nx.layer_norm(nx.add(Q, sa), p("ln1.g"), p("ln1.b"))
        ca, _ = nx.multihead_attention(Q, kv, p("cross.wq"), p("cross.wk"), p("cross.wv"), p("cross.wo"), H)
        Q = nx.layer_norm(nx.add(Q, ca), p("ln2.g"), p("ln2.b"))
        ff = nx.linear_forward(nx.silu(nx.linear_forward(Q, p("ff1.w"), p("ff1.b"))), p("ff2.w"), p("ff2.b"))
        Q = nx.layer_norm(nx.add(Q, ff), p("ln3.g"), p("ln3.b"))
    V = nx.linear_forward(Q, params["out.w"], params["out.b"])
    return FusedVisionTokens(V, segments)


def fuse(features: Sequence[PatchFeatures], params: FusionParams) -> FusedVisionTokens:
    """Dispatch on the configured method; ``features`` must already be ordered."""
    cfg = params.config
    if cfg.method == "mlp":
        return mlp_fuse([group_patches(f, cfg.m_per_expert[f.expert]) for f in features], params)
    return qformer_fuse(features, params, cfg)


def fused_token_count(config: FusionConfig, specs: Mapping[str, ExpertSpec]) -> int:
    if config.method == "mlp":
        return sum(specs[n].n_patches // config.m_per_expert[n] for n in config.expert_order)
    return sum(config.queries_per_expert[n] for n in config.expert_order)


def fused_grids(config: FusionConfig, specs: Mapping[str, ExpertSpec]) -> list[tuple[int, int]]:
    out = []
    for n in config.expert_order:
        s = specs[n]
        if config.method == "mlp":
            out.append((s.grid_rows, s.grid_cols // config.m_per_expert[n]))
        else:
            out.append(query_grid(config.queries_per_expert[n]))
    return out
