"""Interleaved text/image sequences and a small pre-norm causal decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .fusion import FusedVisionTokens
from .numerics import ParamTensor, Tensor
from .positional import PETables, assign_positions, embed_positions

EOS = 0
PAD = 1

PROMPT = "prompt-text"
ANSWER = "answer-text"


def expert_source(label: str) -> str:
    return f"expert:{label}"


@dataclass
class TextSegment:
    ids: np.ndarray  # [t] or [B, t]
    role: str = PROMPT

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.role not in (PROMPT, ANSWER):
            raise ValueError(f"text role must be {PROMPT!r} or {ANSWER!r}")

    @property
    def length(self) -> int:
        return self.ids.shape[-1]


@dataclass
class ImageSegment:
    fused: FusedVisionTokens

    @property
    def length(self) -> int:
        return self.fused.n_tokens


@dataclass
class ModelInput:
    embedded: Tensor  # [..., L, d_model], positions already added
    sources: list[str]  # per position
    spans: list[tuple[str, int, int]]  # (source, start, stop) in order
    text_len: int  # text positions consumed so far
    exclude: np.ndarray = field(default=None)  # [L] bool, True = hidden from attention

    def __post_init__(self):
        if self.exclude is None:
            self.exclude = np.zeros(self.length, dtype=bool)

    @property
    def length(self) -> int:
        return self.embedded.shape[-2]

    def source_positions(self, source: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.sources) if s == source], dtype=np.int64)

    def causal_mask(self) -> np.ndarray:
        L = self.length
        mask = np.tril(np.ones((L, L), dtype=bool))
        mask &= ~self.exclude[None, :]
        # an excluded position still sees itself so its own row stays defined
        mask[np.diag_indices(L)] = True
        return mask

    def with_exclusion(self, positions) -> "ModelInput":
        ex = self.exclude.copy()
        ex[np.asarray(positions, dtype=np.int64)] = True
        return ModelInput(self.embedded, list(self.sources), list(self.spans), self.text_len, ex)


@dataclass
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 256
    max_len: int = 4608
    ff_mult: int = 2

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.n_layers < 1:
            out.append(("decoder.n_layers", "need at least one layer"))
        if self.n_heads < 1 or self.d_model % self.n_heads:
            out.append(("decoder.n_heads", f"must divide d_model ({self.d_model})"))
        if self.vocab_size < 2:
            out.append(("decoder.vocab_size", "must hold the reserved EOS and PAD ids"))
        if self.max_len < 1:
            out.append(("decoder.max_len", "must be positive"))
        return out

    def to_dict(self) -> dict:
        return dict(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            vocab_size=self.vocab_size,
            max_len=self.max_len,
            ff_mult=self.ff_mult,
        )


class DecoderParams:
    def __init__(self, config: DecoderConfig, seed: int = 0, dtype=nx.TRAIN_DTYPE):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC]))
        d, V, F = config.d_model, config.vocab_size, config.ff_mult * config.d_model
        self.tensors: dict[str, ParamTensor] = {}

        def dense(name, fan_in, fan_out, scale=1.0):
            w = rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in)
            self._add(name, w.astype(dtype))

        self._add("tok_emb", (rng.standard_normal((V, d)) * 0.5).astype(dtype))
        for i in range(config.n_layers):
            self._add(f"l{i}.ln1.g", np.ones((1, d), dtype))
            self._add(f"l{i}.ln1.b", np.zeros((1, d), dtype))
            for w in ("wq", "wk", "wv"):
                dense(f"l{i}.attn.{w}", d, d)
            dense(f"l{i}.attn.wo", d, d, scale=0.5)
            self._add(f"l{i}.ln2.g", np.ones((1, d), dtype))
            self._add(f"l{i}.ln2.b", np.zeros((1, d), dtype))
            dense(f"l{i}.ff1.w", d, F)
            self._add(f"l{i}.ff1.b", np.zeros((1, F), dtype))
            dense(f"l{i}.ff2.w", F, d, scale=0.5)
            self._add(f"l{i}.ff2.b", np.zeros((1, d), dtype))
        self._add("lnf.g", np.ones((1, d), dtype))
        self._add("lnf.b", np.zeros((1, d), dtype))
        dense("head.w", d, V)
        self._add("head.b", np.zeros((1, V), dtype))

    def _add(self, name, data):
        self.tensors[name] = ParamTensor(data, f"lm.{name}", "lm")

    def __getitem__(self, name: str) -> ParamTensor:
        return self.tensors[name]

    def parameters(self) -> list[ParamTensor]:
        return list(self.tensors.values())


def _broadcast_lead(parts: list[Tensor]) -> list[Tensor]:
    lead = ()
    for p in parts:
        if len(p.shape) - 2 > len(lead):
            lead = p.shape[:-2]
    out = []
    for p in parts:
        if p.shape[:-2] != lead:
            p = nx.add(np.zeros((*lead, 1, 1), dtype=p.dtype), p)
        out.append(p)
    return out


def embed_text(ids: np.ndarray, tok_emb: ParamTensor, tables: PETables, start: int) -> Tensor:
    V = tok_emb.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"token id outside vocabulary [0, {V})")
    return nx.add(nx.take_rows(tok_emb, ids), tables.text_positions(start, ids.shape[-1]))


def assemble_sequence(segments: Sequence, tables: PETables, tok_emb: ParamTensor) -> ModelInput:
    """Embed and concatenate segments in order, recording each position's source."""
    if not segments:
        raise ValueError("empty sequence")
    d = tok_emb.shape[1]
    parts, sources, spans = [], [], []
    text_pos, pos = 0, 0
    for seg in segments:
        if isinstance(seg, TextSegment):
            n = seg.length
            if n == 0:
                continue
            parts.append(embed_text(seg.ids, tok_emb, tables, text_pos))
            text_pos += n
            sources += [seg.role] * n
            spans.append((seg.role, pos, pos + n))
            pos += n
        elif isinstance(seg, ImageSegment):
            fused = seg.fused
            if fused.tokens.shape[-1] != d:
                raise nx.ShapeError(f"image tokens have width {fused.tokens.shape[-1]}, decoder expects {d}")
            grids = [s.grid for s in fused.segments]
            lengths = [s.length for s in fused.segments]
            pe = embed_positions(assign_positions(tables.scheme, grids, lengths), tables)
            parts.append(nx.add(fused.tokens, pe))
            for s in fused.segments:
                src = expert_source(s.expert)
                sources += [src] * s.length
                spans.append((src, pos + s.start, pos + s.start + s.length))
            pos += fused.n_tokens
        else:
            raise TypeError(f"unknown segment type {type(seg).__name__}")
    if not parts:
        raise ValueError("empty sequence")
    parts = _broadcast_lead(parts)
    emb = nx.concat(parts, axis=-2) if len(parts) > 1 else parts[0]
    return ModelInput(emb, sources, spans, text_pos)


def append_tokens(inp: ModelInput, ids, tables: PETables, tok_emb: ParamTensor, role: str = ANSWER) -> ModelInput:
    ids = np.asarray(ids, dtype=np.int64)
    new = embed_text(ids, tok_emb, tables, inp.text_len)
    a, b = _broadcast_lead([inp.embedded, new])
    n = ids.shape[-1]
    L = inp.length
    return ModelInput(
        nx.concat([a, b], axis=-2),
        inp.sources + [role] * n,
        inp.spans + [(role, L, L + n)],
        inp.text_len + n,
        np.concatenate([inp.exclude, np.zeros(n, dtype=bool)]),
    )


def decoder_forward(inp: ModelInput, params: DecoderParams, last_only: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Logits ``[..., L, V]`` and one attention tensor ``[..., H, L, L]`` per layer.

    ``last_only`` projects just the final position through the head.
    """
    cfg = params.config
    L = inp.length
    if L > cfg.max_len:
        raise OverflowError(f"sequence length {L} exceeds the decoder budget max_len={cfg.max_len}")
    mask = inp.causal_mask()
    x = inp.embedded
    maps = []
    for i in range(cfg.n_layers):
        p = lambda k: params[f"l{i}.{k}"]  # noqa: E731
        h = nx.layer_norm(x, p("ln1.g"), p("ln1.b"))
        a, w = nx.multihead_attention(h, h, p("attn.wq"), p("attn.wk"), p("attn.wv"), p("attn.wo"), cfg.n_heads, mask)
        maps.append(w)
        x = nx.add(x, a)
        h = nx.layer_norm(x, p("ln2.g"), p("ln2.b"))
        h = nx.linear_forward(nx.silu(nx.linear_forward(h, p("ff1.w"), p("ff1.b"))), p("ff2.w"), p("ff2.b"))
        x = nx.add(x, h)
    if last_only:
        x = nx.slice_axis(x, L - 1, L, axis=-2)
    x = nx.layer_norm(x, params["lnf.g"], params["lnf.b"])
    return nx.linear_forward(x, params["head.w"], params["head.b"]), maps


def generate_greedy(
    prompt: ModelInput, params: DecoderParams, tables: PETables, max_new: int, eos: int = EOS
) -> list[int]:
    """Append the argmax token until EOS or ``max_new``; ties go to the lowest id."""
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    if prompt.embedded.data.ndim != 2:
        raise ValueError("greedy generation runs on one unbatched sequence")
    out: list[int] = []
    inp = prompt
    for _ in range(max_new):
        logits, _ = decoder_forward(inp, params)
        tok = int(np.argmax(logits.data[-1]))
        out.append(tok)
        if tok == eos or len(out) == max_new:
            break
        inp = append_tokens(inp, [tok], tables, params["tok_emb"])
    return out
