"""The full poly-expert model: frozen experts, fusion, PE tables and decoder."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .experts import Expert, ExpertSpec, PatchFeatures, SyntheticImage
from .fusion import FusedVisionTokens, FusionConfig, FusionParams, fuse, fused_grids
from .lm import (
    ANSWER,
    DecoderConfig,
    DecoderParams,
    ImageSegment,
    ModelInput,
    TextSegment,
    assemble_sequence,
    decoder_forward,
    expert_source,
)
from .numerics import PARAM_GROUPS, ParamTensor, Tensor
from .positional import PETables


@dataclass
class Sample:
    image: SyntheticImage | None
    prefix: tuple[int, ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    qtype: str = ""
    label: int = -1


@dataclass
class Batch:
    samples: list[Sample]
    features: dict[str, np.ndarray]  # expert -> [B, n, d]
    prefix: np.ndarray
    question: np.ndarray
    answer: np.ndarray
    qtypes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            [self.samples[i] for i in idx],
            {k: v[idx] for k, v in self.features.items()},
            self.prefix[idx],
            self.question[idx],
            self.answer[idx],
            [self.qtypes[i] for i in idx] if self.qtypes else [],
        )


def group_digest(params: Sequence[ParamTensor]) -> str:
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(str(p.data.shape).encode())
        h.update(str(p.data.dtype).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class PolyExpertModel:
    def __init__(
        self,
        specs: Sequence[ExpertSpec],
        fusion_config: FusionConfig,
        pe_scheme: str,
        decoder_config: DecoderConfig,
        seed: int = 0,
        dtype=nx.TRAIN_DTYPE,
    ):
        if fusion_config.d_model != decoder_config.d_model:
            raise ValueError("fusion d_model and decoder d_model differ")
        self.specs = {s.name: s for s in specs}
        self.experts = {s.name: Expert(s) for s in specs}
        self.fusion_config = fusion_config
        self.decoder_config = decoder_config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.fusion = FusionParams(fusion_config, specs, seed=seed, dtype=dtype)
        self.pe = PETables(
            pe_scheme,
            decoder_config.d_model,
            fused_grids(fusion_config, self.specs),
            max_text=decoder_config.max_len,
            max_vision=decoder_config.max_len,
            seed=seed,
            dtype=dtype,
        )
        self.decoder = DecoderParams(decoder_config, seed=seed, dtype=dtype)
        self._cache: dict = {}

    # -- parameter store ---------------------------------------------------

    @property
    def order(self) -> tuple[str, ...]:
        return self.fusion_config.expert_order

    @property
    def pe_scheme(self) -> str:
        return self.pe.scheme

    def parameters(self) -> list[ParamTensor]:
        out: list[ParamTensor] = []
        for e in self.experts.values():
            out += e.params
        return out + self.fusion.parameters() + self.pe.parameters() + self.decoder.parameters()

    def named_parameters(self) -> dict[str, ParamTensor]:
        return {p.name: p for p in self.parameters()}

    def groups(self) -> dict[str, list[ParamTensor]]:
        out = {g: [] for g in PARAM_GROUPS}
        for p in self.parameters():
            out[p.group].append(p)
        return out

    def digests(self) -> dict[str, str]:
        return {g: group_digest(ps) for g, ps in self.groups().items()}

    def set_frozen_groups(self, frozen: set[str] | frozenset[str]) -> None:
        for p in self.parameters():
            p.frozen = p.group == "expert" or p.group in frozen

    def zero_grad(self) -> None:
        nx.zero_grads(self.parameters())

    def astype(self, dtype) -> "PolyExpertModel":
        other = copy.deepcopy(self)
        other.dtype = np.dtype(dtype)
        other._cache = {}
        for p in other.fusion.parameters() + other.pe.parameters() + other.decoder.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return other

    # -- forward pieces ----------------------------------------------------

    def encode(self, image: SyntheticImage) -> dict[str, np.ndarray]:
        key = (image, self.dtype.str)
        hit = self._cache.get(key)
        if hit is None:
            hit = {n: e.encode(image, self.dtype).features for n, e in self.experts.items()}
            self._cache[key] = hit
        return hit

    def make_batch(self, samples: Sequence[Sample]) -> Batch:
        samples = list(samples)
        if not samples:
            raise ValueError("empty batch")
        feats = {n: np.stack([self.encode(s.image)[n] for s in samples]) for n in self.experts}

        def ids(attr):
            rows = [getattr(s, attr) for s in samples]
            if len({len(r) for r in rows}) != 1:
                raise ValueError(f"batch samples disagree on {attr} length")
            return np.array(rows, dtype=np.int64).reshape(len(rows), -1)

        return Batch(samples, feats, ids("prefix"), ids("question"), ids("answer"), [s.qtype for s in samples])

    def patch_features(self, features: dict[str, np.ndarray], order: Sequence[str] | None = None) -> list[PatchFeatures]:
        order = self.order if order is None else order
        return [PatchFeatures(n, (self.specs[n].grid_rows, self.specs[n].grid_cols), features[n]) for n in order]

    def fuse(self, features: dict[str, np.ndarray], order: Sequence[str] | None = None) -> FusedVisionTokens:
        return fuse(self.patch_features(features, order), self.fusion)

    def build_input(
        self,
        batch: Batch,
        with_answer: bool = True,
        mask_experts: Sequence[str] = (),
        order: Sequence[str] | None = None,
    ) -> ModelInput:
        fused = self.fuse(batch.features, order)
        segs = [TextSegment(batch.prefix), ImageSegment(fused), TextSegment(batch.question)]
        if with_answer:
            segs.append(TextSegment(batch.answer, role=ANSWER))
        inp = assemble_sequence(segs, self.pe, self.decoder["tok_emb"])
        return exclude_experts(inp, mask_experts, self.order)

    def forward(self, batch: Batch, **kw) -> tuple[Tensor, list[Tensor], ModelInput]:
        inp = self.build_input(batch, **kw)
        logits, maps = decoder_forward(inp, self.decoder)
        return logits, maps, inp

    def loss(self, batch: Batch, **kw) -> Tensor:
        """Next-token loss restricted to answer tokens."""
        logits, _, inp = self.forward(batch, **kw)
        ta = batch.answer.shape[-1]
        L = inp.length
        pred = nx.slice_axis(logits, L - ta - 1, L - 1, axis=-2)
        return nx.cross_entropy(pred, batch.answer)

    def first_answer_logits(self, batch: Batch, chunk: int = 256, **kw) -> np.ndarray:
        """Logits for the first answer token, computed without a tape in chunks."""
        out = []
        with nx.no_grad():
            for i in range(0, len(batch), chunk):
                inp = self.build_input(batch.subset(np.arange(i, min(i + chunk, len(batch)))), with_answer=False, **kw)
                logits, _ = decoder_forward(inp, self.decoder, last_only=True)
                out.append(logits.data[..., -1, :])
        return np.concatenate(out)

    def predict(self, batch: Batch, **kw) -> np.ndarray:
        return np.argmax(self.first_answer_logits(batch, **kw), axis=-1)


def exclude_experts(inp: ModelInput, experts: Sequence[str], known: Sequence[str]) -> ModelInput:
    unknown = sorted(set(experts) - set(known))
    if unknown:
        raise KeyError(f"cannot mask unknown experts {unknown}")
    if not experts:
        return inp
    srcs = {expert_source(e) for e in experts}
    pos = [i for i, s in enumerate(inp.sources) if s in srcs]
    return inp.with_exclusion(pos)
