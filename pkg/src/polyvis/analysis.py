"""Attention contribution, expert masking, order sweeps and token budgets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .experts import ExpertSpec
from .fusion import FusionConfig, fused_grids, fused_token_count
from .lm import ANSWER, PROMPT, TextSegment, append_tokens, assemble_sequence, decoder_forward, expert_source, generate_greedy
from .model import Batch, PolyExpertModel, Sample, exclude_experts
from .positional import normalize_scheme, position_budget

# ---------------------------------------------------------------------------
# attention contribution
# ---------------------------------------------------------------------------


@dataclass
class ContributionReport:
    experts: list[str]
    prompt: float
    expert_mass: dict[str, float]
    residual: float
    sample_count: int
    per_sample: list[dict[str, float]] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        out = {"text_prompt": self.prompt}
        out.update({e: self.expert_mass[e] for e in self.experts})
        out["residual"] = self.residual
        out["samples"] = self.sample_count
        return out

    def table(self) -> str:
        cols = ["text_prompt", *self.experts, "residual", "samples"]
        r = self.row()
        vals = [f"{r[c]:.6f}" if c != "samples" else str(r[c]) for c in cols]
        return "\t".join(cols) + "\n" + "\t".join(vals) + "\n"


def _output_rows(L: int, n_answer: int) -> np.ndarray:
    """Rows whose next-token prediction is an answer token."""
    if n_answer < 1:
        raise ValueError("no answer tokens to attribute")
    return np.arange(L - n_answer - 1, L - 1)


def _buckets(sources: Sequence[str], experts: Sequence[str]) -> dict[str, np.ndarray]:
    srcs = np.array(sources)
    out = {"prompt": srcs == PROMPT}
    for e in experts:
        out[e] = srcs == expert_source(e)
    out["residual"] = ~np.any(np.stack(list(out.values())), axis=0)
    return out


def streaming_masses(maps, sources: Sequence[str], rows: np.ndarray, experts: Sequence[str]) -> list[dict[str, float]]:
    """Per-sample source masses, averaged over output rows, layers and heads.

    ``maps`` is a list of per-layer attention arrays ``[B, H, L, L]``.
    """
    buckets = _buckets(sources, experts)
    total = None
    for w in maps:
        w = np.asarray(w, dtype=np.float64)[..., rows, :]  # [B, H, R, L]
        part = {k: w[..., m].sum(axis=-1).mean(axis=(-1, -2)) for k, m in buckets.items()}
        total = part if total is None else {k: total[k] + part[k] for k in total}
    n = len(maps)
    B = next(iter(total.values())).shape[0]
    return [{k: float(v[b] / n) for k, v in total.items()} for b in range(B)]


def bruteforce_masses(maps, sources: Sequence[str], rows: np.ndarray, experts: Sequence[str]) -> list[dict[str, float]]:
    """Same quantity as ``streaming_masses`` by explicit scalar summation."""
    label = {}
    for j, s in enumerate(sources):
        if s == PROMPT:
            label[j] = "prompt"
        elif s.startswith("expert:") and s[len("expert:") :] in experts:
            label[j] = s[len("expert:") :]
        else:
            label[j] = "residual"
    keys = ["prompt", *experts, "residual"]
    B = np.asarray(maps[0]).shape[0]
    out = []
    for b in range(B):
        acc = dict.fromkeys(keys, 0.0)
        count = 0
        for w in maps:
            w = np.asarray(w, dtype=np.float64)
            for h in range(w.shape[1]):
                for r in rows:
                    for j in range(w.shape[-1]):
                        acc[label[j]] += float(w[b, h, r, j])
                    count += 1
        out.append({k: v / count for k, v in acc.items()})
    return out


def _report(per_sample: list[dict[str, float]], experts: Sequence[str]) -> ContributionReport:
    n = len(per_sample)
    mean = {k: float(np.mean([s[k] for s in per_sample])) for k in per_sample[0]}
    return ContributionReport(
        experts=list(experts),
        prompt=mean["prompt"],
        expert_mass={e: mean[e] for e in experts},
        residual=mean["residual"],
        sample_count=n,
        per_sample=per_sample,
    )


def _as_batches(model: PolyExpertModel, dataset, batch_size: int = 64) -> list[Batch]:
    if isinstance(dataset, Batch):
        return [dataset]
    samples = list(dataset)
    if not samples:
        raise ValueError("empty dataset")
    return [model.make_batch(samples[i : i + batch_size]) for i in range(0, len(samples), batch_size)]


def attention_contribution(
    model: PolyExpertModel, dataset, mask_experts: Sequence[str] = (), bruteforce: bool = False
) -> ContributionReport:
    """Mean attention mass that answer-producing rows place on each source span."""
    per_sample = []
    fn = bruteforce_masses if bruteforce else streaming_masses
    for batch in _as_batches(model, dataset):
        if batch.answer.shape[-1] == 0:
            raise ValueError("dataset has no answer tokens")
        _, maps, inp = model.forward(batch, mask_experts=mask_experts)
        rows = _output_rows(inp.length, batch.answer.shape[-1])
        per_sample += fn([m.data for m in maps], inp.sources, rows, model.order)
    return _report(per_sample, model.order)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass
class MaskSpec:
    experts: frozenset[str] = frozenset()

    def __post_init__(self):
        self.experts = frozenset(self.experts)

    def validate(self, known: Sequence[str]) -> None:
        unknown = sorted(self.experts - set(known))
        if unknown:
            raise KeyError(f"unknown experts {unknown}")


def _single(model: PolyExpertModel, sample: Sample) -> Batch:
    b = model.make_batch([sample])
    return b


def mask_expert(model: PolyExpertModel, sample: Sample, spec: MaskSpec, max_new: int = 4) -> tuple[list[int], ContributionReport]:
    """Greedy answer with the masked experts' spans hidden from every attention row."""
    spec.validate(model.order)
    batch = _single(model, sample)
    inp = model.build_input(batch.subset([0]), with_answer=False, mask_experts=sorted(spec.experts))
    inp = _unbatch(inp)
    tokens = generate_greedy(inp, model.decoder, model.pe, max_new)
    full = append_tokens(inp, tokens, model.pe, model.decoder["tok_emb"])
    _, maps = decoder_forward(full, model.decoder)
    rows = _output_rows(full.length, len(tokens))
    masses = streaming_masses([m.data[None] for m in maps], full.sources, rows, model.order)
    return tokens, _report(masses, model.order)


def _unbatch(inp):
    from . import numerics as nx
    from .lm import ModelInput

    emb = inp.embedded
    if emb.data.ndim == 3:
        emb = nx.reshape(emb, emb.shape[1:])
    return ModelInput(emb, inp.sources, inp.spans, inp.text_len, inp.exclude)


def text_only_generate(model: PolyExpertModel, sample: Sample, max_new: int = 4) -> list[int]:
    """Greedy answer from the prompt with every image span removed."""
    segs = [TextSegment(np.array(sample.prefix)), TextSegment(np.array(sample.question))]
    inp = assemble_sequence(segs, model.pe, model.decoder["tok_emb"])
    return generate_greedy(inp, model.decoder, model.pe, max_new)


def masked_accuracy(model: PolyExpertModel, data: Batch, masked: Sequence[str] = ()) -> dict[str, float]:
    """First-answer-token accuracy per question type with ``masked`` experts hidden."""
    pred = model.predict(data, mask_experts=list(masked))
    gold = data.answer[:, 0]
    out = {}
    for q in sorted(set(data.qtypes)):
        sel = np.array([t == q for t in data.qtypes])
        out[q] = float(np.mean(pred[sel] == gold[sel]))
    out["all"] = float(np.mean(pred == gold))
    return out


# ---------------------------------------------------------------------------
# expert order
# ---------------------------------------------------------------------------


def order_sweep(config, orders: Sequence[Sequence[str]], train: bool = True) -> list[dict]:
    """One model per order, identical seeds; returns one metric row per order."""
    from .harness.experiment import build_model, evaluate
    from .harness.task import generate_task
    from .training import run_pipeline

    train_set, eval_set = generate_task(config.task, config.seed)
    rows = []
    for order in orders:
        cfg = config.replace(fusion__expert_order=list(order))
        if train:
            result = run_pipeline(cfg, train_set=train_set)
            model, final = result.model, result.reports["finetune"].final_loss
        else:
            model, final = build_model(cfg), float("nan")
        acc = evaluate(model, model.make_batch(eval_set))
        rows.append({"order": "->".join(order), "final_loss": final, **{f"acc_{k}": v for k, v in acc.items()}})
    return rows


# ---------------------------------------------------------------------------
# token and PE budget
# ---------------------------------------------------------------------------


@dataclass
class BudgetReport:
    scheme: str
    experts: list[dict]  # name, raw_patches, fused_tokens, grid
    vision_tokens: int
    prompt_tokens: int
    distinct_pe: int
    sequence_length: int
    max_len: int
    ratio: float

    @property
    def overflow(self) -> bool:
        return self.sequence_length > self.max_len

    def rows(self) -> list[dict]:
        out = []
        for e in self.experts:
            out.append(
                {
                    "expert": e["name"],
                    "raw_patches": e["raw_patches"],
                    "fused_tokens": e["fused_tokens"],
                    "fused_grid": f"{e['grid'][0]}x{e['grid'][1]}",
                }
            )
        return out

    def summary(self) -> dict:
        return {
            "scheme": self.scheme,
            "vision_tokens": self.vision_tokens,
            "prompt_tokens": self.prompt_tokens,
            "distinct_pe": self.distinct_pe,
            "sequence_length": self.sequence_length,
            "max_len": self.max_len,
            "overflow": self.overflow,
            "vision_text_ratio": self.ratio,
        }

    def table(self) -> str:
        lines = ["expert\traw_patches\tfused_tokens\tfused_grid"]
        for r in self.rows():
            lines.append(f"{r['expert']}\t{r['raw_patches']}\t{r['fused_tokens']}\t{r['fused_grid']}")
        lines.append("")
        lines.append("\t".join(self.summary()))
        lines.append("\t".join(str(v) for v in self.summary().values()))
        return "\n".join(lines) + "\n"


def token_budget_report(
    fusion: FusionConfig, specs: Mapping[str, ExpertSpec] | Sequence[ExpertSpec], pe_scheme: str, prompt_len: int, max_len: int = 4608
) -> BudgetReport:
    if not isinstance(specs, Mapping):
        specs = {s.name: s for s in specs}
    scheme = normalize_scheme(pe_scheme)
    grids = fused_grids(fusion, specs)
    experts = []
    for name, grid in zip(fusion.expert_order, grids):
        experts.append(
            {"name": name, "raw_patches": specs[name].n_patches, "fused_tokens": grid[0] * grid[1], "grid": grid}
        )
    vision = fused_token_count(fusion, specs)
    return BudgetReport(
        scheme=scheme,
        experts=experts,
        vision_tokens=vision,
        prompt_tokens=prompt_len,
        distinct_pe=position_budget(scheme, grids),
        sequence_length=vision + prompt_len,
        max_len=max_len,
        ratio=vision / prompt_len if prompt_len else float("inf"),
    )
