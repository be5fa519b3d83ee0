"""End-to-end runs: build, train, evaluate, analyse, write artifacts."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..analysis import attention_contribution, masked_accuracy, token_budget_report
from ..model import Batch, PolyExpertModel
from ..training import PipelineResult, run_pipeline
from .config import ExperimentConfig
from .task import generate_task

ARTIFACTS = ("config.yaml", "metrics.jsonl", "budget.tsv", "contribution.tsv", "mask.tsv", "checkpoint_pretrain.bin", "checkpoint_finetune.bin")
PROMPT_TOKENS = 5  # BOS, question, "?", answer, EOS


def build_model(config: ExperimentConfig) -> PolyExpertModel:
    dtype = nx.VERIFY_DTYPE if config.precision == "float64" else nx.TRAIN_DTYPE
    return PolyExpertModel(config.experts, config.fusion, config.pe_scheme, config.decoder, seed=config.seed, dtype=dtype)


def evaluate(model: PolyExpertModel, data: Batch, masked=()) -> dict[str, float]:
    return masked_accuracy(model, data, masked)


def mask_table(model: PolyExpertModel, data: Batch) -> list[dict]:
    """Accuracy per question type with nothing masked, each expert masked, and all masked."""
    rows = [{"masked": "none", **evaluate(model, data)}]
    for e in model.order:
        rows.append({"masked": e, **evaluate(model, data, [e])})
    if len(model.order) > 1:
        rows.append({"masked": "all", **evaluate(model, data, list(model.order))})
    return rows


def _tsv(rows: list[dict]) -> str:
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    out_dir: Path
    pipeline: PipelineResult
    accuracy: dict[str, float]
    mask_rows: list[dict]
    manifest: dict

    @property
    def model(self) -> PolyExpertModel:
        return self.pipeline.model


def run_experiment(config: ExperimentConfig, out_dir=None, log_every: int = 0) -> ExperimentResult:
    """Train both phases and write every artifact. All files except the manifest timestamp are deterministic."""
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.dump())

    train_set, eval_set = generate_task(config.task, config.seed)
    result = run_pipeline(config, train_set=train_set, out_dir=out, log_every=log_every)
    model = result.model
    evals = model.make_batch(eval_set)
    acc = evaluate(model, evals)

    lines = []
    for phase, rep in result.reports.items():
        for step, loss in enumerate(rep.losses):
            lines.append({"phase": phase, "step": step, "loss": loss})
        lines.append({"phase": phase, "event": "digests", "before": rep.digests_before, "after": rep.digests_after})
    lines.append({"event": "eval", "accuracy": acc, "n_eval": len(eval_set)})
    (out / "metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))

    budget = token_budget_report(config.fusion, config.expert_specs, config.pe_scheme, PROMPT_TOKENS, config.decoder.max_len)
    (out / "budget.tsv").write_text(budget.table())

    if config.analysis.get("contribution", True):
        n = min(int(config.analysis.get("contribution_samples", 64)), len(eval_set))
        rep = attention_contribution(model, evals.subset(np.arange(n)))
        (out / "contribution.tsv").write_text(rep.table())
    mask_rows = mask_table(model, evals) if config.analysis.get("mask", True) else []
    if mask_rows:
        (out / "mask.tsv").write_text(_tsv(mask_rows))
    if config.analysis.get("order_sweep", False):
        from ..analysis import order_sweep

        orders = [list(model.order), list(reversed(model.order))]
        (out / "order_sweep.tsv").write_text(_tsv(order_sweep(config, orders)))

    files = {}
    for p in sorted(out.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            files[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"files": files, "seed": config.seed, "created_unix": int(time.time())}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(out, result, acc, mask_rows, manifest)


# ---------------------------------------------------------------------------
# micro configs for finite-difference checks
# ---------------------------------------------------------------------------


def micro_config(method: str = "mlp", pe_scheme: str = "share_by_row", seed: int = 0) -> ExperimentConfig:
    """A float64 config small enough for an exhaustive grad check."""
    from .config import load_config

    raw = {
        "seed": seed,
        "precision": "float64",
        "experts": [
            {"name": "a", "grid_rows": 2, "grid_cols": 4, "hidden_dim": 4, "channel_profile": ["color"]},
            {"name": "b", "grid_rows": 2, "grid_cols": 2, "hidden_dim": 4, "channel_profile": ["count"], "seed": 1},
        ],
        "fusion": {
            "method": method,
            "m_per_expert": {"a": 2, "b": 1},
            "queries_per_expert": {"a": 2, "b": 2} if method == "qformer" else {},
            "qformer_width": 8,
            "qformer_layers": 1,
            "qformer_heads": 2,
        },
        "pe_scheme": pe_scheme,
        "decoder": {"d_model": 8, "n_layers": 1, "n_heads": 2, "vocab_size": 80, "max_len": 16, "ff_mult": 2},
        "task": {"train_size": 16, "eval_size": 16, "n_colors": 2, "max_count": 2},
    }
    return load_config(raw)


def micro_gradcheck(method: str = "mlp", pe_scheme: str = "share_by_row", phase: str = "finetune", n: int = 4, seed: int = 0) -> dict[str, float]:
    from ..training import FROZEN_BY_PHASE, grad_check

    cfg = micro_config(method, pe_scheme, seed)
    model = build_model(cfg)
    model.set_frozen_groups(FROZEN_BY_PHASE[phase])
    train, _ = generate_task(cfg.task, seed)
    return grad_check(model, model.make_batch(train[:n]))
