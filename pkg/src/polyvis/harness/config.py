"""Experiment configuration: YAML in, validated dataclasses out.

Validation is total. Every problem is collected with its field path and
reported together; unknown keys are errors, with a spelling suggestion.
"""

from __future__ import annotations

import copy
import difflib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..experts import ATTRIBUTES, PAPER_GEOMETRY, ExpertSpec, preset
from ..fusion import FusionConfig, check_m, fused_token_count, query_grid
from ..lm import DecoderConfig
from ..positional import SCHEMES, normalize_scheme
from ..training import PhaseConfig
from .task import TaskSpec, vocab_needed

DEFAULTS: dict[str, Any] = {
    "out_dir": "runs/default",
    "scale": "toy",
    "precision": "float32",
    "experts": [
        {"name": "clip", "channel_profile": ["color"]},
        {"name": "dinov2", "channel_profile": ["count"]},
    ],
    "fusion": {
        "method": "mlp",
        "m_per_expert": {"clip": 8, "dinov2": 16},
        "queries_per_expert": {},
        "qformer_width": 768,
        "qformer_layers": 2,
        "qformer_heads": 4,
    },
    "pe_scheme": "share_by_row",
    "decoder": {"d_model": 64, "n_layers": 2, "n_heads": 4, "vocab_size": 256, "max_len": 4608, "ff_mult": 2},
    "phases": {
        "pretrain": {"lr": 3e-3, "steps": 200, "batch_size": 16, "warmup_ratio": 0.03},
        "finetune": {"lr": 1e-3, "steps": 200, "batch_size": 16, "warmup_ratio": 0.03},
    },
    "task": {
        "n_colors": 4,
        "max_count": 4,
        "n_marks": 4,
        "n_layouts": 4,
        "questions": ["color", "count"],
        "train_size": 2048,
        "eval_size": 512,
        "channels": {},
    },
    "analysis": {"contribution": True, "mask": True, "order_sweep": False, "contribution_samples": 64},
}

TOP_KEYS = {"seed", "out_dir", "scale", "precision", "experts", "fusion", "pe_scheme", "decoder", "phases", "task", "analysis"}
EXPERT_KEYS = {"name", "grid_rows", "grid_cols", "hidden_dim", "channel_profile", "seed"}
FUSION_KEYS = {
    "method",
    "expert_order",
    "m_per_expert",
    "queries_per_expert",
    "d_model",
    "d_hidden",
    "qformer_width",
    "qformer_layers",
    "qformer_heads",
}
PHASE_KEYS = {"lr", "steps", "batch_size", "warmup_ratio"}
TASK_KEYS = set(DEFAULTS["task"])
ANALYSIS_KEYS = set(DEFAULTS["analysis"])
DECODER_KEYS = set(DEFAULTS["decoder"])


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("invalid config:\n" + "\n".join(f"  {p}: {m}" for p, m in problems))


@dataclass
class ExperimentConfig:
    seed: int
    experts: list[ExpertSpec]
    fusion: FusionConfig
    pe_scheme: str
    decoder: DecoderConfig
    phases: dict[str, PhaseConfig]
    task: TaskSpec
    out_dir: str = "runs/default"
    scale: str = "toy"
    precision: str = "float32"
    analysis: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS["analysis"]))

    @property
    def expert_specs(self) -> dict[str, ExpertSpec]:
        return {e.name: e for e in self.experts}

    def to_dict(self) -> dict:
        fusion = self.fusion.to_dict()
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "scale": self.scale,
            "precision": self.precision,
            "experts": [e.to_dict() for e in self.experts],
            "fusion": fusion,
            "pe_scheme": self.pe_scheme,
            "decoder": self.decoder.to_dict(),
            "phases": {k: v.to_dict() for k, v in self.phases.items()},
            "task": self.task.to_dict(),
            "analysis": dict(self.analysis),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        """Return a re-validated copy with top-level or dotted-path changes applied."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            parts = key.split("__")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return load_config(d)


def _unknown(keys, allowed, path, problems):
    for k in keys:
        if k not in allowed:
            guess = difflib.get_close_matches(str(k), sorted(allowed), n=1)
            hint = f"; did you mean {guess[0]!r}?" if guess else ""
            problems.append((f"{path}{k}", f"unknown key{hint}"))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("m_per_expert", "queries_per_expert", "channels"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _expert_spec(entry: dict, scale: str, idx: int, problems) -> ExpertSpec | None:
    path = f"experts[{idx}]"
    if not isinstance(entry, dict):
        problems.append((path, "expected a mapping"))
        return None
    _unknown(entry, EXPERT_KEYS, f"{path}.", problems)
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        problems.append((f"{path}.name", "required"))
        return None
    base: dict = {}
    if name in PAPER_GEOMETRY:
        base = preset(name, scale).to_dict()
    else:
        for k in ("grid_rows", "grid_cols", "hidden_dim"):
            if k not in entry:
                problems.append((f"{path}.{k}", f"required for non-preset expert {name!r}"))
        if any(k not in entry for k in ("grid_rows", "grid_cols", "hidden_dim")):
            return None
        base = {"name": name, "seed": idx}
    base.update({k: v for k, v in entry.items() if k in EXPERT_KEYS})
    bad = [a for a in base.get("channel_profile", []) if a not in ATTRIBUTES]
    if bad:
        problems.append((f"{path}.channel_profile", f"unknown attributes {bad}; choose from {list(ATTRIBUTES)}"))
        return None
    for k in ("grid_rows", "grid_cols", "hidden_dim"):
        if not isinstance(base.get(k), int) or base[k] <= 0:
            problems.append((f"{path}.{k}", "must be a positive integer"))
            return None
    return ExpertSpec.from_dict(base)


def load_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping, filling defaults. Raises ConfigError listing every problem."""
    problems: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a mapping")])
    _unknown(raw, TOP_KEYS, "", problems)
    for sect, allowed in (("fusion", FUSION_KEYS), ("decoder", DECODER_KEYS), ("task", TASK_KEYS), ("analysis", ANALYSIS_KEYS)):
        if isinstance(raw.get(sect), dict):
            _unknown(raw[sect], allowed, f"{sect}.", problems)
    if isinstance(raw.get("phases"), dict):
        _unknown(raw["phases"], {"pretrain", "finetune"}, "phases.", problems)
        for ph, body in raw["phases"].items():
            if isinstance(body, dict):
                _unknown(body, PHASE_KEYS, f"phases.{ph}.", problems)

    if "seed" not in raw:
        problems.append(("seed", "required"))
    elif not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        problems.append(("seed", "must be an integer"))

    d = _merge({k: v for k, v in DEFAULTS.items()}, {k: v for k, v in raw.items() if k in TOP_KEYS})
    if "experts" in raw and "m_per_expert" not in (raw.get("fusion") or {}):
        # the default m values belong to the default expert set
        d["fusion"]["m_per_expert"] = {}

    scale = d["scale"]
    if scale not in ("toy", "paper"):
        problems.append(("scale", "must be 'toy' or 'paper'"))
        scale = "toy"
    if d["precision"] not in ("float32", "float64"):
        problems.append(("precision", "must be 'float32' or 'float64'"))

    experts = []
    if not isinstance(d["experts"], list) or not d["experts"]:
        problems.append(("experts", "need a non-empty list"))
    else:
        for i, e in enumerate(d["experts"]):
            spec = _expert_spec(e, scale, i, problems)
            if spec is not None:
                experts.append(spec)
    names = [e.name for e in experts]
    if len(set(names)) != len(names):
        problems.append(("experts", "duplicate expert name"))
    specs = {e.name: e for e in experts}

    try:
        dec = DecoderConfig(**d["decoder"])
        problems += dec.problems()
    except TypeError as exc:
        problems.append(("decoder", str(exc)))
        dec = DecoderConfig()

    f = d["fusion"]
    order = list(f.get("expert_order") or names)
    m_map = {n: f.get("m_per_expert", {}).get(n, 1) for n in order}
    m_map.update(f.get("m_per_expert", {}))
    q_map = dict(f.get("queries_per_expert", {}))
    if f.get("method") == "qformer":
        for n in order:
            if n not in q_map and n in specs:
                # match the MLP path's token count
                q_map[n] = specs[n].n_patches // m_map.get(n, 1)
    fusion = FusionConfig(
        method=f.get("method", "mlp"),
        expert_order=tuple(order),
        m_per_expert=m_map,
        queries_per_expert=q_map,
        d_model=f.get("d_model", dec.d_model),
        d_hidden=f.get("d_hidden", f.get("d_model", dec.d_model)),
        qformer_width=f.get("qformer_width", 768),
        qformer_layers=f.get("qformer_layers", 2),
        qformer_heads=f.get("qformer_heads", 4),
    )
    problems += fusion.problems()
    if fusion.d_model != dec.d_model:
        problems.append(("fusion.d_model", f"must equal decoder.d_model ({dec.d_model})"))
    if experts and sorted(order) != sorted(names):
        problems.append(("fusion.expert_order", f"must be a permutation of the experts {names}"))
    for key in ("m_per_expert", "queries_per_expert"):
        for name in f.get(key, {}):
            if name not in specs:
                problems.append((f"fusion.{key}.{name}", "names no configured expert"))
    if fusion.method == "mlp":
        for name in order:
            if name in specs and name in m_map:
                s = specs[name]
                try:
                    check_m(int(m_map[name]), s.n_patches, s.grid_cols, name)
                except (ValueError, TypeError) as exc:
                    problems.append((f"fusion.m_per_expert.{name}", str(exc)))

    try:
        scheme = normalize_scheme(d["pe_scheme"])
    except ValueError:
        problems.append(("pe_scheme", f"must be one of {list(SCHEMES)}"))
        scheme = "original"

    phases = {}
    for ph in ("pretrain", "finetune"):
        try:
            pc = PhaseConfig(phase=ph, **d["phases"].get(ph, {}))
        except TypeError as exc:
            problems.append((f"phases.{ph}", str(exc)))
            pc = PhaseConfig(phase=ph)
        problems += pc.problems(f"phases.{ph}")
        phases[ph] = pc

    try:
        task = TaskSpec(**d["task"])
        problems += task.problems()
    except TypeError as exc:
        problems.append(("task", str(exc)))
        task = TaskSpec()
    for name, attrs in task.channels.items():
        if name not in specs:
            problems.append((f"task.channels.{name}", "names no configured expert"))
    if task.channels:
        experts = [
            ExpertSpec.from_dict({**e.to_dict(), "channel_profile": task.channels.get(e.name, sorted(e.channel_profile))})
            for e in experts
        ]
    if dec.vocab_size < vocab_needed():
        problems.append(("decoder.vocab_size", f"task tokens need at least {vocab_needed()} ids"))

    if not problems:
        # prefix + vision + question + answer must fit the decoder
        seq = 1 + fused_token_count(fusion, specs) + 2 + 2
        if seq > dec.max_len:
            problems.append(("decoder.max_len", f"sequence of {seq} tokens exceeds max_len={dec.max_len}"))
        if fusion.method == "qformer":
            for n in order:
                query_grid(q_map[n])

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        seed=raw["seed"],
        experts=experts,
        fusion=fusion,
        pe_scheme=scheme,
        decoder=dec,
        phases=phases,
        task=task,
        out_dir=str(d["out_dir"]),
        scale=scale,
        precision=d["precision"],
        analysis=dict(d["analysis"]),
    )


def parse_config(path, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([("", f"unreadable YAML: {exc}")]) from exc
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = out_dir
    return load_config(raw)


def default_config(seed: int = 0, **overrides) -> ExperimentConfig:
    raw = {"seed": seed}
    raw.update(overrides)
    return load_config(raw)
