"""Frozen synthetic visual experts.

Each expert sees a fixed subset of image attributes (its channel profile).
Profiled attributes are injected as per-value signature vectors; everything
else an expert emits is a projection of a pseudo-random texture, so
attributes outside the profile are not linearly recoverable from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import TRAIN_DTYPE, ParamTensor

ATTRIBUTES = ("color", "count", "mark", "layout")
MAX_ATTRIBUTE_VALUES = 16
PIXEL_SIZE = 64
PIXEL_CHANNELS = 4
SIGNAL_SCALE = 1.0
NOISE_SCALE = 0.5

# name -> (grid side, hidden dim) at full geometry
PAPER_GEOMETRY = {
    "clip": (24, 1024),
    "dinov2": (16, 1536),
    "layoutlmv3": (14, 1024),
    "convnext": (32, 768),
    "sam": (64, 1280),
    "mae": (16, 1280),
}

DEFAULT_PROFILES = {
    "clip": ("color",),
    "dinov2": ("count",),
    "layoutlmv3": ("mark",),
    "convnext": ("color",),
    "sam": ("layout",),
    "mae": ("count",),
}


@dataclass(frozen=True)
class ExpertSpec:
    name: str
    grid_rows: int
    grid_cols: int
    hidden_dim: int
    channel_profile: frozenset = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channel_profile", frozenset(self.channel_profile))
        bad = set(self.channel_profile) - set(ATTRIBUTES)
        if bad:
            raise ValueError(f"expert {self.name}: unknown attributes {sorted(bad)}")

    @property
    def n_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "hidden_dim": self.hidden_dim,
            "channel_profile": sorted(self.channel_profile),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSpec":
        return cls(
            name=d["name"],
            grid_rows=int(d["grid_rows"]),
            grid_cols=int(d["grid_cols"]),
            hidden_dim=int(d["hidden_dim"]),
            channel_profile=frozenset(d.get("channel_profile", ())),
            seed=int(d.get("seed", 0)),
        )


def toy_dim(d: int) -> int:
    """Divide by 64 and round up to a multiple of 4."""
    return 4 * math.ceil(math.ceil(d / 64) / 4)


def preset_specs(scale: str = "toy") -> list[ExpertSpec]:
    if scale not in ("toy", "paper"):
        raise ValueError(f"scale must be 'toy' or 'paper', got {scale!r}")
    out = []
    for i, (name, (side, dim)) in enumerate(PAPER_GEOMETRY.items()):
        out.append(
            ExpertSpec(
                name=name,
                grid_rows=side,
                grid_cols=side,
                hidden_dim=dim if scale == "paper" else toy_dim(dim),
                channel_profile=frozenset(DEFAULT_PROFILES[name]),
                seed=i,
            )
        )
    return out


def preset(name: str, scale: str = "toy", **overrides) -> ExpertSpec:
    for spec in preset_specs(scale):
        if spec.name == name:
            if overrides:
                d = spec.to_dict()
                d.update(overrides)
                return ExpertSpec.from_dict(d)
            return spec
    raise KeyError(f"no preset expert named {name!r}")


@dataclass(frozen=True)
class SyntheticImage:
    """Attribute tuple plus a per-image seed.

    The pixel proxy is a texture keyed on both, so two images with equal
    attributes still differ in nuisance content unless their seeds match.
    """

    color: int = 0
    count: int = 0
    mark: int = 0
    layout: int = 0
    seed: int = 0

    def __post_init__(self):
        for a in ATTRIBUTES:
            v = getattr(self, a)
            if not 0 <= v < MAX_ATTRIBUTE_VALUES:
                raise ValueError(f"{a}={v} outside [0, {MAX_ATTRIBUTE_VALUES})")

    @property
    def attributes(self) -> dict[str, int]:
        return {a: getattr(self, a) for a in ATTRIBUTES}

    def attribute_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, a) for a in ATTRIBUTES)

    def pixels(self) -> np.ndarray:
        ss = np.random.SeedSequence([self.seed, *self.attribute_tuple()])
        return np.random.default_rng(ss).standard_normal((PIXEL_SIZE, PIXEL_SIZE, PIXEL_CHANNELS))


@dataclass
class PatchFeatures:
    expert: str
    grid: tuple[int, int]
    features: np.ndarray

    def __post_init__(self):
        rows, cols = self.grid
        if self.features.shape[-2] != rows * cols:
            raise ValueError(f"{self.expert}: {self.features.shape[-2]} rows for a {rows}x{cols} grid")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.expert}: non-finite features")

    @property
    def n(self) -> int:
        return self.features.shape[-2]

    @property
    def d(self) -> int:
        return self.features.shape[-1]


class Expert:
    """Frozen encoder ``e_i``: image -> ``n_i x d_i`` patch features."""

    def __init__(self, spec: ExpertSpec):
        if spec.grid_rows <= 0 or spec.grid_cols <= 0 or spec.hidden_dim <= 0:
            raise ValueError(f"expert {spec.name}: zero-sized geometry")
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
        d = spec.hidden_dim
        self.params: list[ParamTensor] = []
        self.signatures: dict[str, ParamTensor] = {}
        for attr in ATTRIBUTES:
            table = rng.standard_normal((MAX_ATTRIBUTE_VALUES, d)) * SIGNAL_SCALE
            if attr in spec.channel_profile:
                p = ParamTensor(table, f"expert.{spec.name}.{attr}", "expert", frozen=True)
                self.signatures[attr] = p
                self.params.append(p)
        basis = rng.standard_normal((PIXEL_CHANNELS, d)) * NOISE_SCALE
        self.noise_basis = ParamTensor(basis, f"expert.{spec.name}.noise_basis", "expert", frozen=True)
        self.params.append(self.noise_basis)
        rows, cols = spec.grid_rows, spec.grid_cols
        self._pix_r = ((2 * np.arange(rows) + 1) * PIXEL_SIZE) // (2 * rows)
        self._pix_c = ((2 * np.arange(cols) + 1) * PIXEL_SIZE) // (2 * cols)

    @property
    def name(self) -> str:
        return self.spec.name

    def encode(self, image: SyntheticImage, dtype=TRAIN_DTYPE) -> PatchFeatures:
        spec = self.spec
        pix = image.pixels()[np.ix_(self._pix_r, self._pix_c)]
        feats = pix.reshape(spec.n_patches, PIXEL_CHANNELS) @ self.noise_basis.data
        for attr, table in self.signatures.items():
            feats = feats + table.data[getattr(image, attr)]
        return PatchFeatures(spec.name, (spec.grid_rows, spec.grid_cols), feats.astype(dtype))


def make_expert(spec: ExpertSpec) -> Expert:
    return Expert(spec)


def encode(expert: Expert, image: SyntheticImage, dtype=TRAIN_DTYPE) -> PatchFeatures:
    return expert.encode(image, dtype)
