"""Positional-embedding schemes for vision tokens and their PE budgets.

Indices are assigned on the post-fusion grid of each expert segment. Row
indices restart at 0 in every segment and all segments share one table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParamTensor, Tensor

SCHEMES = ("original", "share_all", "share_by_row", "share_by_row_col")
_ALIASES = {
    "share-all": "share_all",
    "share-by-row": "share_by_row",
    "share-by-row-and-col": "share_by_row_col",
    "share_by_row_and_col": "share_by_row_col",
    "share-by-row-col": "share_by_row_col",
}


def normalize_scheme(scheme: str) -> str:
    s = _ALIASES.get(scheme, scheme)
    if s not in SCHEMES:
        raise ValueError(f"unknown PE scheme {scheme!r}; expected one of {SCHEMES}")
    return s


@dataclass
class PositionAssignment:
    scheme: str
    index: np.ndarray  # [N] or [N, 2] for (row, col) pairs
    distinct_count: int

    @property
    def n_tokens(self) -> int:
        return self.index.shape[0]


def _check_grids(grids, lengths) -> list[tuple[int, int]]:
    grids = [tuple(int(v) for v in g) for g in grids]
    if not grids:
        raise ValueError("no vision grids given")
    for i, (r, c) in enumerate(grids):
        if r <= 0 or c <= 0:
            raise ValueError(f"segment {i}: empty grid {r}x{c}")
    if lengths is not None:
        if len(lengths) != len(grids):
            raise ValueError(f"{len(grids)} grids for {len(lengths)} segments")
        for i, ((r, c), n) in enumerate(zip(grids, lengths)):
            if r * c != n:
                raise ValueError(f"segment {i}: grid {r}x{c} does not cover {n} tokens")
    return grids


def position_budget(scheme: str, grids: Sequence[tuple[int, int]]) -> int:
    """Number of distinct learnable PE vectors one image consumes."""
    scheme = normalize_scheme(scheme)
    grids = _check_grids(grids, None)
    if scheme == "original":
        return sum(r * c for r, c in grids)
    if scheme == "share_all":
        return 1
    rows = max(r for r, _ in grids)
    if scheme == "share_by_row":
        return rows
    return rows + max(c for _, c in grids)


def assign_positions(scheme: str, grids: Sequence[tuple[int, int]], lengths: Sequence[int] | None = None) -> PositionAssignment:
    scheme = normalize_scheme(scheme)
    grids = _check_grids(grids, lengths)
    n = sum(r * c for r, c in grids)
    if scheme == "original":
        idx = np.arange(n)
        distinct = n
    elif scheme == "share_all":
        idx = np.zeros(n, dtype=np.int64)
        distinct = 1
    elif scheme == "share_by_row":
        idx = np.concatenate([np.repeat(np.arange(r), c) for r, c in grids])
        distinct = len(np.unique(idx))
    else:
        rows = np.concatenate([np.repeat(np.arange(r), c) for r, c in grids])
        cols = np.concatenate([np.tile(np.arange(c), r) for r, c in grids])
        idx = np.stack([rows, cols], axis=1)
        distinct = len(np.unique(rows)) + len(np.unique(cols))
    return PositionAssignment(scheme, idx.astype(np.int64), distinct)


class PETables:
    """Vision PE table(s) plus the ordinary per-token text table (group ``pe``)."""

    def __init__(
        self,
        scheme: str,
        d_model: int,
        grids: Sequence[tuple[int, int]],
        max_text: int,
        max_vision: int | None = None,
        seed: int = 0,
        dtype=nx.TRAIN_DTYPE,
        init_scale: float = 0.02,
    ):
        self.scheme = normalize_scheme(scheme)
        self.d_model = d_model
        grids = _check_grids(grids, None)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E]))

        def table(name, rows):
            data = (rng.standard_normal((rows, d_model)) * init_scale).astype(dtype)
            return ParamTensor(data, f"pe.{name}", "pe")

        self.text = table("text", max_text)
        self.col: ParamTensor | None = None
        if self.scheme == "original":
            self.vision = table("vision", max_vision or sum(r * c for r, c in grids))
        elif self.scheme == "share_all":
            self.vision = table("vision", 1)
        elif self.scheme == "share_by_row":
            self.vision = table("vision", max(r for r, _ in grids))
        else:
            self.vision = table("vision", max(r for r, _ in grids))
            self.col = table("col", max(c for _, c in grids))

    def parameters(self) -> list[ParamTensor]:
        out = [self.text, self.vision]
        if self.col is not None:
            out.append(self.col)
        return out

    def text_positions(self, start: int, count: int) -> Tensor:
        if start + count > self.text.shape[0]:
            raise OverflowError(f"text position {start + count - 1} exceeds the text PE table ({self.text.shape[0]})")
        return nx.take_rows(self.text, np.arange(start, start + count))


def embed_positions(assignment: PositionAssignment, tables: PETables) -> Tensor:
    if assignment.scheme != tables.scheme:
        raise ValueError(f"assignment uses {assignment.scheme} but tables were built for {tables.scheme}")
    if assignment.scheme == "share_by_row_col":
        rows = nx.take_rows(tables.vision, assignment.index[:, 0])
        cols = nx.take_rows(tables.col, assignment.index[:, 1])
        return nx.add(rows, cols)
    return nx.take_rows(tables.vision, assignment.index)
