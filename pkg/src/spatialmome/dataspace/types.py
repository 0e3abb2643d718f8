from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class FormatError(ValueError):
    """A slide or store file is malformed."""


@dataclass(frozen=True)
class GenePanel:
    panel_id: str
    genes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        seen = set()
        for g in self.genes:
            if g in seen:
                raise FormatError(f"duplicate gene {g!r} in panel {self.panel_id!r}")
            seen.add(g)

    def __len__(self) -> int:
        return len(self.genes)

    def index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.genes)}


@dataclass(frozen=True)
class PanelRegistry:
    panels: tuple[GenePanel, ...]

    def __post_init__(self):
        object.__setattr__(self, "panels", tuple(self.panels))

    def get(self, panel_id: str) -> GenePanel:
        for p in self.panels:
            if p.panel_id == panel_id:
                return p
        raise KeyError(panel_id)


@dataclass
class SpotRecord:
    spot_id: str
    coord: tuple[float, float]
    expression: dict[int, int]
    patch_features: np.ndarray
    label: str | None = None


@dataclass
class SlideDataset:
    slide_id: str
    panel: GenePanel
    spots: list[SpotRecord]
    coordinate_mode: str  # "grid" or "continuous"
    feature_dim: int

    def __post_init__(self):
        if self.coordinate_mode not in ("grid", "continuous"):
            raise FormatError(f"unknown coordinate mode {self.coordinate_mode!r}")
        seen = set()
        for s in self.spots:
            if s.spot_id in seen:
                raise FormatError(f"duplicate spot_id {s.spot_id!r}")
            seen.add(s.spot_id)
            if len(s.patch_features) != self.feature_dim:
                raise FormatError(
                    f"spot {s.spot_id!r} has {len(s.patch_features)} features, expected {self.feature_dim}")
            for gi, c in s.expression.items():
                if not 0 <= gi < len(self.panel):
                    raise FormatError(f"spot {s.spot_id!r}: gene index {gi} out of range for "
                                      f"{len(self.panel)}-gene panel")
                if c < 0:
                    raise FormatError(f"spot {s.spot_id!r}: negative count")

    def __len__(self) -> int:
        return len(self.spots)

    @property
    def spot_ids(self) -> list[str]:
        return [s.spot_id for s in self.spots]

    def counts(self) -> np.ndarray:
        out = np.zeros((len(self.spots), len(self.panel)), dtype=np.int64)
        for i, s in enumerate(self.spots):
            for gi, c in s.expression.items():
                out[i, gi] = c
        return out

    def features(self) -> np.ndarray:
        if not self.spots:
            return np.zeros((0, self.feature_dim), dtype=np.float32)
        return np.stack([s.patch_features for s in self.spots]).astype(np.float32)

    def coords(self) -> np.ndarray:
        return np.array([s.coord for s in self.spots], dtype=np.float64).reshape(-1, 2)

    def labels(self) -> list[str | None]:
        return [s.label for s in self.spots]

    @property
    def has_labels(self) -> bool:
        return bool(self.spots) and all(s.label is not None for s in self.spots)


@dataclass
class Neighborhood:
    anchor: int  # index into slide.spots
    members: np.ndarray  # spot indices, deterministic order
    rel_coords: np.ndarray  # (k, 2) member coord minus anchor coord, in distance units
    anchor_id: str = ""
    member_ids: Sequence[str] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def anchor_position(self) -> int:
        return int(np.flatnonzero(self.members == self.anchor)[0])
