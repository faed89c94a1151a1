"""Missing-data generators: uniform whole-voxel removal and random region removal."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import DistanceMatrix, MaskedRecording, Recording, as_rng
from .errors import ValidationError

ADJACENCY_RADIUS = 1.0
# coords round-trip through f32 on disk; keep integer-grid neighbours inside the radius
_ADJ_EPS = 1e-9


class RemovalMode(enum.Enum):
    RANDOM_VALUE = "value"
    RANDOM_REGION = "region"


@dataclass(frozen=True)
class RemovalSpec:
    mode: RemovalMode
    rate: float
    max_region_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.mode, RemovalMode):
            object.__setattr__(self, "mode", RemovalMode(self.mode))
        if not 0.0 <= self.rate <= 1.0:
            raise ValidationError(f"rate must be in [0, 1], got {self.rate}")
        if self.max_region_size is not None and self.max_region_size < 1:
            raise ValidationError("max_region_size must be >= 1")


def removal_count(rate: float, V: int) -> int:
    """Number of voxels to remove; Python's round() is half-to-even."""
    R = int(round(rate * V))
    if R >= V:
        raise ValidationError(f"rate {rate} removes all {V} voxels; nothing left to impute from")
    return R


def remove_random_values(rec: Recording, spec: RemovalSpec, rng=None) -> MaskedRecording:
    """Remove ``round(rate * V)`` whole voxel series chosen uniformly without replacement."""
    if spec.mode is not RemovalMode.RANDOM_VALUE:
        raise ValidationError(f"expected RANDOM_VALUE spec, got {spec.mode}")
    R = removal_count(spec.rate, rec.V)
    rng = as_rng(spec.seed if rng is None else rng)
    missing = np.zeros(rec.V, dtype=bool)
    missing[rng.choice(rec.V, size=R, replace=False)] = True
    return MaskedRecording.from_recording(rec, missing)


def adjacency_lists(d: DistanceMatrix, radius: float = ADJACENCY_RADIUS) -> list[np.ndarray]:
    adj = d.entries <= radius + _ADJ_EPS
    np.fill_diagonal(adj, False)
    return [np.flatnonzero(row) for row in adj]


def grow_regions(V: int, R: int, adjacency: list[np.ndarray], rng: np.random.Generator,
                 max_region_size: int | None = None) -> list[list[int]]:
    """Random region growth; returns the removed voxels grouped by the region that took them.

    Each region starts from a uniformly drawn unremoved voxel and repeatedly removes a
    uniform pick from its frontier (unremoved voxels adjacent to any voxel of the
    region) until the frontier empties, the region hits ``max_region_size``, or R
    voxels are gone.
    """
    removed = np.zeros(V, dtype=bool)
    regions: list[list[int]] = []
    n_removed = 0
    while n_removed < R:
        seed = int(rng.choice(np.flatnonzero(~removed)))
        removed[seed] = True
        n_removed += 1
        region = [seed]
        frontier = {int(u) for u in adjacency[seed] if not removed[u]}
        while (frontier and n_removed < R
               and (max_region_size is None or len(region) < max_region_size)):
            v = sorted(frontier)[int(rng.integers(len(frontier)))]
            frontier.discard(v)
            removed[v] = True
            n_removed += 1
            region.append(v)
            frontier.update(int(u) for u in adjacency[v] if not removed[u])
        regions.append(region)
    return regions


def remove_random_regions(rec: Recording, spec: RemovalSpec, d: DistanceMatrix,
                          rng=None) -> MaskedRecording:
    if spec.mode is not RemovalMode.RANDOM_REGION:
        raise ValidationError(f"expected RANDOM_REGION spec, got {spec.mode}")
    if d.V != rec.V:
        raise ValidationError(f"distance matrix is {d.V} x {d.V}, recording has {rec.V} voxels")
    R = removal_count(spec.rate, rec.V)
    rng = as_rng(spec.seed if rng is None else rng)
    regions = grow_regions(rec.V, R, adjacency_lists(d), rng, spec.max_region_size)
    missing = np.zeros(rec.V, dtype=bool)
    for region in regions:
        missing[region] = True
    return MaskedRecording.from_recording(rec, missing)


def corrupt(rec: Recording, spec: RemovalSpec, d: DistanceMatrix | None = None,
            rng=None) -> MaskedRecording:
    """Dispatch on ``spec.mode``; region mode needs ``d``."""
    if spec.mode is RemovalMode.RANDOM_VALUE:
        return remove_random_values(rec, spec, rng)
    if d is None:
        raise ValidationError("region removal needs a distance matrix")
    return remove_random_regions(rec, spec, d, rng)
