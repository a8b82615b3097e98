"""Range-restricted region growing.

"Range-restricted" is the conjunction of an inclusive HU window and an
optional spatial restriction mask; growth floods from the seeds through
face- (6) or full- (26) connected eligible voxels. The voxel cap turns a
leak outside the intended structure into an error instead of a huge mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import DataError, GrowthCapError, SeedError
from ..volcore import LabelMap, Volume3, binary_labelmap, require_same_geometry


@dataclass(frozen=True)
class GrowParams:
    seeds: tuple[tuple[int, int, int], ...]
    hu_range: tuple[float, float]
    restriction: LabelMap | None = None
    connectivity: int = 6
    max_voxels: int = 2_000_000

    def __post_init__(self):
        seeds = tuple(tuple(int(c) for c in s) for s in self.seeds)
        if not seeds:
            raise DataError("region growing needs at least one seed")
        if any(len(s) != 3 for s in seeds):
            raise DataError("seeds must be (x, y, z) voxel indices")
        object.__setattr__(self, "seeds", seeds)
        lo, hi = self.hu_range
        if lo > hi:
            raise DataError(f"hu_range lower bound {lo} exceeds upper bound {hi}")
        object.__setattr__(self, "hu_range", (float(lo), float(hi)))
        if self.connectivity not in (6, 26):
            raise DataError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.max_voxels < 1:
            raise DataError("max_voxels must be positive")


def region_grow(v: Volume3, p: GrowParams) -> LabelMap:
    """Grow from ``p.seeds`` through voxels with HU in ``p.hu_range`` (and
    inside the restriction mask, when given). Returns a binary LabelMap.

    Raises ``SeedError`` if a seed is outside the volume, the HU window or
    the restriction, and ``GrowthCapError`` when the grown region would
    exceed ``p.max_voxels`` (a leak signal; no mask is returned).
    """
    lo, hi = p.hu_range
    eligible = (v.voxels >= lo) & (v.voxels <= hi)
    if p.restriction is not None:
        require_same_geometry(p.restriction, v, "restriction mask and volume")
        eligible &= p.restriction.as_bool()

    frontier = np.zeros(v.dims, dtype=bool)
    for s in p.seeds:
        if not all(0 <= s[i] < v.dims[i] for i in range(3)):
            raise SeedError(f"seed {s} outside volume dims {v.dims}")
        hu = int(v.voxels[s])
        if not (lo <= hu <= hi):
            raise SeedError(f"seed {s} HU {hu} outside range [{lo}, {hi}]")
        if not eligible[s]:
            raise SeedError(f"seed {s} excluded by the restriction mask")
        frontier[s] = True

    structure = ndimage.generate_binary_structure(3, 1 if p.connectivity == 6 else 3)
    visited = np.zeros(v.dims, dtype=bool)
    while frontier.any():
        visited |= frontier
        n = int(visited.sum())
        if n > p.max_voxels:
            raise GrowthCapError(
                f"region growing exceeded {p.max_voxels} voxels "
                f"(reached {n}); likely leak outside the target structure"
            )
        frontier = ndimage.binary_dilation(frontier, structure) & eligible & ~visited
    return binary_labelmap(v, visited)
