from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cloudio import PointCloud
from .errors import EmptyGridError, ParseError, ShapeError
from .schemas import GridSpec
from .tengine.tensor import Tensor

logger = logging.getLogger(__name__)

VXG_MAGIC = "VXG1"


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Binary occupancy volume, indexed [i, j, k] with k fastest."""

    spec: GridSpec
    occupancy: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=np.uint8)
        r = self.spec.resolution
        if occ.shape != (r, r, r):
            raise ShapeError(f"occupancy shape {occ.shape} does not match resolution {r}")
        if occ.max(initial=0) > 1:
            raise ValueError("occupancy cells must be 0 or 1")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    @property
    def occupied_count(self) -> int:
        return int(self.occupancy.sum(dtype=np.int64))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.occupancy, other.occupancy)


def voxelize(cloud: PointCloud, spec: GridSpec = GridSpec()) -> VoxelGrid:
    """Discretize a normalized cloud into a binary occupancy grid.

    Points on the far boundary are clamped into the last cell; points outside the
    grid region are dropped and counted.
    """
    if len(cloud) == 0:
        raise EmptyGridError("cannot voxelize an empty cloud")
    res = spec.resolution
    origin = np.asarray(spec.origin, dtype=np.float64)
    pts = cloud.points
    inside = np.all((pts >= origin) & (pts <= origin + spec.extent), axis=1)
    dropped = int(len(cloud) - inside.sum())
    if dropped == len(cloud):
        raise EmptyGridError("empty grid: every point lies outside the grid region")
    if dropped:
        logger.debug(f"Voxelize dropped points: dropped={dropped}, total={len(cloud)}, identity={cloud.identity}")
    idx = np.floor((pts[inside] - origin) / spec.extent * res).astype(np.int64)
    np.minimum(idx, res - 1, out=idx)
    occ = np.zeros((res, res, res), dtype=np.uint8)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return VoxelGrid(spec=spec, occupancy=occ, dropped=dropped)


def grid_to_tensor(grid: VoxelGrid) -> Tensor:
    """Rank-4 [1, D, H, W] tensor of 0.0 / 1.0 values."""
    return Tensor(grid.occupancy[np.newaxis].astype(np.float64))


def tensor_to_grid(tensor: Tensor, spec: GridSpec) -> VoxelGrid:
    data = tensor.data
    if data.ndim == 4 and data.shape[0] == 1:
        data = data[0]
    return VoxelGrid(spec=spec, occupancy=(data >= 0.5).astype(np.uint8))


def stack_grids(grids: Sequence[VoxelGrid]) -> Tensor:
    """Batch tensor [N, 1, D, H, W]."""
    if not grids:
        raise ShapeError("cannot stack an empty list of grids")
    batch = np.stack([g.occupancy for g in grids])[:, np.newaxis].astype(np.float64)
    return Tensor(batch)


# --- VXG1 file format ---


def write_vxg(grid: VoxelGrid) -> bytes:
    d, h, w = grid.occupancy.shape
    return f"{VXG_MAGIC} {d} {h} {w}\n".encode("ascii") + grid.occupancy.tobytes(order="C")


def read_vxg(data: bytes, spec: GridSpec | None = None) -> VoxelGrid:
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise ParseError("missing VXG1 header line", 1)
    parts = head.decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != VXG_MAGIC or not all(p.isdigit() for p in parts[1:]):
        raise ParseError(f"malformed VXG1 header {head[:40]!r}", 1)
    d, h, w = (int(p) for p in parts[1:])
    if not d == h == w:
        raise ParseError(f"only cubic grids are supported, got {d}x{h}x{w}", 1)
    if len(body) != d * h * w:
        raise ParseError(f"expected {d * h * w} cell bytes, found {len(body)}", 2)
    occ = np.frombuffer(body, dtype=np.uint8).reshape(d, h, w)
    if occ.max(initial=0) > 1:
        raise ParseError("cell bytes must be 0x00 or 0x01", 2)
    spec = spec or GridSpec(resolution=d)
    if spec.resolution != d:
        raise ShapeError(f"grid resolution {d} does not match spec resolution {spec.resolution}")
    return VoxelGrid(spec=spec, occupancy=occ)
