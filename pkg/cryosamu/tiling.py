"""
Cube tiling of zero-padded volumes.

A cube of `cube_size` voxels keeps only its central `core_size` region when
stitched back; cubes are laid out so the cores step through the original
volume with stride `core_size`. All shapes and offsets are in array (Z, Y, X)
order.
"""

from dataclasses import dataclass, field
from itertools import product
from typing import List, Optional, Sequence, Tuple, Union
import json
import logging
import math
import pathlib

import numpy as np

from .constants import DEFAULT_CORE_SIZE, DEFAULT_CUBE_SIZE, DEFAULT_PAD
from .lib import TilingError, REPORT_SCHEMA_VERSION
from .mapio import DensityMap

logger = logging.getLogger(__name__)

Index3 = Tuple[int, int, int]


@dataclass
class TilePlan:
    original_dims: Index3
    padded_dims: Index3
    cube_origins: List[Index3]
    cube_size: int = DEFAULT_CUBE_SIZE
    core_size: int = DEFAULT_CORE_SIZE
    pad: int = DEFAULT_PAD
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def stride(self) -> int:
        return self.core_size

    @property
    def rim(self) -> int:
        return (self.cube_size - self.core_size) // 2

    def __len__(self):
        return len(self.cube_origins)

    def core_region(self, index: int) -> Tuple[slice, ...]:
        """The part of the original volume owned by cube `index`."""
        out = []
        for start, n in zip(self.cube_origins[index], self.original_dims):
            lo = start + self.rim - self.pad
            out.append(slice(max(lo, 0), min(lo + self.core_size, n)))
        return tuple(out)

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": REPORT_SCHEMA_VERSION,
            "original_dims": list(self.original_dims),
            "padded_dims": list(self.padded_dims),
            "cube_origins": [list(o) for o in self.cube_origins],
            "cube_size": self.cube_size,
            "core_size": self.core_size,
            "pad": self.pad,
            "voxel_size": list(self.voxel_size),
            "origin": list(self.origin),
        }, indent=4)

    @classmethod
    def from_json(cls, text: str) -> "TilePlan":
        try:
            obj = json.loads(text)
            return cls(
                original_dims=tuple(obj["original_dims"]),
                padded_dims=tuple(obj["padded_dims"]),
                cube_origins=[tuple(o) for o in obj["cube_origins"]],
                cube_size=int(obj["cube_size"]),
                core_size=int(obj["core_size"]),
                pad=int(obj["pad"]),
                voxel_size=tuple(obj.get("voxel_size", (1.0, 1.0, 1.0))),
                origin=tuple(obj.get("origin", (0.0, 0.0, 0.0))),
            )
        except (ValueError, KeyError, TypeError) as e:
            raise TilingError(f"Malformed tile plan: {e}")


@dataclass
class CubeBatch:
    cubes: np.ndarray
    plan: TilePlan
    indices: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.indices:
            self.indices = list(range(len(self.cubes)))
        if len(self.indices) != len(self.cubes):
            raise TilingError(f"{len(self.indices)} indices for {len(self.cubes)} cubes")

    @property
    def complete(self) -> bool:
        return sorted(self.indices) == list(range(len(self.plan)))


def _axis_starts(n: int, cube: int, core: int, pad: int) -> List[int]:
    rim = (cube - core) // 2
    limit = n + 2 * pad - cube
    starts = []
    for i in range(math.ceil(n / core)):
        start = min(pad - rim + core * i, limit)
        if starts and start == starts[-1]:
            continue
        starts.append(start)
    return starts


def make_plan(dims: Sequence[int], cube_size: int = DEFAULT_CUBE_SIZE,
              core_size: int = DEFAULT_CORE_SIZE, pad: int = DEFAULT_PAD,
              voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TilePlan:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise TilingError(f"Invalid volume dims {dims}")
    if not 0 < core_size <= cube_size or (cube_size - core_size) % 2:
        raise TilingError(
            f"Cube size {cube_size} and core size {core_size} must leave an even rim")
    rim = (cube_size - core_size) // 2
    if pad < rim:
        raise TilingError(f"Padding {pad} is smaller than the cube rim {rim}")
    if min(dims) + 2 * pad < cube_size:
        raise TilingError(
            f"Padded dims {tuple(n + 2 * pad for n in dims)} smaller than a {cube_size} cube")

    per_axis = [_axis_starts(n, cube_size, core_size, pad) for n in dims]
    return TilePlan(
        original_dims=dims,
        padded_dims=tuple(n + 2 * pad for n in dims),
        cube_origins=[tuple(o) for o in product(*per_axis)],
        cube_size=cube_size,
        core_size=core_size,
        pad=pad,
        voxel_size=tuple(voxel_size),
        origin=tuple(origin),
    )


def plan_for(density: DensityMap, cube_size: int = DEFAULT_CUBE_SIZE,
             core_size: int = DEFAULT_CORE_SIZE, pad: int = DEFAULT_PAD) -> TilePlan:
    return make_plan(density.shape, cube_size, core_size, pad,
                     voxel_size=density.voxel_size, origin=density.origin)


def partition(volume: Union[DensityMap, np.ndarray], plan: TilePlan) -> CubeBatch:
    data = volume.data if isinstance(volume, DensityMap) else np.asarray(volume)
    if tuple(data.shape) != tuple(plan.original_dims):
        raise TilingError(
            f"Plan was built for dims {plan.original_dims}, volume has {data.shape}")

    padded = np.pad(data, plan.pad, mode="constant", constant_values=0)
    c = plan.cube_size
    cubes = np.stack([
        padded[z:z + c, y:y + c, x:x + c] for z, y, x in plan.cube_origins
    ])
    return CubeBatch(cubes=cubes, plan=plan)


def stitch(batch: CubeBatch, plan: Optional[TilePlan] = None) -> DensityMap:
    plan = plan or batch.plan
    if len(batch.cubes) and tuple(batch.cubes.shape[1:]) != (plan.cube_size,) * 3:
        raise TilingError(
            f"Cubes of shape {batch.cubes.shape[1:]} do not match the plan's "
            f"cube size {plan.cube_size}")
    have = set(batch.indices)
    missing = [i for i in range(len(plan)) if i not in have]
    if missing:
        raise TilingError(f"Missing {len(missing)} cubes (first: {missing[0]})")

    out = np.zeros(plan.original_dims, dtype=batch.cubes.dtype)
    position = {index: n for n, index in enumerate(batch.indices)}
    # plan order; later cubes overwrite shared tail voxels
    for index in range(len(plan)):
        region = plan.core_region(index)
        local = tuple(
            slice(r.start - (o - plan.pad), r.stop - (o - plan.pad))
            for r, o in zip(region, plan.cube_origins[index])
        )
        out[region] = batch.cubes[position[index]][local]

    return DensityMap(data=out, voxel_size=plan.voxel_size, origin=plan.origin)


def save_cubes(batch: CubeBatch, out_dir: Union[str, pathlib.Path]):
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "plan.json").write_text(batch.plan.to_json() + "\n")
    for index, cube in zip(batch.indices, batch.cubes):
        np.save(out_dir / f"cube_{index:05d}.npy", cube)
    logger.info(f"Wrote {len(batch.cubes)} cubes to {out_dir}")


def load_cubes(cube_dir: Union[str, pathlib.Path], plan: TilePlan) -> CubeBatch:
    cube_dir = pathlib.Path(cube_dir)
    indices, cubes = [], []
    for path in sorted(cube_dir.glob("cube_*.npy")):
        try:
            index = int(path.stem.split("_")[1])
        except (IndexError, ValueError):
            raise TilingError(f"Unexpected cube file name {path.name}")
        indices.append(index)
        try:
            cubes.append(np.load(path, allow_pickle=False))
        except (ValueError, EOFError) as e:
            raise TilingError(f"{path}: not a readable cube array ({e})")
    if not cubes:
        raise TilingError(f"No cube files found in {cube_dir}")
    shapes = {cube.shape for cube in cubes}
    if len(shapes) != 1:
        raise TilingError(f"Cubes in {cube_dir} differ in shape: {sorted(shapes)}")
    return CubeBatch(cubes=np.stack(cubes), plan=plan, indices=indices)
