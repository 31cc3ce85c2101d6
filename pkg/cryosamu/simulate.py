"""
Target map simulation.

Every heavy atom i contributes theta * Z_i * exp(-k |x - r_i|^2) at grid
point x. With k = 4 ln2 / resolution^2 the Gaussian's full width at half
maximum equals the resolution, and theta = (k / pi)^(3/2) makes each atom
integrate to its atomic number.
"""

from dataclasses import dataclass
from typing import Optional, Tuple
import logging
import math

import numpy as np

from .constants import (
    CUTOFF_SCALE,
    DEFAULT_GRID_INTERVAL,
    MAX_RESOLUTION,
)
from .lib import SimulationError
from .mapio import DensityMap
from .structure import ProteinStructure

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimParams:
    resolution: float
    grid_interval: float
    k: float
    theta: float
    cutoff_radius: float

    @property
    def width(self) -> float:
        """1/sqrt(k), the Gaussian length scale in A."""
        return 1.0 / math.sqrt(self.k)


@dataclass
class SimulatedMap:
    map: DensityMap
    params: SimParams
    bbox: Tuple[Tuple[float, float, float], Tuple[float, float, float]]


def derive_params(resolution: float,
                  grid_interval: float = DEFAULT_GRID_INTERVAL) -> SimParams:
    if not resolution > 0:
        raise SimulationError(f"Resolution must be positive, got {resolution}")
    if resolution > MAX_RESOLUTION:
        raise SimulationError(
            f"Resolution {resolution} A exceeds {MAX_RESOLUTION} A; the Gaussian "
            f"would not be resolved at grid scale")
    if not grid_interval > 0:
        raise SimulationError(f"Grid interval must be positive, got {grid_interval}")

    k = 4.0 * math.log(2.0) / resolution ** 2
    return SimParams(
        resolution=float(resolution),
        grid_interval=float(grid_interval),
        k=k,
        theta=(k / math.pi) ** 1.5,
        cutoff_radius=CUTOFF_SCALE / math.sqrt(k),
    )


def _grid_for(coords: np.ndarray, params: SimParams) -> DensityMap:
    margin = params.cutoff_radius
    step = params.grid_interval
    lo = np.floor((coords.min(axis=0) - margin) / step) * step
    hi = np.ceil((coords.max(axis=0) + margin) / step) * step
    nx, ny, nz = (np.rint((hi - lo) / step).astype(int) + 1)
    return DensityMap(
        data=np.zeros((nz, ny, nx), dtype=np.float64),
        voxel_size=(step, step, step),
        origin=tuple(lo),
    )


def _covers(grid: DensityMap, coords: np.ndarray, tol: float = 1e-6) -> bool:
    lo, hi = grid.extent()
    return bool(np.all(coords >= lo - tol) and np.all(coords <= hi + tol))


def accumulate(density: np.ndarray, grid: DensityMap, coords: np.ndarray,
               weights: np.ndarray, params: SimParams) -> np.ndarray:
    """
    Add truncated Gaussians for each atom into `density` (Z, Y, X), in atom
    order. Atoms whose cutoff sphere misses the grid add nothing.
    """
    origin = np.asarray(grid.origin)
    voxel = np.asarray(grid.voxel_size)
    dims = np.asarray(grid.dims)
    radius = params.cutoff_radius
    r2max = radius * radius

    for position, z in zip(coords, weights):
        lo = np.maximum(np.ceil((position - radius - origin) / voxel), 0).astype(int)
        hi = np.minimum(np.floor((position + radius - origin) / voxel), dims - 1).astype(int)
        if np.any(hi < lo):
            continue

        # per-axis squared distances, x/y/z
        d2 = [
            (origin[a] + np.arange(lo[a], hi[a] + 1) * voxel[a] - position[a]) ** 2
            for a in range(3)
        ]
        r2 = d2[2][:, None, None] + d2[1][None, :, None] + d2[0][None, None, :]
        block = params.theta * z * np.exp(-params.k * r2)
        block[r2 > r2max] = 0.0
        density[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] += block

    return density


def simulate_map(structure: ProteinStructure, params: SimParams,
                 grid: Optional[DensityMap] = None) -> SimulatedMap:
    coords = structure.coordinates()
    if len(coords) == 0:
        raise SimulationError(f"{structure.source_id}: structure has no heavy atoms")

    if grid is None:
        grid = _grid_for(coords, params)
    elif not _covers(grid, coords):
        raise SimulationError(
            f"{structure.source_id}: grid does not cover all atoms of the structure")

    density = np.zeros(grid.shape, dtype=np.float64)
    accumulate(density, grid, coords, structure.element_numbers(), params)
    logger.debug(f"Simulated {len(coords)} atoms on a {grid.dims} grid "
                 f"at {params.resolution} A")

    bbox = (tuple(coords.min(axis=0) - params.cutoff_radius),
            tuple(coords.max(axis=0) + params.cutoff_radius))
    return SimulatedMap(map=grid.with_data(density), params=params, bbox=bbox)


def residue_density(structure: ProteinStructure, chain: str, seq: int,
                    params: SimParams, grid: DensityMap, icode: str = "") -> DensityMap:
    residue = structure.find_residue(chain, seq, icode)
    if residue is None:
        raise SimulationError(
            f"{structure.source_id}: unknown residue {chain}:{seq}{icode}")

    coords = np.array([a.position for a in residue.atoms], dtype=np.float64).reshape(-1, 3)
    weights = np.array([a.element_number for a in residue.atoms], dtype=np.float64)
    density = accumulate(np.zeros(grid.shape, dtype=np.float64), grid, coords, weights, params)
    if not density.any():
        logger.warning(f"Residue {chain}:{seq}{icode} {residue.name} lies outside the grid")
    return grid.with_data(density)
