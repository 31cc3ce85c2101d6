"""
Density maps and the MRC-2014 container.

Arrays are held in (Z, Y, X) order with X fastest, whatever axis order the
file was written in. Geometry (voxel size, origin) is always given as (x, y, z)
in Angstrom.
"""

from dataclasses import dataclass, field
from typing import Tuple, Union
import logging
import pathlib
import warnings

import mrcfile
import numpy as np

from .constants import (
    MRC_HEADER_BYTES,
    MRC_READ_MODES,
    MRC_BIG_ENDIAN_STAMP,
)
from .lib import MapFormatError

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]


@dataclass
class DensityMap:
    data: np.ndarray
    voxel_size: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)
    axis_order: Tuple[int, int, int] = (1, 2, 3)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise MapFormatError(
                f"Density maps are 3D, got an array of shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise MapFormatError(f"Empty map of shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise MapFormatError("Density maps must be finite, found non-finite values")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.origin = tuple(float(v) for v in self.origin)
        if len(self.voxel_size) != 3 or \
                not all(np.isfinite(v) and v > 0 for v in self.voxel_size):
            raise MapFormatError(f"Invalid voxel size {self.voxel_size}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    def with_data(self, data: np.ndarray) -> "DensityMap":
        return DensityMap(
            data=data,
            voxel_size=self.voxel_size,
            origin=self.origin,
            axis_order=self.axis_order,
        )

    def grid_coordinates(self, axis: int) -> np.ndarray:
        """Physical coordinates (A) of grid points along x (0), y (1) or z (2)."""
        n = self.dims[axis]
        return self.origin[axis] + np.arange(n) * self.voxel_size[axis]

    def extent(self) -> Tuple[np.ndarray, np.ndarray]:
        """Lowest and highest grid point positions as (x, y, z)."""
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.voxel_size)
        return lo, hi

    def same_grid(self, other: "DensityMap", atol: float = 1e-4) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.voxel_size, other.voxel_size, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
        )


@dataclass
class MrcHeader:
    nx: int
    ny: int
    nz: int
    mode: int
    mapc: int
    mapr: int
    maps: int
    nxstart: int = 0
    nystart: int = 0
    nzstart: int = 0
    sampling: Vec3 = (0, 0, 0)
    cell: Vec3 = (0.0, 0.0, 0.0)
    origin: Vec3 = (0.0, 0.0, 0.0)
    rms: float = 0.0
    dmin: float = 0.0
    dmax: float = 0.0
    dmean: float = 0.0
    nsymbt: int = 0
    machine_stamp: bytes = field(default=b"\x44\x44\x00\x00")

    @property
    def axis_codes(self) -> Tuple[int, int, int]:
        return self.mapc, self.mapr, self.maps

    @property
    def data_offset(self) -> int:
        return MRC_HEADER_BYTES + self.nsymbt

    @property
    def data_bytes(self) -> int:
        itemsize = np.dtype(MRC_READ_MODES[self.mode]).itemsize
        return self.nx * self.ny * self.nz * itemsize


def read_header(path: Union[str, pathlib.Path]) -> MrcHeader:
    path = pathlib.Path(path)
    size = path.stat().st_size
    if size < MRC_HEADER_BYTES:
        raise MapFormatError(
            f"{path}: truncated header ({size} bytes, need {MRC_HEADER_BYTES})")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with mrcfile.open(path, mode="r", permissive=True, header_only=True) as mrc:
            h = mrc.header
            stamp = bytes(np.asarray(h.machst, dtype=np.uint8).tobytes())
            header = MrcHeader(
                nx=int(h.nx), ny=int(h.ny), nz=int(h.nz),
                mode=int(h.mode),
                mapc=int(h.mapc), mapr=int(h.mapr), maps=int(h.maps),
                nxstart=int(h.nxstart), nystart=int(h.nystart),
                nzstart=int(h.nzstart),
                sampling=(int(h.mx), int(h.my), int(h.mz)),
                cell=(float(h.cella.x), float(h.cella.y), float(h.cella.z)),
                origin=(float(h.origin.x), float(h.origin.y), float(h.origin.z)),
                rms=float(h.rms),
                dmin=float(h.dmin), dmax=float(h.dmax), dmean=float(h.dmean),
                nsymbt=int(h.nsymbt),
                machine_stamp=stamp,
            )

    if header.machine_stamp[0] == MRC_BIG_ENDIAN_STAMP:
        raise MapFormatError(f"{path}: big-endian MRC files are not supported")
    if header.mode not in MRC_READ_MODES:
        raise MapFormatError(
            f"{path}: unsupported mode {header.mode}, "
            f"expected one of {sorted(MRC_READ_MODES)}")
    if sorted(header.axis_codes) != [1, 2, 3]:
        raise MapFormatError(
            f"{path}: axis codes {header.axis_codes} are not a permutation of (1, 2, 3)")
    if min(header.nx, header.ny, header.nz) < 1:
        raise MapFormatError(
            f"{path}: invalid dimensions {(header.nx, header.ny, header.nz)}")

    expected = header.data_offset + header.data_bytes
    if size < expected:
        raise MapFormatError(
            f"{path}: truncated data ({size} bytes, header implies {expected})")
    return header


def read_mrc(path: Union[str, pathlib.Path]) -> DensityMap:
    path = pathlib.Path(path)
    header = read_header(path)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with mrcfile.open(path, mode="r", permissive=True) as mrc:
            if mrc.data is None:
                raise MapFormatError(f"{path}: could not read the data block")
            raw = np.array(mrc.data).reshape(header.nz, header.ny, header.nx)

    bad = np.flatnonzero(~np.isfinite(raw))
    if bad.size:
        offset = header.data_offset + int(bad[0]) * raw.dtype.itemsize
        raise MapFormatError(
            f"{path}: non-finite density value at byte offset {offset}")

    # file axes of `raw` are (sections, rows, columns) -> codes (maps, mapr, mapc)
    file_codes = (header.maps, header.mapr, header.mapc)
    order = [file_codes.index(code) for code in (3, 2, 1)]
    data = np.ascontiguousarray(raw.transpose(order)).astype(np.float32, copy=False)

    nz, ny, nx = data.shape
    dims = np.array([nx, ny, nz], dtype=float)
    sampling = np.array(header.sampling, dtype=float)
    sampling = np.where(sampling > 0, sampling, dims)
    cell = np.array(header.cell, dtype=float)
    if np.any(cell <= 0):
        logger.warning(f"{path}: cell dimensions {tuple(cell)} unset, assuming 1 A/voxel")
        cell = np.where(cell > 0, cell, sampling)
    voxel_size = tuple(cell / sampling)

    # start indices follow the file axes as well
    start_file = {header.mapc: header.nxstart,
                  header.mapr: header.nystart,
                  header.maps: header.nzstart}
    start = np.array([start_file[1], start_file[2], start_file[3]], dtype=float)
    origin = np.array(header.origin, dtype=float)
    if np.any(start != 0):
        if np.all(origin == 0):
            origin = start * np.asarray(voxel_size)
        else:
            logger.warning(
                f"{path}: both origin {tuple(origin)} and start indices "
                f"{tuple(start.astype(int))} are set, using origin")

    logger.debug(f"Read {path}: dims {(nx, ny, nz)}, voxel {voxel_size}, "
                 f"mode {header.mode}, axes {header.axis_codes}")
    return DensityMap(
        data=data,
        voxel_size=voxel_size,
        origin=tuple(origin),
        axis_order=header.axis_codes,
    )


def write_mrc(density: DensityMap, path: Union[str, pathlib.Path]):
    path = pathlib.Path(path)
    data = np.ascontiguousarray(density.data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise MapFormatError(f"Refusing to write non-finite densities to {path}")

    try:
        with mrcfile.new(path, overwrite=True) as mrc:
            mrc.set_data(data)
            mrc.voxel_size = density.voxel_size
            mrc.header.origin.x = density.origin[0]
            mrc.header.origin.y = density.origin[1]
            mrc.header.origin.z = density.origin[2]
            mrc.update_header_stats()
    except OSError as e:
        raise MapFormatError(f"Could not write {path}: {e}")
    logger.debug(f"Wrote {path}: dims {density.dims}")

