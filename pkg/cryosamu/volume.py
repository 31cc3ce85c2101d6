"""
Map preparation: resampling onto a 1 A grid, percentile normalization and
light training augmentation (noise, blur, anisotropy).
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union
import logging
import math

import numpy as np
from scipy import ndimage

from .constants import DEFAULT_PERCENTILE, DEFAULT_TARGET_VOXEL
from .lib import VolumeError
from .mapio import DensityMap

logger = logging.getLogger(__name__)

Range = Tuple[float, float]


def resample(density: DensityMap,
             target: Union[float, Tuple[float, float, float]] = DEFAULT_TARGET_VOXEL,
             shape: Optional[Tuple[int, int, int]] = None) -> DensityMap:
    """
    Trilinear resampling onto a `target` A/voxel grid (scalar or (x, y, z))
    sharing the source origin. Samples falling outside the source grid read
    as 0. `shape` (Z, Y, X) overrides the ceil(extent / target) default.
    """
    target_xyz = np.broadcast_to(np.asarray(target, dtype=np.float64), (3,))
    if not np.all(target_xyz > 0):
        raise VolumeError(f"Target voxel size must be positive, got {target}")
    target_zyx = target_xyz[::-1]
    src = np.asarray(density.data, dtype=np.float64)
    voxel_zyx = np.asarray(density.voxel_size[::-1], dtype=np.float64)

    if shape is None:
        extent = np.asarray(src.shape) * voxel_zyx
        if np.any(extent <= 0):
            raise VolumeError(f"Degenerate map extent {tuple(extent)}")
        shape = tuple(int(math.ceil(e / t - 1e-9)) for e, t in zip(extent, target_zyx))
    shape = tuple(int(n) for n in shape)
    if min(shape) < 1:
        raise VolumeError(f"Degenerate output shape {shape}")

    if np.allclose(voxel_zyx, target_zyx) and shape == src.shape:
        data = src.copy()
    else:
        data = ndimage.affine_transform(
            src,
            matrix=target_zyx / voxel_zyx,
            output_shape=shape,
            order=1,
            mode="constant",
            cval=0.0,
        )

    return DensityMap(
        data=data,
        voxel_size=tuple(target_xyz),
        origin=density.origin,
    )


def normalize(density: DensityMap, percentile: float = DEFAULT_PERCENTILE,
              include_zeros: bool = True) -> Tuple[DensityMap, float]:
    """Scale by the given percentile and clamp to [0, 1]."""
    values = np.asarray(density.data, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise VolumeError("Map contains non-finite values")
    if not include_zeros:
        values = values[values != 0]
        if values.size == 0:
            raise VolumeError("Map has no non-zero voxels to normalize against")

    scale = float(np.percentile(values, percentile))
    if not scale > 0:
        raise VolumeError(
            f"{percentile}th percentile is {scale}; cannot normalize a non-positive map")

    data = np.clip(np.asarray(density.data, dtype=np.float64) / scale, 0.0, 1.0)
    return density.with_data(data), scale


@dataclass
class AugmentConfig:
    noise_std: Range = (0.0, 0.0)
    blur_sigma: Range = (0.0, 0.0)
    anisotropy: Range = (1.0, 1.0)

    def validate(self):
        for name, (lo, hi), floor in (
            ("noise_std", self.noise_std, 0.0),
            ("blur_sigma", self.blur_sigma, 0.0),
            ("anisotropy", self.anisotropy, 1.0),
        ):
            if not (floor <= lo <= hi) or not np.isfinite(hi):
                raise VolumeError(
                    f"Invalid {name} range ({lo}, {hi}); need {floor} <= low <= high")
        return self

    @classmethod
    def light(cls) -> "AugmentConfig":
        return cls(noise_std=(0.0, 0.05), blur_sigma=(0.0, 1.0), anisotropy=(1.0, 2.0))


def anisotropic(cube: np.ndarray, axis: int, factor: float) -> np.ndarray:
    """Downsample one axis by `factor`, then trilinearly restore the shape."""
    n = cube.shape[axis]
    n_low = max(1, int(round(n / factor)))
    if n_low == n:
        return cube
    down = [1.0, 1.0, 1.0]
    down[axis] = n_low / n
    low = ndimage.zoom(cube, down, order=1, mode="nearest")
    up = [1.0, 1.0, 1.0]
    up[axis] = n / low.shape[axis]
    restored = ndimage.zoom(low, up, order=1, mode="nearest")
    if restored.shape != cube.shape:
        raise VolumeError(f"Anisotropy restore produced {restored.shape}, "
                          f"expected {cube.shape}")
    return restored


def augment(cube: np.ndarray, seed: int, cfg: AugmentConfig) -> np.ndarray:
    cfg.validate()
    rng = np.random.default_rng(seed)
    out = np.asarray(cube, dtype=np.float64).copy()

    if cfg.anisotropy[1] > 1.0:
        axis = int(rng.integers(3))
        factor = rng.uniform(*cfg.anisotropy)
        out = anisotropic(out, axis, factor)

    if cfg.blur_sigma[1] > 0.0:
        sigma = rng.uniform(*cfg.blur_sigma)
        if sigma > 0:
            out = ndimage.gaussian_filter(out, sigma=sigma, mode="reflect")

    if cfg.noise_std[1] > 0.0:
        std = rng.uniform(*cfg.noise_std)
        out = out + rng.normal(0.0, std, size=out.shape)

    return out
